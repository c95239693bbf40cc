//! The LACE objective: softmax cross entropy over ACE scores between
//! whitened embeddings and whitened class signatures, with learned
//! background mean and inverse covariance `M·Mᵀ`.
//!
//! The backward pass differentiates the scores through the quadratic forms
//! `a = sᵀP(x−μ)`, `b = sᵀPs`, `c = (x−μ)ᵀP(x−μ)` with `P = RᵀR` the
//! metric of the whitener, rather than through the eigendecomposition. This
//! is exact whenever no eigenvalue of `M·Mᵀ` sits below the floor.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{cosine_cotangent, cross_entropy_score_grad, softmax_cross_entropy, validate_batch, LossOutput};
use crate::ace::{build_whitener, whiten, whiten_signatures, WhitenOp};
use crate::error::{LaceError, Result};
use crate::numerics::{all_finite, psd_from_factor, standard, Matrix, Vector};

/// Which background statistics are active. Disabled statistics are replaced
/// by their neutral values (`μ = 0`, `Σ⁻¹ = I`) and receive zero gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub use_mean: bool,
    pub use_cov: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_mean: true,
            use_cov: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaceParams {
    /// `d×C`, one signature per column.
    pub signatures: Matrix,
    pub mean: Vector,
    /// Raw factor `M`; the inverse background covariance is `M·Mᵀ`.
    pub factor: Matrix,
    pub ablation: Ablation,
}

#[derive(Debug, Clone)]
pub struct GradientSet {
    pub d_signatures: Matrix,
    pub d_mean: Vector,
    pub d_factor: Matrix,
    /// Cotangent of the inverse covariance before chaining into the factor
    /// (`∂a/∂P = s·uᵀ` layout, not symmetrised).
    pub d_inv_cov: Matrix,
    pub d_embeddings: Matrix,
}

impl LaceParams {
    /// Signatures ~ N(0, 1/d), mean ~ N(0, 0.01²), factor = I + N(0, 0.01²).
    pub fn init(dim: usize, classes: usize, ablation: Ablation, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(LaceError::invalid("LACE head needs d ≥ 1 and C ≥ 1"));
        }
        let sig = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        let small = Normal::new(0.0, 0.01).expect("positive std");
        let signatures = Matrix::from_shape_fn((dim, classes), |_| sig.sample(rng));
        let mean = Vector::from_shape_fn(dim, |_| small.sample(rng));
        let factor = Matrix::eye(dim) + Matrix::from_shape_fn((dim, dim), |_| small.sample(rng));
        Ok(LaceParams {
            signatures,
            mean,
            factor,
            ablation,
        })
    }

    /// Identity statistics and the given signatures.
    pub fn with_identity_stats(signatures: Matrix, ablation: Ablation) -> Self {
        let d = signatures.nrows();
        LaceParams {
            signatures,
            mean: Vector::zeros(d),
            factor: Matrix::eye(d),
            ablation,
        }
    }

    pub fn dim(&self) -> usize {
        self.signatures.nrows()
    }

    pub fn classes(&self) -> usize {
        self.signatures.ncols()
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.dim();
        if self.mean.len() != d || self.factor.dim() != (d, d) {
            return Err(LaceError::invalid(format!(
                "LACE parameter shapes disagree: signatures {:?}, mean {}, factor {:?}",
                self.signatures.dim(),
                self.mean.len(),
                self.factor.dim()
            )));
        }
        if !all_finite(self.signatures.iter().chain(self.mean.iter()).chain(self.factor.iter())) {
            return Err(LaceError::NumericalFailure("LACE parameters are not finite".into()));
        }
        Ok(())
    }

    pub fn effective_mean(&self) -> Vector {
        if self.ablation.use_mean {
            self.mean.clone()
        } else {
            Vector::zeros(self.dim())
        }
    }

    pub fn effective_inv_cov(&self) -> Result<Matrix> {
        if self.ablation.use_cov {
            psd_from_factor(&self.factor)
        } else {
            Ok(Matrix::eye(self.dim()))
        }
    }

    /// Whitener for the active statistics.
    pub fn whitener(&self) -> Result<WhitenOp> {
        self.check_shapes()?;
        let mean = self.effective_mean();
        if self.ablation.use_cov {
            build_whitener(&psd_from_factor(&self.factor)?, &mean)
        } else {
            Ok(WhitenOp {
                rotation: Matrix::eye(self.dim()),
                mean,
            })
        }
    }

    /// `B×C` ACE scores of `embeddings` against every signature.
    pub fn scores(&self, embeddings: &Matrix, eps: f64) -> Result<Matrix> {
        let op = self.whitener()?;
        let batch = whiten(&op, embeddings, eps)?;
        let sigs = whiten_signatures(&op, &self.signatures, eps)?;
        Ok(batch.features.dot(&sigs))
    }
}

pub fn lace_forward(params: &LaceParams, embeddings: &Matrix, labels: &[usize], eps: f64) -> Result<LossOutput> {
    validate_batch(embeddings, labels, params.classes())?;
    let scores = params.scores(embeddings, eps)?;
    Ok(softmax_cross_entropy(scores, labels))
}

pub fn lace_backward(params: &LaceParams, embeddings: &Matrix, labels: &[usize], eps: f64) -> Result<GradientSet> {
    lace_forward_backward(params, embeddings, labels, eps).map(|(_, g)| g)
}

pub fn lace_forward_backward(
    params: &LaceParams,
    embeddings: &Matrix,
    labels: &[usize],
    eps: f64,
) -> Result<(LossOutput, GradientSet)> {
    validate_batch(embeddings, labels, params.classes())?;
    let op = params.whitener()?;
    let r = &op.rotation;
    let d = params.dim();

    let centered = embeddings - &op.mean;
    let wu = centered.dot(&r.t()); // B×d whitened samples
    let ws = r.dot(&params.signatures); // d×C whitened signatures
    let a = wu.dot(&ws);
    let b = ws.map_axis(ndarray::Axis(0), |c| c.dot(&c));
    let c = wu.map_axis(ndarray::Axis(1), |row| row.dot(&row));

    let q = b.mapv(|v| v.sqrt() + eps);
    let rr = c.mapv(|v| v.sqrt() + eps);
    let mut scores = a.clone();
    for ((n, j), s) in scores.indexed_iter_mut() {
        *s /= q[j] * rr[n];
    }
    let out = softmax_cross_entropy(scores, labels);

    let upstream = cross_entropy_score_grad(&out.probabilities, labels);
    let cot = cosine_cotangent(&a, &b, &c, &upstream, eps);

    // P·S and U·P through the whitener's metric.
    let ps = r.t().dot(&ws);
    let up = wu.dot(r);

    let mut d_signatures = up.t().dot(&cot.d_a);
    for (mut col, (&db, ps_col)) in d_signatures
        .columns_mut()
        .into_iter()
        .zip(cot.d_b.iter().zip(ps.columns()))
    {
        col.scaled_add(2.0 * db, &ps_col);
    }

    let mut d_embeddings = cot.d_a.dot(&ps.t());
    for (mut row, (&dc, up_row)) in d_embeddings.rows_mut().into_iter().zip(cot.d_c.iter().zip(up.rows())) {
        row.scaled_add(2.0 * dc, &up_row);
    }

    let d_mean = if params.ablation.use_mean {
        -d_embeddings.sum_axis(ndarray::Axis(0))
    } else {
        Vector::zeros(d)
    };

    let (d_inv_cov, d_factor) = if params.ablation.use_cov {
        let s = &params.signatures;
        let sb = s * &cot.d_b; // columns scaled by d_b
        let uc = &centered * &cot.d_c.view().insert_axis(ndarray::Axis(1));
        let g = s.dot(&cot.d_a.t()).dot(&centered) + sb.dot(&s.t()) + uc.t().dot(&centered);
        let sym = &g + &g.t();
        let d_factor = sym.dot(&params.factor);
        (g, d_factor)
    } else {
        (Matrix::zeros((d, d)), Matrix::zeros((d, d)))
    };

    Ok((
        out,
        GradientSet {
            d_signatures: standard(d_signatures),
            d_mean,
            d_factor: standard(d_factor),
            d_inv_cov: standard(d_inv_cov),
            d_embeddings: standard(d_embeddings),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::NORM_EPS;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gauss(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Matrix {
        Matrix::from_shape_fn(shape, |_| StandardNormal.sample(rng))
    }

    fn fixture(seed: u64, d: usize, c: usize, b: usize, ablation: Ablation) -> (LaceParams, Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = LaceParams {
            signatures: gauss(&mut rng, (d, c)),
            mean: gauss(&mut rng, (1, d)).row(0).to_owned() * 0.3,
            factor: Matrix::eye(d) + gauss(&mut rng, (d, d)) * 0.3,
            ablation,
        };
        let x = gauss(&mut rng, (b, d));
        let labels = (0..b).map(|i| (i * 7 + seed as usize) % c).collect();
        (params, x, labels)
    }

    /// Cross entropy over cosines of L2-normalised embeddings and
    /// signatures, written independently of the whitening code.
    fn normalized_cosine_ce(s: &Matrix, x: &Matrix, labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for (n, &l) in labels.iter().enumerate() {
            let xn = x.row(n);
            let xnorm = xn.dot(&xn).sqrt();
            let logits: Vec<f64> = s
                .columns()
                .into_iter()
                .map(|col| col.dot(&xn) / (col.dot(&col).sqrt() * xnorm))
                .collect();
            let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
            total += lse - logits[l];
        }
        total / labels.len() as f64
    }

    #[test]
    fn single_class_loss_and_gradients_are_zero() {
        let (params, x, _) = fixture(1, 3, 1, 4, Ablation::default());
        let labels = vec![0; 4];
        let (out, g) = lace_forward_backward(&params, &x, &labels, NORM_EPS).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(g.d_signatures.iter().all(|&v| v == 0.0));
        assert!(g.d_mean.iter().all(|&v| v == 0.0));
        assert!(g.d_factor.iter().all(|&v| v == 0.0));
        assert!(g.d_embeddings.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embeddings_at_mean_give_uniform_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = LaceParams::init(4, 10, Ablation::default(), &mut rng).unwrap();
        params.mean = array![0.5, -1.0, 2.0, 0.0];
        let x = Matrix::from_shape_fn((3, 4), |(_, j)| params.mean[j]);
        let out = lace_forward(&params, &x, &[0, 4, 9], NORM_EPS).unwrap();
        assert_abs_diff_eq!(out.loss, 10f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn orthonormal_hand_case() {
        let params = LaceParams::with_identity_stats(Matrix::eye(2), Ablation::default());
        let out = lace_forward(&params, &Matrix::eye(2), &[0, 1], NORM_EPS).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(out.loss, -(e / (e + 1.0)).ln(), epsilon = 1e-10);
        assert_abs_diff_eq!(out.loss, 0.31326, epsilon = 1e-5);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (params, x, _) = fixture(3, 3, 2, 2, Ablation::default());
        assert!(matches!(
            lace_forward(&params, &x, &[0, 2], NORM_EPS),
            Err(LaceError::InvalidArgument(_))
        ));
        let mut bad = x.clone();
        bad[[1, 1]] = f64::INFINITY;
        assert!(lace_backward(&params, &bad, &[0, 1], NORM_EPS).is_err());
    }

    #[test]
    fn fully_ablated_matches_normalized_cosine_softmax() {
        let ablation = Ablation {
            use_mean: false,
            use_cov: false,
        };
        for seed in 0..20 {
            let (params, x, labels) = fixture(seed, 5, 4, 6, ablation);
            let out = lace_forward(&params, &x, &labels, 0.0).unwrap();
            let oracle = normalized_cosine_ce(&params.signatures, &x, &labels);
            assert!((out.loss - oracle).abs() < 1e-10, "seed {seed}");
            let g = lace_backward(&params, &x, &labels, 0.0).unwrap();
            assert!(g.d_factor.iter().all(|&v| v == 0.0));
            assert!(g.d_mean.iter().all(|&v| v == 0.0));
            // Central differences of the independent implementation.
            let h = 1e-6;
            for i in 0..5 {
                for j in 0..4 {
                    let mut sp = params.signatures.clone();
                    sp[[i, j]] += h;
                    let mut sm = params.signatures.clone();
                    sm[[i, j]] -= h;
                    let fd =
                        (normalized_cosine_ce(&sp, &x, &labels) - normalized_cosine_ce(&sm, &x, &labels)) / (2.0 * h);
                    assert!((fd - g.d_signatures[[i, j]]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_loss_finite_for_large_inputs() {
        let (params, x, labels) = fixture(4, 4, 3, 5, Ablation::default());
        let out = lace_forward(&params, &(x * 1e4), &labels, NORM_EPS).unwrap();
        assert!(out.loss.is_finite() && out.loss >= 0.0);
        for row in out.probabilities.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn mean_and_embedding_gradients_are_dual(seed in any::<u64>()) {
            let (params, x, labels) = fixture(seed, 4, 3, 5, Ablation::default());
            let g = lace_backward(&params, &x, &labels, NORM_EPS).unwrap();
            let total = g.d_embeddings.sum_axis(ndarray::Axis(0));
            for k in 0..4 {
                prop_assert!((total[k] + g.d_mean[k]).abs() < 1e-10);
            }
        }

        #[test]
        fn translation_leaves_loss_and_gradients_unchanged(seed in any::<u64>(), shift in proptest::collection::vec(-5f64..5.0, 4)) {
            let (params, x, labels) = fixture(seed, 4, 3, 5, Ablation::default());
            let shift = Vector::from(shift);
            let mut moved = params.clone();
            moved.mean = &moved.mean + &shift;
            let x2 = &x + &shift;
            let (o1, g1) = lace_forward_backward(&params, &x, &labels, NORM_EPS).unwrap();
            let (o2, g2) = lace_forward_backward(&moved, &x2, &labels, NORM_EPS).unwrap();
            prop_assert!((o1.loss - o2.loss).abs() < 1e-10);
            for (a, b) in g1.d_signatures.iter().zip(g2.d_signatures.iter())
                .chain(g1.d_mean.iter().zip(g2.d_mean.iter()))
                .chain(g1.d_factor.iter().zip(g2.d_factor.iter()))
                .chain(g1.d_embeddings.iter().zip(g2.d_embeddings.iter()))
            {
                prop_assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
            }
        }
    }
}
