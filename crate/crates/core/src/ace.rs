//! Background whitening and the adaptive cosine estimator.
//!
//! For an inverse background covariance `P = U·diag(λ)·Uᵀ` the whitening
//! map is `x ↦ diag(√λ)·Uᵀ·(x − μ)`, so that inner products of whitened
//! vectors equal `P`-weighted inner products of the originals. The ACE score
//! of a sample against a signature is the cosine of the angle between the
//! two after whitening (the signature is not mean-shifted).

use crate::error::{LaceError, Result};
use ndarray::Axis;

use crate::numerics::{right_svd, sym_eig, Matrix, Vector, EIGEN_FLOOR};

/// Affine whitening `x ↦ rotation·(x − mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenOp {
    pub rotation: Matrix,
    pub mean: Vector,
}

/// Rows of a batch after whitening and normalisation.
#[derive(Debug, Clone)]
pub struct WhitenedBatch {
    /// `B×d`, row `n` is the whitened sample divided by `(‖·‖ + eps)`.
    pub features: Matrix,
    /// Whitened norms before normalisation; zero marks a sample sitting on
    /// the background mean.
    pub pre_norms: Vector,
}

impl WhitenedBatch {
    pub fn degenerate_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.pre_norms
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 0.0)
            .map(|(i, _)| i)
    }
}

impl WhitenOp {
    pub fn identity(dim: usize) -> Self {
        WhitenOp {
            rotation: Matrix::eye(dim),
            mean: Vector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `rotation·(x − mean)` without normalisation.
    pub fn project(&self, x: &Vector) -> Vector {
        self.rotation.dot(&(x - &self.mean))
    }

    /// Effective inverse covariance `rotationᵀ·rotation` (differs from the
    /// input only where eigenvalues were floored).
    pub fn metric(&self) -> Matrix {
        self.rotation.t().dot(&self.rotation)
    }
}

/// Builds the whitener for inverse covariance `inv_cov` and mean `mean`.
/// Eigenvalues are floored at [`EIGEN_FLOOR`].
pub fn build_whitener(inv_cov: &Matrix, mean: &Vector) -> Result<WhitenOp> {
    let d = mean.len();
    if inv_cov.dim() != (d, d) {
        return Err(LaceError::invalid(format!(
            "inverse covariance is {:?}, mean has dimension {d}",
            inv_cov.dim()
        )));
    }
    let eig = sym_eig(inv_cov)?;
    let scales = eig.eigenvalues.mapv(|l| l.max(EIGEN_FLOOR).sqrt());
    // diag(√λ)·Uᵀ: row i is √λ_i times eigenvector i.
    let rotation = eig.eigenvectors.t().to_owned() * &scales.insert_axis(ndarray::Axis(1));
    Ok(WhitenOp {
        rotation,
        mean: mean.clone(),
    })
}

/// Whitener from a sample set's own mean and inverse population covariance.
///
/// Equivalent to `build_whitener(cov⁻¹, mean)`, but the spectrum comes from an
/// SVD of the centred samples: `cov = V·diag(σ²/n)·Vᵀ`, so no covariance or
/// inverse is formed and near-singular sample sets keep full accuracy.
pub fn whitener_from_samples(samples: &Matrix) -> Result<WhitenOp> {
    let (n, d) = samples.dim();
    if n < d {
        return Err(LaceError::invalid(format!(
            "{n} samples cannot have a non-singular covariance in dimension {d}"
        )));
    }
    let mean = samples
        .mean_axis(Axis(0))
        .ok_or_else(|| LaceError::invalid("whitener from an empty sample set"))?;
    let svd = right_svd(&(samples - &mean))?;
    if let Some(&min) = svd.singular_values.iter().last() {
        if !(min > 0.0) {
            return Err(LaceError::invalid("sample covariance is singular"));
        }
    }
    // Ascending covariance spectrum = descending inverse spectrum.
    let mut rotation = Matrix::zeros((d, d));
    for (row, src) in (0..d).rev().enumerate() {
        let inv_var = n as f64 / (svd.singular_values[src] * svd.singular_values[src]);
        let scale = inv_var.max(EIGEN_FLOOR).sqrt();
        rotation.row_mut(row).assign(&(&svd.vectors.column(src) * scale));
    }
    Ok(WhitenOp { rotation, mean })
}

/// Whitens and normalises every row of `batch` (`B×d`).
pub fn whiten(op: &WhitenOp, batch: &Matrix, eps: f64) -> Result<WhitenedBatch> {
    if batch.ncols() != op.dim() {
        return Err(LaceError::invalid(format!(
            "batch has {} columns, whitener expects {}",
            batch.ncols(),
            op.dim()
        )));
    }
    let mut features = (batch - &op.mean).dot(&op.rotation.t());
    let mut pre_norms = Vector::zeros(batch.nrows());
    for (mut row, norm) in features.rows_mut().into_iter().zip(pre_norms.iter_mut()) {
        *norm = row.dot(&row).sqrt();
        let denom = *norm + eps;
        row.mapv_inplace(|v| v / denom);
    }
    Ok(WhitenedBatch { features, pre_norms })
}

/// Whitens (without mean shift) and normalises each signature column.
pub fn whiten_signatures(op: &WhitenOp, signatures: &Matrix, eps: f64) -> Result<Matrix> {
    if signatures.nrows() != op.dim() {
        return Err(LaceError::invalid(format!(
            "signatures have {} rows, whitener expects {}",
            signatures.nrows(),
            op.dim()
        )));
    }
    let mut w = op.rotation.dot(signatures);
    for mut col in w.columns_mut() {
        let denom = col.dot(&col).sqrt() + eps;
        col.mapv_inplace(|v| v / denom);
    }
    Ok(w)
}

/// An ACE value; `degenerate` is set when the signature has zero norm under
/// the metric or the sample coincides with the mean, in which case the value
/// is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AceValue {
    pub value: f64,
    pub degenerate: bool,
}

/// `sᵀP(x−μ) / (√(sᵀPs)·√((x−μ)ᵀP(x−μ)))` evaluated directly.
pub fn ace_statistic(x: &Vector, s: &Vector, mean: &Vector, inv_cov: &Matrix) -> Result<AceValue> {
    let d = x.len();
    if s.len() != d || mean.len() != d || inv_cov.dim() != (d, d) {
        return Err(LaceError::invalid(format!(
            "ACE dimensions disagree: x {d}, s {}, mean {}, inv_cov {:?}",
            s.len(),
            mean.len(),
            inv_cov.dim()
        )));
    }
    let u = x - mean;
    let pu = inv_cov.dot(&u);
    let ps = inv_cov.dot(s);
    let num = s.dot(&pu);
    let ss = s.dot(&ps).max(0.0);
    let uu = u.dot(&pu).max(0.0);
    let den = ss.sqrt() * uu.sqrt();
    if den == 0.0 || !den.is_finite() {
        return Ok(AceValue {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(AceValue {
        value: num / den,
        degenerate: false,
    })
}

/// `B×C` ACE scores: whitened, normalised signatures dotted with the rows of
/// an already whitened batch.
pub fn ace_scores(batch: &WhitenedBatch, signatures: &Matrix, whitener: &WhitenOp, eps: f64) -> Result<Matrix> {
    if batch.features.ncols() != whitener.dim() {
        return Err(LaceError::invalid(format!(
            "whitened batch has {} columns, whitener expects {}",
            batch.features.ncols(),
            whitener.dim()
        )));
    }
    let sigs = whiten_signatures(whitener, signatures, eps)?;
    Ok(batch.features.dot(&sigs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{empirical_stats, normalize, psd_from_factor, NORM_EPS};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Matrix {
        Matrix::from_shape_fn(shape, |_| StandardNormal.sample(rng))
    }

    #[test]
    fn identity_whitener() {
        let op = build_whitener(&Matrix::eye(3), &Vector::zeros(3)).unwrap();
        assert_eq!(op.rotation, Matrix::eye(3));
    }

    #[test]
    fn diagonal_whitener_hand_case() {
        let op = build_whitener(&array![[4.0, 0.0], [0.0, 1.0]], &array![1.0, 1.0]).unwrap();
        assert_eq!(op.rotation, array![[2.0, 0.0], [0.0, 1.0]]);
        assert_eq!(op.project(&array![3.0, 2.0]), array![4.0, 1.0]);
        let w = whiten(&op, &array![[3.0, 2.0]], NORM_EPS).unwrap();
        let r17 = 17f64.sqrt();
        assert_abs_diff_eq!(w.features[[0, 0]], 4.0 / r17, epsilon = 1e-12);
        assert_abs_diff_eq!(w.features[[0, 1]], 1.0 / r17, epsilon = 1e-12);
        assert_abs_diff_eq!(w.pre_norms[0], r17, epsilon = 1e-14);
    }

    #[test]
    fn already_white_samples() {
        let samples = array![[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]];
        let op = whitener_from_samples(&samples).unwrap();
        let projected = (&samples - &op.mean).dot(&op.rotation.t());
        let (mean, cov) = empirical_stats(&projected).unwrap();
        assert!(mean.iter().all(|v| v.abs() < 1e-12));
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(cov[[i, j]], e, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn whiten_identity_and_degenerate_rows() {
        let op = WhitenOp::identity(2);
        let w = whiten(&op, &array![[1.0, 0.0], [0.0, 1.0]], NORM_EPS).unwrap();
        assert_abs_diff_eq!(w.features[[0, 0]], 1.0, epsilon = 1e-11);
        assert_abs_diff_eq!(w.features[[1, 1]], 1.0, epsilon = 1e-11);

        let op = build_whitener(&Matrix::eye(2), &array![0.5, -2.0]).unwrap();
        let w = whiten(&op, &array![[0.5, -2.0], [1.0, 1.0]], NORM_EPS).unwrap();
        assert_eq!(w.features.row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(w.pre_norms[0], 0.0);
        assert_eq!(w.degenerate_rows().collect::<Vec<_>>(), vec![0]);
        assert!(whiten(&op, &Matrix::zeros((1, 3)), NORM_EPS).is_err());
    }

    #[test]
    fn ace_statistic_examples() {
        let zero = Vector::zeros(2);
        let id = Matrix::eye(2);
        let v = ace_statistic(&array![1.0, 0.0], &array![1.0, 0.0], &zero, &id).unwrap();
        assert_abs_diff_eq!(v.value, 1.0, epsilon = 1e-15);
        let v = ace_statistic(&array![0.0, 1.0], &array![1.0, 0.0], &zero, &id).unwrap();
        assert_eq!(v.value, 0.0);
        // Σ_b = diag(4, 1): u = (2, 1), sᵀΣ⁻¹u = 1/2, √(sᵀΣ⁻¹s) = 1/2, √(uᵀΣ⁻¹u) = √2.
        let inv = array![[0.25, 0.0], [0.0, 1.0]];
        let v = ace_statistic(&array![3.0, 2.0], &array![1.0, 0.0], &array![1.0, 1.0], &inv).unwrap();
        assert_abs_diff_eq!(v.value, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert!(!v.degenerate);

        let v = ace_statistic(&array![1.0, 1.0], &array![1.0, 0.0], &array![1.0, 1.0], &id).unwrap();
        assert_eq!(
            v,
            AceValue {
                value: 0.0,
                degenerate: true
            }
        );
        let v = ace_statistic(&array![2.0, 1.0], &zero, &zero, &id).unwrap();
        assert!(v.degenerate);
    }

    #[test]
    fn scores_identity_and_degenerate() {
        let op = WhitenOp::identity(3);
        let batch = whiten(&op, &Matrix::eye(3), NORM_EPS).unwrap();
        let scores = ace_scores(&batch, &Matrix::eye(3), &op, NORM_EPS).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(scores[[i, j]], e, epsilon = 1e-11);
            }
        }
        let op = build_whitener(&Matrix::eye(2), &array![1.0, 2.0]).unwrap();
        let batch = whiten(&op, &array![[1.0, 2.0]], NORM_EPS).unwrap();
        let scores = ace_scores(&batch, &array![[1.0, 0.0], [0.0, 1.0]], &op, NORM_EPS).unwrap();
        assert_eq!(scores.row(0).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn scores_match_elementwise_statistic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, d, c) = (4, 3, 3);
        let x = gauss(&mut rng, (b, d));
        let s = gauss(&mut rng, (d, c));
        let mean = gauss(&mut rng, (1, d)).row(0).to_owned();
        let inv = psd_from_factor(&gauss(&mut rng, (d, d))).unwrap() + Matrix::eye(d) * 0.1;
        let op = build_whitener(&inv, &mean).unwrap();
        let batch = whiten(&op, &x, NORM_EPS).unwrap();
        let scores = ace_scores(&batch, &s, &op, NORM_EPS).unwrap();
        for n in 0..b {
            for j in 0..c {
                let raw = ace_statistic(&x.row(n).to_owned(), &s.column(j).to_owned(), &mean, &inv).unwrap();
                assert_abs_diff_eq!(scores[[n, j]], raw.value, epsilon = 1e-9);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn raw_and_whitened_forms_agree(seed in any::<u64>(), d in 1usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = gauss(&mut rng, (1, d)).row(0).to_owned();
            let s = gauss(&mut rng, (1, d)).row(0).to_owned();
            let mean = gauss(&mut rng, (1, d)).row(0).to_owned();
            let inv = psd_from_factor(&gauss(&mut rng, (d, d))).unwrap() + Matrix::eye(d) * 1e-3;
            let raw = ace_statistic(&x, &s, &mean, &inv).unwrap();
            let op = build_whitener(&inv, &mean).unwrap();
            // Exact normalisation: the identity concerns the unfloored forms.
            let xh = normalize(&op.project(&x), f64::MIN_POSITIVE);
            let sh = normalize(&op.rotation.dot(&s), f64::MIN_POSITIVE);
            prop_assert!((raw.value - xh.dot(&sh)).abs() < 1e-9);
            prop_assert!(raw.value.abs() <= 1.0 + 1e-9);
        }

        #[test]
        fn identity_stats_reduce_to_cosine(x in proptest::collection::vec(-10f64..10.0, 4), s in proptest::collection::vec(-10f64..10.0, 4)) {
            let x = Vector::from(x);
            let s = Vector::from(s);
            let v = ace_statistic(&x, &s, &Vector::zeros(4), &Matrix::eye(4)).unwrap();
            let denom = x.dot(&x).sqrt() * s.dot(&s).sqrt();
            prop_assume!(denom > 1e-6);
            prop_assert!((v.value - x.dot(&s) / denom).abs() < 1e-12);
        }

        #[test]
        fn scale_invariance_about_mean(seed in any::<u64>(), alpha in 1e-3f64..1e3) {
            let d = 5;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = gauss(&mut rng, (1, d)).row(0).to_owned();
            let s = gauss(&mut rng, (1, d)).row(0).to_owned();
            let mean = gauss(&mut rng, (1, d)).row(0).to_owned();
            let inv = psd_from_factor(&gauss(&mut rng, (d, d))).unwrap() + Matrix::eye(d) * 1e-2;
            let scaled = &mean + &((&x - &mean) * alpha);
            let a = ace_statistic(&x, &s, &mean, &inv).unwrap().value;
            let b = ace_statistic(&scaled, &s, &mean, &inv).unwrap().value;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn self_whitening_gives_identity_covariance(seed in any::<u64>(), d in 1usize..=16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 10 * d;
            let mix = gauss(&mut rng, (d, d)) + Matrix::eye(d) * 2.0;
            let samples = gauss(&mut rng, (n, d)).dot(&mix) + 3.0;
            let op = whitener_from_samples(&samples).unwrap();
            let projected = (&samples - &op.mean).dot(&op.rotation.t());
            let (mean, cov) = empirical_stats(&projected).unwrap();
            let dev: f64 = (&cov - &Matrix::eye(d)).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(dev < 1e-6, "covariance deviation {dev}");
            prop_assert!(mean.dot(&mean).sqrt() < 1e-8);
        }
    }
}
