//! Comparison heads: a plain linear softmax layer and a large-margin cosine
//! (CosFace-style) head.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{
    cosine_cotangent, cross_entropy_score_grad, softmax_cross_entropy, validate_batch, HeadGradients, LossOutput,
};
use crate::error::{LaceError, Result};
use crate::numerics::{standard, Matrix, Vector};

pub const DEFAULT_COSFACE_MARGIN: f64 = 0.4;
pub const DEFAULT_COSFACE_SCALE: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineVariant {
    PlainSoftmax,
    /// `logit = scale·(cos θ − margin·[c = label])`.
    CosineMargin {
        margin: f64,
        scale: f64,
    },
}

impl BaselineVariant {
    pub fn cosface_defaults() -> Self {
        BaselineVariant::CosineMargin {
            margin: DEFAULT_COSFACE_MARGIN,
            scale: DEFAULT_COSFACE_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineHead {
    /// `d×C`.
    pub weights: Matrix,
    pub bias: Vector,
    pub variant: BaselineVariant,
}

/// Softmax output in angular form plus the number of (sample, class) pairs
/// whose angle was undefined and replaced by `cos θ = 0`.
#[derive(Debug, Clone)]
pub struct AngularOutput {
    pub output: LossOutput,
    pub degenerate_pairs: usize,
}

impl BaselineHead {
    pub fn new(weights: Matrix, bias: Vector, variant: BaselineVariant) -> Result<Self> {
        if bias.len() != weights.ncols() {
            return Err(LaceError::invalid(format!(
                "bias has {} entries for {} classes",
                bias.len(),
                weights.ncols()
            )));
        }
        if let BaselineVariant::CosineMargin { margin, scale } = variant {
            if !(scale > 0.0) || !(margin >= 0.0) {
                return Err(LaceError::invalid(format!(
                    "cosine margin needs scale > 0 and margin ≥ 0 (got {scale}, {margin})"
                )));
            }
        }
        Ok(BaselineHead { weights, bias, variant })
    }

    /// Weights ~ N(0, 1/d), zero bias.
    pub fn init(dim: usize, classes: usize, variant: BaselineVariant, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(LaceError::invalid("baseline head needs d ≥ 1 and C ≥ 1"));
        }
        let dist = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        let weights = Matrix::from_shape_fn((dim, classes), |_| dist.sample(rng));
        BaselineHead::new(weights, Vector::zeros(classes), variant)
    }

    fn check_dim(&self, embeddings: &Matrix) -> Result<()> {
        if embeddings.ncols() != self.weights.nrows() {
            return Err(LaceError::invalid(format!(
                "embeddings have {} columns, head expects {}",
                embeddings.ncols(),
                self.weights.nrows()
            )));
        }
        Ok(())
    }

    /// `Wᵀz + b`.
    pub fn logits(&self, embeddings: &Matrix) -> Result<Matrix> {
        self.check_dim(embeddings)?;
        Ok(embeddings.dot(&self.weights) + &self.bias)
    }

    /// Cosines between embeddings and weight columns with eps-floored norms.
    fn cosines(&self, embeddings: &Matrix, eps: f64) -> Result<(Matrix, Vector, Vector, Matrix)> {
        self.check_dim(embeddings)?;
        let a = embeddings.dot(&self.weights);
        let b = self.weights.map_axis(ndarray::Axis(0), |c| c.dot(&c));
        let c = embeddings.map_axis(ndarray::Axis(1), |r| r.dot(&r));
        let mut cos = a.clone();
        for ((n, j), v) in cos.indexed_iter_mut() {
            *v /= (b[j].sqrt() + eps) * (c[n].sqrt() + eps);
        }
        Ok((a, b, c, cos))
    }

    pub fn scores(&self, embeddings: &Matrix, eps: f64) -> Result<Matrix> {
        match self.variant {
            BaselineVariant::PlainSoftmax => self.logits(embeddings),
            BaselineVariant::CosineMargin { .. } => Ok(self.cosines(embeddings, eps)?.3),
        }
    }

    pub fn forward(&self, embeddings: &Matrix, labels: &[usize], eps: f64) -> Result<LossOutput> {
        match self.variant {
            BaselineVariant::PlainSoftmax => softmax_ce_forward(self, embeddings, labels),
            BaselineVariant::CosineMargin { .. } => cosine_margin_forward(self, embeddings, labels, eps),
        }
    }

    pub fn forward_backward(
        &self,
        embeddings: &Matrix,
        labels: &[usize],
        eps: f64,
    ) -> Result<(LossOutput, HeadGradients)> {
        validate_batch(embeddings, labels, self.weights.ncols())?;
        match self.variant {
            BaselineVariant::PlainSoftmax => {
                let out = softmax_ce_forward(self, embeddings, labels)?;
                let g = cross_entropy_score_grad(&out.probabilities, labels);
                let d_w = embeddings.t().dot(&g);
                let d_b = g.sum_axis(ndarray::Axis(0));
                let d_embeddings = g.dot(&self.weights.t());
                Ok((
                    out,
                    HeadGradients {
                        tensors: vec![standard(d_w).into_raw_vec_and_offset().0, d_b.to_vec()],
                        d_embeddings: standard(d_embeddings),
                    },
                ))
            }
            BaselineVariant::CosineMargin { scale, .. } => {
                let (a, b, c, _) = self.cosines(embeddings, eps)?;
                let out = cosine_margin_forward(self, embeddings, labels, eps)?;
                let upstream = cross_entropy_score_grad(&out.probabilities, labels) * scale;
                let cot = cosine_cotangent(&a, &b, &c, &upstream, eps);
                let mut d_w = embeddings.t().dot(&cot.d_a);
                for (mut col, (&db, w)) in d_w
                    .columns_mut()
                    .into_iter()
                    .zip(cot.d_b.iter().zip(self.weights.columns()))
                {
                    col.scaled_add(2.0 * db, &w);
                }
                let mut d_embeddings = cot.d_a.dot(&self.weights.t());
                for (mut row, (&dc, z)) in d_embeddings
                    .rows_mut()
                    .into_iter()
                    .zip(cot.d_c.iter().zip(embeddings.rows()))
                {
                    row.scaled_add(2.0 * dc, &z);
                }
                Ok((
                    out,
                    HeadGradients {
                        tensors: vec![standard(d_w).into_raw_vec_and_offset().0, vec![0.0; self.bias.len()]],
                        d_embeddings: standard(d_embeddings),
                    },
                ))
            }
        }
    }
}

/// Cross entropy over `Wᵀz + b`.
pub fn softmax_ce_forward(head: &BaselineHead, embeddings: &Matrix, labels: &[usize]) -> Result<LossOutput> {
    validate_batch(embeddings, labels, head.weights.ncols())?;
    Ok(softmax_cross_entropy(head.logits(embeddings)?, labels))
}

/// The same loss with logits written as `‖W_c‖·‖z‖·cos θ_c`. Requires a zero
/// bias.
pub fn softmax_ce_angular_form(head: &BaselineHead, embeddings: &Matrix, labels: &[usize]) -> Result<AngularOutput> {
    validate_batch(embeddings, labels, head.weights.ncols())?;
    head.check_dim(embeddings)?;
    if head.bias.iter().any(|&b| b != 0.0) {
        return Err(LaceError::invalid("angular form requires a zero bias"));
    }
    let w_norms = head.weights.map_axis(ndarray::Axis(0), |c| c.dot(&c).sqrt());
    let mut degenerate_pairs = 0;
    let mut logits = Matrix::zeros((embeddings.nrows(), head.weights.ncols()));
    for (n, z) in embeddings.rows().into_iter().enumerate() {
        let z_norm = z.dot(&z).sqrt();
        for (j, w) in head.weights.columns().into_iter().enumerate() {
            let denom = w_norms[j] * z_norm;
            let cos = if denom == 0.0 {
                degenerate_pairs += 1;
                0.0
            } else {
                w.dot(&z) / denom
            };
            logits[[n, j]] = w_norms[j] * z_norm * cos;
        }
    }
    Ok(AngularOutput {
        output: softmax_cross_entropy(logits, labels),
        degenerate_pairs,
    })
}

/// Cross entropy over `scale·(cos θ_c − margin·[c = label])`.
pub fn cosine_margin_forward(
    head: &BaselineHead,
    embeddings: &Matrix,
    labels: &[usize],
    eps: f64,
) -> Result<LossOutput> {
    let BaselineVariant::CosineMargin { margin, scale } = head.variant else {
        return Err(LaceError::invalid("head is not a cosine-margin head"));
    };
    validate_batch(embeddings, labels, head.weights.ncols())?;
    let (_, _, _, cos) = head.cosines(embeddings, eps)?;
    let mut logits = cos;
    for (mut row, &l) in logits.rows_mut().into_iter().zip(labels) {
        row[l] -= margin;
        row.mapv_inplace(|v| v * scale);
    }
    Ok(softmax_cross_entropy(logits, labels))
}
