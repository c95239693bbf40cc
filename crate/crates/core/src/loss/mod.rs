//! Classification heads and their losses.
//!
//! [`lace`] holds the whitened-cosine objective and its exact gradients,
//! [`baseline`] the plain softmax and cosine-margin heads it is compared
//! against, and [`appendix`] the closed-form derivative expressions kept as
//! a comparison path for the exact gradients.

pub mod appendix;
pub mod baseline;
pub mod lace;

pub use baseline::{BaselineHead, BaselineVariant};
pub use lace::{lace_backward, lace_forward, lace_forward_backward, Ablation, GradientSet, LaceParams};

use crate::error::{LaceError, Result};
use crate::numerics::{all_finite, Matrix, Vector};

/// Loss, per-row softmax probabilities and the scores they came from.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub probabilities: Matrix,
    pub scores: Matrix,
}

/// Parameter count breakdown of a LACE head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub signatures: usize,
    pub mean: usize,
    pub factor: usize,
    /// Mean plus factor: what LACE adds over a softmax layer's `d·C`
    /// weights (the softmax bias is not counted).
    pub extra_vs_softmax: usize,
}

pub fn lace_param_count(d: usize, classes: usize) -> Result<ParamCount> {
    if d == 0 || classes == 0 {
        return Err(LaceError::invalid("dimension and class count must be at least 1"));
    }
    Ok(ParamCount {
        signatures: d * classes,
        mean: d,
        factor: d * d,
        extra_vs_softmax: d * (d + 1),
    })
}

pub(crate) fn validate_batch(embeddings: &Matrix, labels: &[usize], classes: usize) -> Result<()> {
    if embeddings.nrows() == 0 {
        return Err(LaceError::invalid("empty batch"));
    }
    if embeddings.nrows() != labels.len() {
        return Err(LaceError::invalid(format!(
            "{} embeddings but {} labels",
            embeddings.nrows(),
            labels.len()
        )));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(LaceError::invalid(format!(
            "label {l} at position {i} is out of range for {classes} classes"
        )));
    }
    if !all_finite(embeddings.iter()) {
        return Err(LaceError::invalid("embeddings contain non-finite values"));
    }
    Ok(())
}

/// Mean cross entropy of row-wise softmax over `scores`, stabilised by
/// subtracting each row's maximum.
pub fn softmax_cross_entropy(scores: Matrix, labels: &[usize]) -> LossOutput {
    let mut probabilities = scores.clone();
    let mut total = 0.0;
    for (n, (mut row, &label)) in probabilities.rows_mut().into_iter().zip(labels).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        total += sum.ln() - (scores[[n, label]] - max);
        row.mapv_inplace(|v| v / sum);
    }
    LossOutput {
        loss: total / labels.len() as f64,
        probabilities,
        scores,
    }
}

/// `(p − onehot(label)) / B`, the gradient of mean cross entropy with
/// respect to the scores.
pub fn cross_entropy_score_grad(probabilities: &Matrix, labels: &[usize]) -> Matrix {
    let b = labels.len() as f64;
    let mut g = probabilities.clone();
    for (mut row, &label) in g.rows_mut().into_iter().zip(labels) {
        row[label] -= 1.0;
        row.mapv_inplace(|v| v / b);
    }
    g
}

/// Index of the largest entry; the lowest index wins an exact tie.
pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Coefficients of the cotangent of `cos_nj = a_nj / ((√c_n + ε)(√b_j + ε))`
/// with respect to `a` (elementwise), `b` (summed over rows) and `c`
/// (summed over columns).
pub(crate) struct CosineCotangent {
    pub d_a: Matrix,
    pub d_b: Vector,
    pub d_c: Vector,
}

pub(crate) fn cosine_cotangent(a: &Matrix, b: &Vector, c: &Vector, upstream: &Matrix, eps: f64) -> CosineCotangent {
    let (rows, cols) = a.dim();
    let q = b.mapv(|v| v.sqrt() + eps);
    let r = c.mapv(|v| v.sqrt() + eps);
    let mut d_a = Matrix::zeros((rows, cols));
    let mut d_b = Vector::zeros(cols);
    let mut d_c = Vector::zeros(rows);
    for n in 0..rows {
        let sqrt_c = c[n].sqrt();
        for j in 0..cols {
            let g = upstream[[n, j]];
            if g == 0.0 {
                continue;
            }
            let sqrt_b = b[j].sqrt();
            let inv = 1.0 / (q[j] * r[n]);
            d_a[[n, j]] = g * inv;
            let cos = a[[n, j]] * inv;
            if sqrt_b > 0.0 {
                d_b[j] -= g * cos / (q[j] * 2.0 * sqrt_b);
            }
            if sqrt_c > 0.0 {
                d_c[n] -= g * cos / (r[n] * 2.0 * sqrt_c);
            }
        }
    }
    CosineCotangent { d_a, d_b, d_c }
}

/// A trainable classification head.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Lace(LaceParams),
    Baseline(BaselineHead),
}

/// Per-tensor gradients of a head (same order as [`Head::tensors`]) plus the
/// cotangent flowing back into the embeddings.
#[derive(Debug, Clone)]
pub struct HeadGradients {
    pub tensors: Vec<Vec<f64>>,
    pub d_embeddings: Matrix,
}

impl Head {
    pub fn embed_dim(&self) -> usize {
        match self {
            Head::Lace(p) => p.signatures.nrows(),
            Head::Baseline(h) => h.weights.nrows(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Head::Lace(p) => p.signatures.ncols(),
            Head::Baseline(h) => h.weights.ncols(),
        }
    }

    /// Short descriptor used in checkpoints and reports.
    pub fn descriptor(&self) -> String {
        match self {
            Head::Lace(p) => format!(
                "lace(d={},c={},mean={},cov={})",
                p.signatures.nrows(),
                p.signatures.ncols(),
                p.ablation.use_mean as u8,
                p.ablation.use_cov as u8
            ),
            Head::Baseline(h) => match h.variant {
                BaselineVariant::PlainSoftmax => {
                    format!("softmax(d={},c={})", h.weights.nrows(), h.weights.ncols())
                }
                BaselineVariant::CosineMargin { margin, scale } => format!(
                    "cosface(d={},c={},m={margin},s={scale})",
                    h.weights.nrows(),
                    h.weights.ncols()
                ),
            },
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Head::Lace(p) => vec![
                p.signatures.as_slice().expect("standard layout"),
                p.mean.as_slice().expect("standard layout"),
                p.factor.as_slice().expect("standard layout"),
            ],
            Head::Baseline(h) => vec![
                h.weights.as_slice().expect("standard layout"),
                h.bias.as_slice().expect("standard layout"),
            ],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Head::Lace(p) => vec![
                p.signatures.as_slice_mut().expect("standard layout"),
                p.mean.as_slice_mut().expect("standard layout"),
                p.factor.as_slice_mut().expect("standard layout"),
            ],
            Head::Baseline(h) => vec![
                h.weights.as_slice_mut().expect("standard layout"),
                h.bias.as_slice_mut().expect("standard layout"),
            ],
        }
    }

    /// Which tensors the optimiser may update; ablated statistics and the
    /// unused cosine-margin bias stay frozen.
    pub fn trainable(&self) -> Vec<bool> {
        match self {
            Head::Lace(p) => vec![true, p.ablation.use_mean, p.ablation.use_cov],
            Head::Baseline(h) => vec![true, matches!(h.variant, BaselineVariant::PlainSoftmax)],
        }
    }

    /// Class scores used for prediction: ACE scores for LACE, logits for
    /// plain softmax and margin-free cosines for the cosine-margin head.
    pub fn scores(&self, embeddings: &Matrix, eps: f64) -> Result<Matrix> {
        match self {
            Head::Lace(p) => p.scores(embeddings, eps),
            Head::Baseline(h) => h.scores(embeddings, eps),
        }
    }

    pub fn forward(&self, embeddings: &Matrix, labels: &[usize], eps: f64) -> Result<LossOutput> {
        match self {
            Head::Lace(p) => lace_forward(p, embeddings, labels, eps),
            Head::Baseline(h) => h.forward(embeddings, labels, eps),
        }
    }

    pub fn forward_backward(
        &self,
        embeddings: &Matrix,
        labels: &[usize],
        eps: f64,
    ) -> Result<(LossOutput, HeadGradients)> {
        match self {
            Head::Lace(p) => {
                let (out, g) = lace_forward_backward(p, embeddings, labels, eps)?;
                let grads = HeadGradients {
                    tensors: vec![
                        g.d_signatures.into_raw_vec_and_offset().0,
                        g.d_mean.into_raw_vec_and_offset().0,
                        g.d_factor.into_raw_vec_and_offset().0,
                    ],
                    d_embeddings: g.d_embeddings,
                };
                Ok((out, grads))
            }
            Head::Baseline(h) => h.forward_backward(embeddings, labels, eps),
        }
    }
}
