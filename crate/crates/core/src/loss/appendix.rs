//! Closed-form derivative expressions from the original derivation, kept as
//! a comparison path next to the exact backward pass.
//!
//! - [`signature_grad_label_terms`]: the signature derivative restricted to
//!   each sample's own class column (non-label logits held fixed).
//! - [`mean_grad_weighted`] / [`inv_cov_grad_weighted`]: the softmax-weighted
//!   forms; these coincide with the exact gradient.
//! - [`mean_grad_unweighted`] / [`inv_cov_grad_unweighted`]: the final
//!   simplified lines, which sum over `j ≠ c` without the softmax weights.
//!   They do not equal the gradient of the loss and are never used for
//!   training.
//!
//! All forms use unfloored normalisation (`eps = 0`) and expect samples away
//! from the background mean.

use super::{softmax_cross_entropy, validate_batch, LaceParams};
use crate::error::{LaceError, Result};
use crate::numerics::{Matrix, Vector};

struct Whitened {
    rotation: Matrix,
    /// Rows: whitened samples `R(x−μ)`.
    samples: Matrix,
    /// Columns: whitened signatures `R s`.
    signatures: Matrix,
    probabilities: Matrix,
}

fn prepare(params: &LaceParams, embeddings: &Matrix, labels: &[usize]) -> Result<Whitened> {
    validate_batch(embeddings, labels, params.classes())?;
    let op = params.whitener()?;
    let samples = (embeddings - &op.mean).dot(&op.rotation.t());
    let signatures = op.rotation.dot(&params.signatures);
    for (n, row) in samples.rows().into_iter().enumerate() {
        if row.dot(&row) == 0.0 {
            return Err(LaceError::invalid(format!("sample {n} sits on the background mean")));
        }
    }
    let scores = params.scores(embeddings, 0.0)?;
    let probabilities = softmax_cross_entropy(scores, labels).probabilities;
    Ok(Whitened {
        rotation: op.rotation,
        samples,
        signatures,
        probabilities,
    })
}

/// Jacobian of `v ↦ v/‖v‖` at `v`: `(I − v̂v̂ᵀ)/‖v‖`.
fn normalization_jacobian(v: ndarray::ArrayView1<f64>) -> Matrix {
    let norm = v.dot(&v).sqrt();
    let d = v.len();
    let mut j = Matrix::eye(d) / norm;
    for a in 0..d {
        for b in 0..d {
            j[[a, b]] -= v[a] * v[b] / (norm * norm * norm);
        }
    }
    j
}

fn unit(v: ndarray::ArrayView1<f64>) -> Vector {
    &v / v.dot(&v).sqrt()
}

/// `−(1/B) Σ_n (1 − p_{n,c}) · z'_cᵀ x̂_n` accumulated into column `c = label(n)`.
pub fn signature_grad_label_terms(params: &LaceParams, embeddings: &Matrix, labels: &[usize]) -> Result<Matrix> {
    let w = prepare(params, embeddings, labels)?;
    let b = labels.len() as f64;
    let mut grad = Matrix::zeros(params.signatures.dim());
    for (n, &c) in labels.iter().enumerate() {
        let x_hat = unit(w.samples.row(n));
        // z'_c = J(R s_c)·R
        let z_prime = normalization_jacobian(w.signatures.column(c)).dot(&w.rotation);
        let contrib = z_prime.t().dot(&x_hat) * (-(1.0 - w.probabilities[[n, c]]) / b);
        let mut col = grad.column_mut(c);
        col += &contrib;
    }
    Ok(grad)
}

/// `m'_b = ∂(m/‖m‖)/∂μ = −J(m)·R` for `m = R(x−μ)`.
fn mean_jacobian(w: &Whitened, n: usize) -> Matrix {
    -normalization_jacobian(w.samples.row(n)).dot(&w.rotation)
}

fn whitened_unit_signatures(w: &Whitened) -> Vec<Vector> {
    w.signatures.columns().into_iter().map(unit).collect()
}

/// `−(1/B) Σ_n m'ᵀ(ŝ_c − Σ_j p_j ŝ_j)`.
pub fn mean_grad_weighted(params: &LaceParams, embeddings: &Matrix, labels: &[usize]) -> Result<Vector> {
    let w = prepare(params, embeddings, labels)?;
    let sig = whitened_unit_signatures(&w);
    let b = labels.len() as f64;
    let mut grad = Vector::zeros(params.dim());
    for (n, &c) in labels.iter().enumerate() {
        let mut dir = sig[c].clone();
        for (j, s) in sig.iter().enumerate() {
            dir.scaled_add(-w.probabilities[[n, j]], s);
        }
        grad.scaled_add(-1.0 / b, &mean_jacobian(&w, n).t().dot(&dir));
    }
    Ok(grad)
}

/// `(1/B) Σ_n Σ_{j≠c} m'ᵀ ŝ_j`, the simplified line with the softmax
/// weights dropped.
pub fn mean_grad_unweighted(params: &LaceParams, embeddings: &Matrix, labels: &[usize]) -> Result<Vector> {
    let w = prepare(params, embeddings, labels)?;
    let sig = whitened_unit_signatures(&w);
    let b = labels.len() as f64;
    let mut grad = Vector::zeros(params.dim());
    for (n, &c) in labels.iter().enumerate() {
        let jac_t = mean_jacobian(&w, n).t().to_owned();
        for (j, s) in sig.iter().enumerate() {
            if j != c {
                grad.scaled_add(1.0 / b, &jac_t.dot(s));
            }
        }
    }
    Ok(grad)
}

/// `V'_j`: derivative of `sᵀPu / √(sᵀPs · uᵀPu)` with respect to `P`, laid
/// out as `u·sᵀ`.
fn score_inv_cov_derivative(s: ndarray::ArrayView1<f64>, u: ndarray::ArrayView1<f64>, metric: &Matrix) -> Matrix {
    let ps = metric.dot(&s);
    let pu = metric.dot(&u);
    let a = s.dot(&pu);
    let bb = s.dot(&ps);
    let cc = u.dot(&pu);
    let root = (bb * cc).sqrt();
    let d = s.len();
    let mut v = Matrix::zeros((d, d));
    for i in 0..d {
        for k in 0..d {
            let norm_prime = (s[i] * s[k] * cc + bb * u[i] * u[k]) / (2.0 * root);
            v[[i, k]] = (root * u[i] * s[k] - a * norm_prime) / (root * root);
        }
    }
    v
}

fn inv_cov_grad(params: &LaceParams, embeddings: &Matrix, labels: &[usize], weighted: bool) -> Result<Matrix> {
    let w = prepare(params, embeddings, labels)?;
    let metric = w.rotation.t().dot(&w.rotation);
    let centered = embeddings - &params.effective_mean();
    let b = labels.len() as f64;
    let d = params.dim();
    let mut grad = Matrix::zeros((d, d));
    for (n, &c) in labels.iter().enumerate() {
        let u = centered.row(n);
        for j in 0..params.classes() {
            let v = score_inv_cov_derivative(params.signatures.column(j), u, &metric);
            let coeff = match (weighted, j == c) {
                (true, true) => -(1.0 - w.probabilities[[n, j]]) / b,
                (true, false) => w.probabilities[[n, j]] / b,
                (false, true) => 0.0,
                (false, false) => 1.0 / b,
            };
            grad.scaled_add(coeff, &v);
        }
    }
    Ok(grad)
}

/// `−(1/B) Σ_n (V'_c − Σ_j p_j V'_j)`.
pub fn inv_cov_grad_weighted(params: &LaceParams, embeddings: &Matrix, labels: &[usize]) -> Result<Matrix> {
    inv_cov_grad(params, embeddings, labels, true)
}

/// `(1/B) Σ_n Σ_{j≠c} V'_j`.
pub fn inv_cov_grad_unweighted(params: &LaceParams, embeddings: &Matrix, labels: &[usize]) -> Result<Matrix> {
    inv_cov_grad(params, embeddings, labels, false)
}
