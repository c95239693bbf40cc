//! Dense linear algebra for the whitening path.
//!
//! Matrices are row-major `ndarray` arrays in double precision. The only
//! decomposition needed is a symmetric eigendecomposition, done here with
//! cyclic Jacobi rotations: the matrices are small (d ≤ a few hundred) and
//! Jacobi gives eigenvectors orthonormal to machine precision.

use ndarray::{Array1, Array2, Axis};

use crate::error::{LaceError, Result};

pub type Matrix = Array2<f64>;
pub type Vector = Array1<f64>;

/// Floor applied to eigenvalues before any square root of the spectrum.
pub const EIGEN_FLOOR: f64 = 1e-8;

/// Floor added to norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

const MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-9;

/// Eigendecomposition of a symmetric matrix.
///
/// Eigenvalues are in descending order; `eigenvectors` holds them as
/// columns. Each eigenvector's first component with magnitude above 1e-12
/// is positive, so the decomposition is deterministic.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: Vector,
    pub eigenvectors: Matrix,
}

impl SymEig {
    /// `U·diag(f(λ))·Uᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let scaled = &self.eigenvectors * &self.eigenvalues.mapv(f);
        scaled.dot(&self.eigenvectors.t())
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(|l| l)
    }
}

fn ensure_square(a: &Matrix, what: &str) -> Result<usize> {
    let (r, c) = a.dim();
    if r != c {
        return Err(LaceError::invalid(format!("{what} must be square, got {r}x{c}")));
    }
    Ok(r)
}

pub fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn sym_eig(a: &Matrix) -> Result<SymEig> {
    let n = ensure_square(a, "eigendecomposition input")?;
    if !all_finite(a.iter()) {
        return Err(LaceError::NumericalFailure(
            "eigendecomposition input has non-finite entries".into(),
        ));
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[[i, j]] - a[[j, i]]).abs() > SYMMETRY_TOL * scale.max(1.0) {
                return Err(LaceError::invalid(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    a[[i, j]],
                    a[[j, i]]
                )));
            }
        }
    }

    // Work on flat row-major buffers; symmetrise to remove sub-tolerance skew.
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let frob2: f64 = m.iter().map(|x| x * x).sum();
    let mut converged = n <= 1 || frob2 == 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += 2.0 * m[p * n + q] * m[p * n + q];
            }
        }
        if off <= 1e-32 * frob2 || off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_infinite() {
                    0.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                if s == 0.0 {
                    m[p * n + q] = 0.0;
                    m[q * n + p] = 0.0;
                    continue;
                }
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(LaceError::NumericalFailure(format!(
            "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps (n = {n})"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));

    let mut eigenvalues = Vector::zeros(n);
    let mut eigenvectors = Matrix::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        eigenvalues[dst] = m[src * n + src];
        let sign = (0..n)
            .map(|k| v[k * n + src])
            .find(|x| x.abs() > 1e-12)
            .map_or(1.0, |x| x.signum());
        for k in 0..n {
            eigenvectors[[k, dst]] = sign * v[k * n + src];
        }
    }
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

/// Singular values (descending) and right singular vectors (columns) of a
/// tall matrix.
#[derive(Debug, Clone)]
pub struct RightSvd {
    pub singular_values: Vector,
    pub vectors: Matrix,
}

/// One-sided Jacobi SVD: rotates column pairs of `a` until they are mutually
/// orthogonal. Small singular values keep high relative accuracy, unlike an
/// eigendecomposition of `aᵀa`. Sign convention as in [`sym_eig`].
pub fn right_svd(a: &Matrix) -> Result<RightSvd> {
    let (rows, n) = a.dim();
    if rows < n {
        return Err(LaceError::invalid(format!(
            "right_svd needs rows ≥ cols, got {rows}x{n}"
        )));
    }
    if !all_finite(a.iter()) {
        return Err(LaceError::NumericalFailure("SVD input has non-finite entries".into()));
    }
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j).to_vec()).collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let mut converged = n <= 1;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (zeta * zeta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, xq) = (*x, *y);
                    *x = c * xp - s * xq;
                    *y = s * xp + c * xq;
                }
                for k in 0..n {
                    let (vp, vq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vp - s * vq;
                    v[k * n + q] = s * vp + c * vq;
                }
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(LaceError::NumericalFailure(format!(
            "one-sided Jacobi SVD did not converge in {MAX_SWEEPS} sweeps (n = {n})"
        )));
    }
    let sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let mut singular_values = Vector::zeros(n);
    let mut vectors = Matrix::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        singular_values[dst] = sigma[src];
        let sign = (0..n)
            .map(|k| v[k * n + src])
            .find(|x| x.abs() > 1e-12)
            .map_or(1.0, |x| x.signum());
        for k in 0..n {
            vectors[[k, dst]] = sign * v[k * n + src];
        }
    }
    Ok(RightSvd {
        singular_values,
        vectors,
    })
}

/// `M·Mᵀ`, symmetric PSD by construction.
pub fn psd_from_factor(factor: &Matrix) -> Result<Matrix> {
    ensure_square(factor, "PSD factor")?;
    let mut p = factor.dot(&factor.t());
    // Round-off can leave the product a few ulps asymmetric.
    let n = p.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (p[[i, j]] + p[[j, i]]);
            p[[i, j]] = avg;
            p[[j, i]] = avg;
        }
    }
    Ok(p)
}

/// `v / (‖v‖₂ + eps)`.
pub fn normalize(v: &Vector, eps: f64) -> Vector {
    let norm = v.dot(v).sqrt();
    v / (norm + eps)
}

/// Row-wise mean and population covariance (divide by n).
pub fn empirical_stats(samples: &Matrix) -> Result<(Vector, Matrix)> {
    let n = samples.nrows();
    if n == 0 {
        return Err(LaceError::invalid("empirical statistics of an empty sample set"));
    }
    let mean = samples.mean_axis(Axis(0)).expect("non-empty sample set has a mean");
    let centered = samples - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    Ok((mean, cov))
}

/// Inverse of a symmetric positive definite matrix via its eigendecomposition.
pub fn inverse_spd(a: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(a)?;
    if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
        if min <= 0.0 {
            return Err(LaceError::invalid(format!(
                "matrix is not positive definite (min eigenvalue {min:e})"
            )));
        }
    }
    Ok(eig.reconstruct_with(|l| 1.0 / l))
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = ensure_square(a, "Cholesky input")?;
    let mut l = Matrix::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if !(sum > 0.0) {
                    return Err(LaceError::invalid(format!(
                        "matrix is not positive definite (pivot {i} = {sum:e})"
                    )));
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Row-major copy of `m` unless it already is one. Products of transposed
/// views can come back column-major when an operand is a single row or
/// column.
pub fn standard(m: Matrix) -> Matrix {
    if m.is_standard_layout() {
        m
    } else {
        m.as_standard_layout().into_owned()
    }
}

/// Relative Frobenius distance `‖a − b‖ / max(‖b‖, tiny)`.
pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum();
    let base: f64 = b.iter().map(|y| y * y).sum();
    diff.sqrt() / base.sqrt().max(f64::MIN_POSITIVE)
}
