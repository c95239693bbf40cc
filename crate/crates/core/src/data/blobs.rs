use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{LaceError, Result};
use crate::numerics::{cholesky, Matrix, Vector};

/// Gaussian classes sharing one background covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    /// One row per class.
    pub means: Matrix,
    pub covariance: Matrix,
    pub per_class: usize,
    pub seed: u64,
}

/// Samples `per_class` points from `N(mean_c, Σ)` for every class, class by
/// class, as `mean_c + L·z` with `L` the Cholesky factor of `Σ`.
pub fn make_blobs(spec: &BlobSpec) -> Result<Dataset> {
    let (classes, d) = spec.means.dim();
    if classes == 0 || d == 0 || spec.per_class == 0 {
        return Err(LaceError::invalid(
            "blobs need at least one class, dimension and sample",
        ));
    }
    if spec.covariance.dim() != (d, d) {
        return Err(LaceError::invalid(format!(
            "covariance is {:?}, means have dimension {d}",
            spec.covariance.dim()
        )));
    }
    for i in 0..classes {
        for j in 0..i {
            if spec.means.row(i) == spec.means.row(j) {
                return Err(LaceError::invalid(format!("classes {j} and {i} share a mean")));
            }
        }
    }
    let l = cholesky(&spec.covariance)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = classes * spec.per_class;
    let mut features = Matrix::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        for k in 0..spec.per_class {
            let z = Vector::from_shape_fn(d, |_| StandardNormal.sample(&mut rng));
            features
                .row_mut(c * spec.per_class + k)
                .assign(&(&spec.means.row(c) + &l.dot(&z)));
            labels.push(c);
        }
    }
    Dataset::new(features, labels, classes, None)
}
