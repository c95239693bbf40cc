//! Learnable adaptive cosine estimator (LACE) classification head.
//!
//! Embeddings are whitened by learned background statistics (a mean and a
//! PSD inverse covariance parametrised as `M·Mᵀ`) and scored by cosine
//! similarity against learned class signatures; a softmax cross entropy over
//! those scores is the training objective.
//!
//! Crate layout:
//! - [`numerics`]: dense helpers, symmetric eigendecomposition, PSD factors.
//! - [`ace`]: whitening transform and the ACE statistic.
//! - [`loss`]: LACE forward/backward, baseline heads, parameter counts.
//! - [`backbone`]: MLP and small CNN feature extractors with manual backward.
//! - [`optim`], [`trainer`]: Adam and the mini-batch training loop.
//! - [`metrics`]: Silhouette, Davies-Bouldin and Calinski-Harabasz scores.
//! - [`data`]: IDX / CIFAR-10 readers, synthetic blobs, splits, augmentation.
//! - [`checkpoint`]: versioned binary model snapshots.
//! - [`gradcheck`]: finite-difference verification harness.

pub mod ace;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod trainer;

pub use error::{LaceError, Result};
pub use numerics::{Matrix, Vector};
