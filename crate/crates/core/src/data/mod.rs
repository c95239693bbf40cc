//! Dataset ingestion, synthetic generation, splits, normalisation and
//! augmentation.
//!
//! Every dataset is held as a flat `N × D` matrix. Image datasets carry an
//! [`ImageShape`] and store each row height × width × channel.

mod blobs;
mod cifar;
mod csv_io;
mod idx;
mod split;

pub use blobs::{make_blobs, BlobSpec};
pub use cifar::{load_cifar10_bin, parse_cifar10, write_cifar10_bin, CIFAR_RECORD_BYTES};
pub use csv_io::{read_labeled_csv, write_labeled_csv};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels, IdxImages};
pub use split::{augment_image, flip_horizontal, stratified_split, Normalizer, SplitIndices};

use sha2::{Digest, Sha256};

use crate::error::{LaceError, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub image: Option<ImageShape>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize, image: Option<ImageShape>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(LaceError::invalid(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(LaceError::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if let Some(shape) = image {
            if shape.len() != features.ncols() {
                return Err(LaceError::invalid(format!(
                    "image shape {shape:?} does not match {} features",
                    features.ncols()
                )));
            }
        }
        Ok(Dataset {
            features,
            labels,
            classes,
            image,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(ndarray::Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            image: self.image,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Hex SHA-256 over shape, labels and the bit patterns of every feature.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.len(), self.dim(), self.classes] {
            h.update((v as u64).to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        for v in self.features.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| LaceError::io(path, e))
}

fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| LaceError::io(path, e))
}
