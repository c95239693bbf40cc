use std::path::{Path, PathBuf};

use super::{read_file, write_file, Dataset, ImageShape};
use crate::error::{LaceError, Result};
use crate::numerics::Matrix;

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
/// One label byte followed by the R, G and B planes.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * PLANE;

/// Parses one CIFAR-10 binary batch into labels and HWC pixel bytes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        let whole = bytes.len() / CIFAR_RECORD_BYTES;
        return Err(LaceError::format(
            (whole * CIFAR_RECORD_BYTES) as u64,
            format!("length {} is not a multiple of {CIFAR_RECORD_BYTES}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = vec![0u8; n * 3 * PLANE];
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] >= 10 {
            return Err(LaceError::format(
                (r * CIFAR_RECORD_BYTES) as u64,
                format!("label {} ≥ 10", rec[0]),
            ));
        }
        labels.push(rec[0]);
        let out = &mut pixels[r * 3 * PLANE..(r + 1) * 3 * PLANE];
        for c in 0..3 {
            for p in 0..PLANE {
                out[p * 3 + c] = rec[1 + c * PLANE + p];
            }
        }
    }
    Ok((labels, pixels))
}

/// Concatenates CIFAR-10 batch files; pixels scaled to `[0, 1]`.
pub fn load_cifar10_bin(paths: &[PathBuf]) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for path in paths {
        let (l, p) = parse_cifar10(&read_file(path)?)?;
        labels.extend(l.into_iter().map(usize::from));
        pixels.extend(p);
    }
    let features = Matrix::from_shape_vec(
        (labels.len(), 3 * PLANE),
        pixels.into_iter().map(|p| p as f64 / 255.0).collect(),
    )
    .expect("record length checked");
    Dataset::new(
        features,
        labels,
        10,
        Some(ImageShape {
            height: SIDE,
            width: SIDE,
            channels: 3,
        }),
    )
}

/// Writes records given as labels plus HWC pixel bytes.
pub fn write_cifar10_bin(path: &Path, labels: &[u8], hwc_pixels: &[u8]) -> Result<()> {
    if hwc_pixels.len() != labels.len() * 3 * PLANE {
        return Err(LaceError::invalid("pixel buffer does not hold 32×32×3 per label"));
    }
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD_BYTES);
    for (r, &label) in labels.iter().enumerate() {
        out.push(label);
        let img = &hwc_pixels[r * 3 * PLANE..(r + 1) * 3 * PLANE];
        for c in 0..3 {
            out.extend((0..PLANE).map(|p| img[p * 3 + c]));
        }
    }
    write_file(path, &out)
}
