use std::path::Path;

use super::{read_file, write_file, Dataset, ImageShape};
use crate::error::{LaceError, Result};
use crate::numerics::Matrix;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| LaceError::format(offset as u64, format!("truncated header: missing {what}")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0, "magic number")?;
    if magic != expected {
        return Err(LaceError::format(
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}"),
        ));
    }
    Ok(())
}

fn body(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    let end = start + len;
    if bytes.len() < end {
        return Err(LaceError::format(
            bytes.len() as u64,
            format!(
                "truncated payload: expected {len} bytes after the header, found {}",
                bytes.len() - start
            ),
        ));
    }
    if bytes.len() > end {
        return Err(LaceError::format(
            end as u64,
            format!("{} trailing bytes", bytes.len() - end),
        ));
    }
    Ok(&bytes[start..end])
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let pixels = body(bytes, 16, count * rows * cols)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = be_u32(bytes, 4, "label count")? as usize;
    Ok(body(bytes, 8, count)?.to_vec())
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]`; the class
/// count is one past the largest label.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let imgs = parse_idx_images(&read_file(images)?)?;
    let labs = parse_idx_labels(&read_file(labels)?)?;
    if imgs.count != labs.len() {
        return Err(LaceError::invalid(format!(
            "{} has {} images but {} has {} labels",
            images.display(),
            imgs.count,
            labels.display(),
            labs.len()
        )));
    }
    let dim = imgs.rows * imgs.cols;
    let features = Matrix::from_shape_vec(
        (imgs.count, dim),
        imgs.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )
    .expect("payload length checked");
    let labels: Vec<usize> = labs.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(
        features,
        labels,
        classes,
        Some(ImageShape {
            height: imgs.rows,
            width: imgs.cols,
            channels: 1,
        }),
    )
}

pub fn write_idx_images(path: &Path, images: &IdxImages) -> Result<()> {
    if images.pixels.len() != images.count * images.rows * images.cols {
        return Err(LaceError::invalid("pixel buffer does not match the image dimensions"));
    }
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    write_file(path, &out)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    write_file(path, &out)
}
