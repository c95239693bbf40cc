//! Versioned binary model snapshots.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "LACE" | u32 version | 32-byte SHA-256 of descriptor | u32 descriptor length
//!        | descriptor (UTF-8) | u64 parameter count | f64 parameters
//! ```
//!
//! The descriptor reads `backbone=<spec>;head=<spec>` and parameters follow
//! [`Model::tensors`] order.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::{BackboneSpec, ModelState};
use crate::error::{LaceError, Result};
use crate::loss::{Ablation, BaselineHead, BaselineVariant, Head, LaceParams};
use crate::numerics::{Matrix, Vector};
use crate::trainer::Model;

pub const MAGIC: &[u8; 4] = b"LACE";
pub const FORMAT_VERSION: u32 = 1;

pub fn model_descriptor(model: &Model) -> String {
    format!(
        "backbone={};head={}",
        model.backbone.spec.descriptor(),
        model.head.descriptor()
    )
}

fn parse_fields(body: &str) -> Result<Vec<(&str, &str)>> {
    body.split(',')
        .map(|kv| {
            kv.split_once('=')
                .ok_or_else(|| LaceError::invalid(format!("malformed head field {kv:?}")))
        })
        .collect()
}

fn field<T: std::str::FromStr>(fields: &[(&str, &str)], key: &str) -> Result<T> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| LaceError::invalid(format!("head descriptor lacks a valid {key}")))
}

/// Zero-initialised head of the described shape.
pub fn head_from_descriptor(text: &str) -> Result<Head> {
    let (kind, rest) = text
        .split_once('(')
        .ok_or_else(|| LaceError::invalid(format!("unrecognised head descriptor {text:?}")))?;
    let body = rest
        .strip_suffix(')')
        .ok_or_else(|| LaceError::invalid(format!("unrecognised head descriptor {text:?}")))?;
    let f = parse_fields(body)?;
    let (d, c): (usize, usize) = (field(&f, "d")?, field(&f, "c")?);
    if d == 0 || c == 0 {
        return Err(LaceError::invalid("head dimensions must be positive"));
    }
    match kind {
        "lace" => {
            let ablation = Ablation {
                use_mean: field::<u8>(&f, "mean")? != 0,
                use_cov: field::<u8>(&f, "cov")? != 0,
            };
            Ok(Head::Lace(LaceParams::with_identity_stats(
                Matrix::zeros((d, c)),
                ablation,
            )))
        }
        "softmax" => Ok(Head::Baseline(BaselineHead::new(
            Matrix::zeros((d, c)),
            Vector::zeros(c),
            BaselineVariant::PlainSoftmax,
        )?)),
        "cosface" => Ok(Head::Baseline(BaselineHead::new(
            Matrix::zeros((d, c)),
            Vector::zeros(c),
            BaselineVariant::CosineMargin {
                margin: field(&f, "m")?,
                scale: field(&f, "s")?,
            },
        )?)),
        other => Err(LaceError::invalid(format!("unknown head kind {other:?}"))),
    }
}

/// Zero-initialised model of the described shape.
pub fn model_from_descriptor(text: &str) -> Result<Model> {
    let (bb, head) = text
        .strip_prefix("backbone=")
        .and_then(|t| t.split_once(";head="))
        .ok_or_else(|| LaceError::invalid(format!("unrecognised model descriptor {text:?}")))?;
    let backbone = ModelState::zeros(BackboneSpec::from_descriptor(bb)?)?;
    let head = head_from_descriptor(head)?;
    if head.embed_dim() != backbone.spec.embed_dim() {
        return Err(LaceError::invalid(format!(
            "head expects d = {}, backbone produces {}",
            head.embed_dim(),
            backbone.spec.embed_dim()
        )));
    }
    Ok(Model { backbone, head })
}

pub fn encode(model: &Model) -> Vec<u8> {
    let desc = model_descriptor(model);
    let params: Vec<f64> = model.tensors().into_iter().flatten().copied().collect();
    let mut out = Vec::with_capacity(52 + desc.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(desc.as_bytes()));
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let slice = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| LaceError::format(self.pos as u64, format!("truncated checkpoint: missing {what}")))?;
        self.pos += n;
        Ok(slice)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(LaceError::format(0, "not a LACE checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(LaceError::format(
            4,
            format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let digest = cur.take(32, "descriptor digest")?;
    let len = u32::from_le_bytes(cur.take(4, "descriptor length")?.try_into().expect("4 bytes")) as usize;
    let desc_at = cur.pos;
    let desc = cur.take(len, "descriptor")?;
    if Sha256::digest(desc).as_slice() != digest {
        return Err(LaceError::format(8, "descriptor digest mismatch"));
    }
    let desc = std::str::from_utf8(desc).map_err(|_| LaceError::format(desc_at as u64, "descriptor is not UTF-8"))?;
    let mut model = model_from_descriptor(desc)?;
    let count_at = cur.pos;
    let count = u64::from_le_bytes(cur.take(8, "parameter count")?.try_into().expect("8 bytes")) as usize;
    let expected: usize = model.tensors().iter().map(|t| t.len()).sum();
    if count != expected {
        return Err(LaceError::format(
            count_at as u64,
            format!("checkpoint holds {count} parameters, {desc} needs {expected}"),
        ));
    }
    for tensor in model.tensors_mut() {
        for v in tensor.iter_mut() {
            *v = f64::from_le_bytes(cur.take(8, "parameters")?.try_into().expect("8 bytes"));
        }
    }
    if cur.pos != bytes.len() {
        return Err(LaceError::format(cur.pos as u64, "trailing bytes after parameters"));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| LaceError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode(&std::fs::read(path).map_err(|e| LaceError::io(path, e))?)
}
