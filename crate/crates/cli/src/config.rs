//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are skipped, keys starting with `manifest.`
//! are ignored so that a run manifest can be fed back as a config. Every key
//! is written back by [`RunConfig::to_text`], floats in shortest round-trip
//! form.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lace_core::backbone::{BackboneSpec, CnnSpec, MlpSpec};
use lace_core::data::Dataset;
use lace_core::trainer::{LossKind, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Blobs,
    Idx,
    Cifar10,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Blobs => "blobs",
            DatasetKind::Idx => "idx",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "blobs" => Ok(DatasetKind::Blobs),
            "idx" => Ok(DatasetKind::Idx),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(format!("unknown dataset {other:?} (blobs, idx, cifar10)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Mlp,
    Cnn,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Mlp => "mlp",
            Arch::Cnn => "cnn",
        })
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "cnn" => Ok(Arch::Cnn),
            other => Err(format!("unknown arch {other:?} (mlp, cnn)")),
        }
    }
}

/// Synthetic Gaussian classes in a shared anisotropic background.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobConfig {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    /// Distance of each class mean from the background mean, in background
    /// standard deviations along that class's direction.
    pub separation: f64,
    /// Ratio of the largest to the smallest background standard deviation.
    pub anisotropy: f64,
    /// Every coordinate of the background mean.
    pub offset: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            classes: 3,
            dim: 8,
            per_class: 500,
            test_per_class: 500,
            separation: 3.0,
            anisotropy: 100.0,
            offset: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    /// Stratified subsample of the training set.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Seed for blob generation and subsampling.
    pub data_seed: u64,
    /// Standardise features with train-split statistics.
    pub normalize: bool,
    pub arch: Arch,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub channels: Vec<usize>,
    pub blobs: BlobConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            dataset: DatasetKind::Blobs,
            data_dir: None,
            train_limit: None,
            test_limit: None,
            data_seed: 0,
            normalize: true,
            arch: Arch::Mlp,
            hidden: vec![256],
            embed_dim: 64,
            channels: vec![16, 32, 64],
            blobs: BlobConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> CliResult<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|t| parse(key, t.trim())).collect()
}

fn parse_limit(key: &str, value: &str) -> CliResult<Option<usize>> {
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
}

impl RunConfig {
    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let t = &mut self.train;
        let b = &mut self.blobs;
        match key {
            "loss" => {
                t.loss = value
                    .parse()
                    .map_err(|e: lace_core::LaceError| CliError::Config(e.to_string()))?
            }
            "seed" => t.seed = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "adam_beta1" => t.adam_beta1 = parse(key, value)?,
            "adam_beta2" => t.adam_beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "val_fraction" => t.val_fraction = parse(key, value)?,
            "use_mean" => t.ablation.use_mean = parse_bool(key, value)?,
            "use_cov" => t.ablation.use_cov = parse_bool(key, value)?,
            "norm_eps" => t.norm_eps = parse(key, value)?,
            "augment" => t.augment = parse_bool(key, value)?,
            "dataset" => self.dataset = value.parse().map_err(CliError::Config)?,
            "data_dir" => self.data_dir = (!value.is_empty() && value != "none").then(|| PathBuf::from(value)),
            "train_limit" => self.train_limit = parse_limit(key, value)?,
            "test_limit" => self.test_limit = parse_limit(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "normalize" => self.normalize = parse_bool(key, value)?,
            "arch" => self.arch = value.parse().map_err(CliError::Config)?,
            "hidden" => self.hidden = parse_list(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "channels" => self.channels = parse_list(key, value)?,
            "blob_classes" => b.classes = parse(key, value)?,
            "blob_dim" => b.dim = parse(key, value)?,
            "blob_per_class" => b.per_class = parse(key, value)?,
            "blob_test_per_class" => b.test_per_class = parse(key, value)?,
            "blob_separation" => b.separation = parse(key, value)?,
            "blob_anisotropy" => b.anisotropy = parse(key, value)?,
            "blob_offset" => b.offset = parse(key, value)?,
            other => return Err(CliError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key.starts_with("manifest.") {
                continue;
            }
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            self.set(key, value).map_err(|e| {
                CliError::Config(format!(
                    "line {}: {}",
                    n + 1,
                    e.to_string().trim_start_matches("config error: ")
                ))
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let b = &self.blobs;
        let data_dir = self
            .data_dir
            .as_ref()
            .map_or_else(|| "none".to_string(), |p| p.display().to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("loss", t.loss.to_string()),
            ("seed", t.seed.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("adam_beta1", t.adam_beta1.to_string()),
            ("adam_beta2", t.adam_beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("patience", t.patience.to_string()),
            ("val_fraction", t.val_fraction.to_string()),
            ("use_mean", t.ablation.use_mean.to_string()),
            ("use_cov", t.ablation.use_cov.to_string()),
            ("norm_eps", t.norm_eps.to_string()),
            ("augment", t.augment.to_string()),
            ("dataset", self.dataset.to_string()),
            ("data_dir", data_dir),
            ("train_limit", opt(&self.train_limit)),
            ("test_limit", opt(&self.test_limit)),
            ("data_seed", self.data_seed.to_string()),
            ("normalize", self.normalize.to_string()),
            ("arch", self.arch.to_string()),
            ("hidden", list(&self.hidden)),
            ("embed_dim", self.embed_dim.to_string()),
            ("channels", list(&self.channels)),
            ("blob_classes", b.classes.to_string()),
            ("blob_dim", b.dim.to_string()),
            ("blob_per_class", b.per_class.to_string()),
            ("blob_test_per_class", b.test_per_class.to_string()),
            ("blob_separation", b.separation.to_string()),
            ("blob_anisotropy", b.anisotropy.to_string()),
            ("blob_offset", b.offset.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.dataset != DatasetKind::Blobs && self.data_dir.is_none() {
            return Err(CliError::Config(format!("dataset {} needs data_dir", self.dataset)));
        }
        let b = &self.blobs;
        if self.dataset == DatasetKind::Blobs
            && (b.classes < 2
                || b.dim < 2
                || b.per_class < 2
                || b.test_per_class == 0
                || !(b.anisotropy >= 1.0)
                || !(b.separation > 0.0))
        {
            return Err(CliError::Config(
                "blobs need ≥ 2 classes, dim ≥ 2, per_class ≥ 2, test_per_class ≥ 1, anisotropy ≥ 1 and separation > 0"
                    .into(),
            ));
        }
        if matches!(self.train_limit, Some(0)) || matches!(self.test_limit, Some(0)) {
            return Err(CliError::Config("limits must be positive".into()));
        }
        Ok(())
    }

    /// Backbone for data of this shape.
    pub fn backbone(&self, data: &Dataset) -> CliResult<BackboneSpec> {
        let spec = match self.arch {
            Arch::Mlp => BackboneSpec::Mlp(MlpSpec {
                input_dim: data.dim(),
                hidden: self.hidden.clone(),
                embed_dim: self.embed_dim,
            }),
            Arch::Cnn => {
                let shape = data.image.ok_or_else(|| {
                    CliError::Config(format!("arch cnn needs image data, dataset {} is flat", self.dataset))
                })?;
                BackboneSpec::Cnn(CnnSpec {
                    height: shape.height,
                    width: shape.width,
                    in_channels: shape.channels,
                    channels: self.channels.clone(),
                })
            }
        };
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }
}

/// Parses `key=value` override strings.
pub fn apply_overrides(cfg: &mut RunConfig, overrides: &[String]) -> CliResult<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {o:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}

pub fn loss_kind(s: &str) -> CliResult<LossKind> {
    s.parse()
        .map_err(|e: lace_core::LaceError| CliError::Config(e.to_string()))
}
