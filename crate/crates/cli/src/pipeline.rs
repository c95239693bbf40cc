//! Dataset preparation, training runs and embedding views shared by the
//! subcommands and the acceptance harness.

use std::path::PathBuf;

use lace_core::data::{load_cifar10_bin, load_idx, make_blobs, stratified_split, BlobSpec, Dataset, Normalizer};
use lace_core::loss::{Head, LaceParams};
use lace_core::numerics::{sym_eig, Matrix, Vector};
use lace_core::trainer::{evaluate, fit, Model, TrainReport};
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{BlobConfig, DatasetKind, RunConfig};
use crate::error::{CliError, CliResult};

/// Train/validation/test splits after subsampling and normalisation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Digests of the loaded training and test sets before splitting.
    pub train_digest: String,
    pub test_digest: String,
}

impl Prepared {
    pub fn split(&self, name: &str) -> CliResult<&Dataset> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(CliError::Config(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

/// Train and test generators sharing one background: covariance
/// `Q·diag(σ²)·Qᵀ` with `σ` geometric between `√a` and `1/√a`, and class
/// `c` centred `separation·σ_k` along the `k`-th lowest-variance axis away
/// from the background mean.
pub fn blob_specs(cfg: &BlobConfig, seed: u64) -> CliResult<(BlobSpec, BlobSpec)> {
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Matrix::from_shape_fn((d, d), |_| StandardNormal.sample(&mut rng));
    let q = sym_eig(&(&a + &a.t())).map_err(CliError::data)?.eigenvectors;
    let sigma: Vector = (0..d)
        .map(|i| cfg.anisotropy.powf(0.5 - i as f64 / (d - 1) as f64))
        .collect();
    let covariance = q.dot(&Matrix::from_diag(&sigma.mapv(|s| s * s))).dot(&q.t());
    let covariance = (&covariance + &covariance.t()) * 0.5;
    let mut means = Matrix::from_elem((cfg.classes, d), cfg.offset);
    for c in 0..cfg.classes {
        let k = d - 1 - c % d;
        let sign = if (c / d).is_multiple_of(2) { 1.0 } else { -1.0 };
        let shift = q.column(k).mapv(|v| sign * cfg.separation * sigma[k] * v);
        let mut row = means.row_mut(c);
        row += &shift;
    }
    let train = BlobSpec {
        means: means.clone(),
        covariance: covariance.clone(),
        per_class: cfg.per_class,
        seed: seed.wrapping_add(1),
    };
    let test = BlobSpec {
        means,
        covariance,
        per_class: cfg.test_per_class,
        seed: seed.wrapping_add(2),
    };
    Ok((train, test))
}

fn require(path: PathBuf) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Data(format!("missing dataset file {}", path.display())))
    }
}

/// Loads the raw training and test sets named by the config.
pub fn load(cfg: &RunConfig) -> CliResult<(Dataset, Dataset)> {
    let dir = || cfg.data_dir.clone().unwrap_or_default();
    let (train, test) = match cfg.dataset {
        DatasetKind::Blobs => {
            let (tr, te) = blob_specs(&cfg.blobs, cfg.data_seed)?;
            (
                make_blobs(&tr).map_err(CliError::data)?,
                make_blobs(&te).map_err(CliError::data)?,
            )
        }
        DatasetKind::Idx => {
            let d = dir();
            let train = load_idx(
                &require(d.join("train-images-idx3-ubyte"))?,
                &require(d.join("train-labels-idx1-ubyte"))?,
            )
            .map_err(CliError::data)?;
            let test = load_idx(
                &require(d.join("t10k-images-idx3-ubyte"))?,
                &require(d.join("t10k-labels-idx1-ubyte"))?,
            )
            .map_err(CliError::data)?;
            (train, test)
        }
        DatasetKind::Cifar10 => {
            let d = dir();
            let batches: Vec<PathBuf> = (1..=5)
                .map(|i| d.join(format!("data_batch_{i}.bin")))
                .filter(|p| p.exists())
                .collect();
            if batches.is_empty() {
                return Err(CliError::Data(format!("no data_batch_*.bin under {}", d.display())));
            }
            let train = load_cifar10_bin(&batches).map_err(CliError::data)?;
            let test = load_cifar10_bin(&[require(d.join("test_batch.bin"))?]).map_err(CliError::data)?;
            (train, test)
        }
    };
    let classes = train.classes.max(test.classes);
    if train.dim() != test.dim() {
        return Err(CliError::Data(format!(
            "train features have {} columns, test features {}",
            train.dim(),
            test.dim()
        )));
    }
    let widen = |mut ds: Dataset| {
        ds.classes = classes;
        ds
    };
    Ok((widen(train), widen(test)))
}

/// Stratified subsample of about `limit` rows; the whole set if it is
/// already small enough.
pub fn subsample(ds: Dataset, limit: Option<usize>, seed: u64) -> CliResult<Dataset> {
    match limit {
        Some(n) if n < ds.len() => {
            let split =
                stratified_split(&ds.labels, ds.classes, n as f64 / ds.len() as f64, seed).map_err(CliError::data)?;
            Ok(ds.subset(&split.val))
        }
        _ => Ok(ds),
    }
}

/// Loads, subsamples, splits off validation data with the run seed and
/// standardises with training-split statistics.
pub fn prepare(cfg: &RunConfig) -> CliResult<Prepared> {
    let (train_full, test) = load(cfg)?;
    let train_full = subsample(train_full, cfg.train_limit, cfg.data_seed)?;
    let mut test = subsample(test, cfg.test_limit, cfg.data_seed.wrapping_add(1))?;
    let (train_digest, test_digest) = (train_full.digest(), test.digest());
    let split = stratified_split(
        &train_full.labels,
        train_full.classes,
        cfg.train.val_fraction,
        cfg.train.seed,
    )
    .map_err(CliError::data)?;
    let mut train = train_full.subset(&split.train);
    let mut val = train_full.subset(&split.val);
    if cfg.normalize {
        let norm = Normalizer::fit(&train).map_err(CliError::data)?;
        for ds in [&mut train, &mut val, &mut test] {
            norm.apply(ds).map_err(CliError::data)?;
        }
    }
    Ok(Prepared {
        train,
        val,
        test,
        train_digest,
        test_digest,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    pub report: TrainReport,
}

/// Initialises, trains to the best validation snapshot and scores the test
/// split.
pub fn train_model(cfg: &RunConfig, data: &Prepared) -> CliResult<RunOutcome> {
    let spec = cfg.backbone(&data.train)?;
    let model = Model::init(spec, data.train.classes, &cfg.train).map_err(CliError::run)?;
    let (model, mut report) = fit(&cfg.train, model, &data.train, &data.val).map_err(CliError::run)?;
    report.test = Some(evaluate(&model, &data.test, cfg.train.norm_eps).map_err(CliError::run)?);
    Ok(RunOutcome { model, report })
}

/// Embeddings of a split before and, for LACE heads, after whitening by the
/// learned statistics.
#[derive(Debug, Clone)]
pub struct EmbeddingViews {
    pub labels: Vec<usize>,
    pub pre: Matrix,
    /// Whitened rows (not normalised) and their norms.
    pub post: Option<(Matrix, Vector)>,
}

pub fn embed_in_chunks(model: &Model, features: &Matrix) -> CliResult<Matrix> {
    let mut out = Matrix::zeros((features.nrows(), model.backbone.spec.embed_dim()));
    let idx: Vec<usize> = (0..features.nrows()).collect();
    for chunk in idx.chunks(1024) {
        let emb = model.embed(&features.select(Axis(0), chunk)).map_err(CliError::run)?;
        for (row, &i) in emb.rows().into_iter().zip(chunk) {
            out.row_mut(i).assign(&row);
        }
    }
    Ok(out)
}

pub fn embedding_views(model: &Model, ds: &Dataset) -> CliResult<EmbeddingViews> {
    let pre = embed_in_chunks(model, &ds.features)?;
    let post = match &model.head {
        Head::Lace(p) => {
            let op = p.whitener().map_err(CliError::run)?;
            let w = (&pre - &op.mean).dot(&op.rotation.t());
            let norms = w.map_axis(Axis(1), |r| r.dot(&r).sqrt());
            Some((w, norms))
        }
        Head::Baseline(_) => None,
    };
    Ok(EmbeddingViews {
        labels: ds.labels.clone(),
        pre,
        post,
    })
}

/// Mean cosine between each embedding and its own class signature, before
/// whitening and as an ACE score after it.
pub fn signature_alignment(
    params: &LaceParams,
    embeddings: &Matrix,
    labels: &[usize],
    eps: f64,
) -> CliResult<(f64, f64)> {
    let scores = params.scores(embeddings, eps).map_err(CliError::run)?;
    let n = labels.len() as f64;
    let (mut pre, mut post) = (0.0, 0.0);
    for (i, &y) in labels.iter().enumerate() {
        let z = embeddings.row(i);
        let s = params.signatures.column(y);
        pre += z.dot(&s) / (z.dot(&z).sqrt() * s.dot(&s).sqrt() + eps);
        post += scores[[i, y]];
    }
    Ok((pre / n, post / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use lace_core::numerics::empirical_stats;

    #[test]
    fn blob_background_is_anisotropic_and_classes_sit_on_quiet_axes() {
        let cfg = BlobConfig::default();
        let (train, test) = blob_specs(&cfg, 3).unwrap();
        assert_eq!(train.means, test.means);
        let eig = sym_eig(&train.covariance).unwrap().eigenvalues;
        let ratio = (eig[0] / eig[cfg.dim - 1]).sqrt();
        assert!((ratio - cfg.anisotropy).abs() < 1e-6 * cfg.anisotropy, "{ratio}");
        let inv = lace_core::numerics::inverse_spd(&train.covariance).unwrap();
        for c in 0..cfg.classes {
            let shift = &train.means.row(c) - &Vector::from_elem(cfg.dim, cfg.offset);
            let mahalanobis = shift.dot(&inv.dot(&shift)).sqrt();
            assert!((mahalanobis - cfg.separation).abs() < 1e-8, "{mahalanobis}");
        }
    }

    #[test]
    fn prepared_blobs_are_standardised_on_train() {
        let cfg = RunConfig::default();
        let p = prepare(&cfg).unwrap();
        assert_eq!(p.train.len() + p.val.len(), cfg.blobs.classes * cfg.blobs.per_class);
        assert_eq!(p.test.len(), cfg.blobs.classes * cfg.blobs.test_per_class);
        let (mean, cov) = empirical_stats(&p.train.features).unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-9));
        assert!(cov.diag().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn subsample_is_stratified() {
        let mut cfg = RunConfig::default();
        cfg.blobs.per_class = 100;
        let (train, _) = load(&cfg).unwrap();
        let sub = subsample(train, Some(30), 0).unwrap();
        assert_eq!(sub.class_counts(), vec![10, 10, 10]);
    }
}
