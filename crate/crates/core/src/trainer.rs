//! Mini-batch training with Adam, seeded shuffling and validation-based
//! early stopping.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, BackboneSpec, ModelState};
use crate::data::{augment_image, stratified_split, Dataset, SplitIndices};
use crate::error::{LaceError, Result};
use crate::loss::{argmax, Ablation, BaselineHead, BaselineVariant, Head, LaceParams};
use crate::numerics::{all_finite, Matrix, NORM_EPS};
use crate::optim::{Adam, AdamConfig};

const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Lace,
    Softmax,
    CosFace,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Lace => "lace",
            LossKind::Softmax => "softmax",
            LossKind::CosFace => "cosface",
        })
    }
}

impl FromStr for LossKind {
    type Err = LaceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lace" => Ok(LossKind::Lace),
            "softmax" => Ok(LossKind::Softmax),
            "cosface" | "cosine_margin" => Ok(LossKind::CosFace),
            other => Err(LaceError::invalid(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub patience: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub ablation: Ablation,
    pub loss: LossKind,
    /// Normalisation floor used by the cosine heads.
    pub norm_eps: f64,
    /// Random pad-crop-flip on training images.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 300,
            batch_size: 256,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            patience: 10,
            seed: 0,
            val_fraction: 0.1,
            ablation: Ablation::default(),
            loss: LossKind::Lace,
            norm_eps: NORM_EPS,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(LaceError::invalid(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(LaceError::invalid("patience, batch_size and max_epochs must be ≥ 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(LaceError::invalid(format!(
                "learning rate {} must be finite and ≥ 0",
                self.lr
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(LaceError::invalid("norm_eps must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Backbone plus classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: ModelState,
    pub head: Head,
}

impl Model {
    /// Seeded initialisation; the head matches `config.loss`.
    pub fn init(spec: BackboneSpec, classes: usize, config: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone = ModelState::init(spec, &mut rng)?;
        let d = backbone.spec.embed_dim();
        let head = match config.loss {
            LossKind::Lace => Head::Lace(LaceParams::init(d, classes, config.ablation, &mut rng)?),
            LossKind::Softmax => {
                Head::Baseline(BaselineHead::init(d, classes, BaselineVariant::PlainSoftmax, &mut rng)?)
            }
            LossKind::CosFace => Head::Baseline(BaselineHead::init(
                d,
                classes,
                BaselineVariant::cosface_defaults(),
                &mut rng,
            )?),
        };
        Ok(Model { backbone, head })
    }

    pub fn embed(&self, features: &Matrix) -> Result<Matrix> {
        backbone::embed(&self.backbone, features)
    }

    /// Backbone tensors followed by head tensors.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.backbone.tensors();
        t.extend(self.head.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.backbone.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }

    pub fn trainable(&self) -> Vec<bool> {
        let mut t = vec![true; self.backbone.tensors().len()];
        t.extend(self.head.trainable());
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Waiting,
    Stop,
}

/// Stops once the validation loss has failed to improve on its best value
/// for `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    waited: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience: patience.max(1),
            best: f64::INFINITY,
            best_epoch: 0,
            waited: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Progress {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.waited = 0;
            return Progress::Improved;
        }
        self.waited += 1;
        if self.waited >= self.patience {
            Progress::Stop
        } else {
            Progress::Waiting
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Patience => "patience",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `None` for classes absent from the split.
    pub per_class_accuracy: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
    pub wall_time: Duration,
    pub test: Option<Evaluation>,
}

impl TrainReport {
    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            ));
        }
        out
    }

    /// `key = value` lines. Wall time is left out so that replays compare
    /// byte for byte.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "stop_epoch = {}\nstop_reason = {}\nbest_epoch = {}\n",
            self.stop_epoch, self.stop_reason, self.best_epoch
        );
        if let Some(best) = self.epochs.iter().find(|r| r.epoch == self.best_epoch) {
            out.push_str(&format!(
                "best_val_loss = {}\nbest_val_acc = {}\n",
                best.val_loss, best.val_acc
            ));
        }
        if let Some(t) = &self.test {
            out.push_str(&format!(
                "test_accuracy = {}\ntest_loss = {}\n",
                t.accuracy, t.mean_loss
            ));
            for (c, acc) in t.per_class_accuracy.iter().enumerate() {
                if let Some(a) = acc {
                    out.push_str(&format!("test_accuracy_class_{c} = {a}\n"));
                }
            }
        }
        out
    }
}

/// Trained model, report and the train/validation partition used.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: TrainReport,
    pub split: SplitIndices,
}

/// Stratified train/val split, seeded initialisation, then [`fit`].
pub fn train(config: &TrainConfig, spec: BackboneSpec, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(LaceError::invalid("training set is empty"));
    }
    let split = stratified_split(&data.labels, data.classes, config.val_fraction, config.seed)?;
    let model = Model::init(spec, data.classes, config)?;
    let (model, report) = fit(config, model, &data.subset(&split.train), &data.subset(&split.val))?;
    Ok(TrainOutcome { model, report, split })
}

fn batch_features(config: &TrainConfig, data: &Dataset, idx: &[usize], epoch: usize) -> Matrix {
    let mut x = data.features.select(Axis(0), idx);
    if let (true, Some(shape)) = (config.augment, data.image) {
        for (row, &i) in x.rows_mut().into_iter().zip(idx) {
            let src = row.to_vec();
            let aug = augment_image(&src, shape, config.seed, epoch as u64, i as u64);
            row.into_iter().zip(aug).for_each(|(dst, v)| *dst = v);
        }
    }
    x
}

fn max_abs(tensors: &[&[f64]]) -> f64 {
    tensors
        .iter()
        .flat_map(|t| t.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Adds where a numerical failure happened.
fn at(e: LaceError, place: &str) -> LaceError {
    match e {
        LaceError::NumericalFailure(m) => LaceError::NumericalFailure(format!("{m} ({place})")),
        other => other,
    }
}

/// Trains `model` in place of a fresh initialisation and returns the
/// best-validation-loss snapshot.
pub fn fit(
    config: &TrainConfig,
    mut model: Model,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<(Model, TrainReport)> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(LaceError::invalid("train and validation splits must be non-empty"));
    }
    let started = Instant::now();
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(config.adam(), &sizes)?;
    let trainable = model.trainable();
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let x = batch_features(config, train_set, idx, epoch);
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let (emb, tape) = backbone::forward(&model.backbone, &x)?;
            if !all_finite(emb.iter()) {
                return Err(LaceError::NumericalFailure(format!(
                    "non-finite embeddings at epoch {epoch}, batch {b}"
                )));
            }
            let (out, head_grads) = model
                .head
                .forward_backward(&emb, &labels, config.norm_eps)
                .map_err(|e| at(e, &format!("epoch {epoch}, batch {b}")))?;
            let bb_grads = backbone::backward(&model.backbone, &tape, &head_grads.d_embeddings)?;
            let mut grads: Vec<&[f64]> = bb_grads.tensors();
            grads.extend(head_grads.tensors.iter().map(Vec::as_slice));
            if !out.loss.is_finite() || !grads.iter().all(|g| all_finite(g.iter())) {
                return Err(LaceError::NumericalFailure(format!(
                    "non-finite training loss {} at epoch {epoch}, batch {b} (max |grad| = {:e})",
                    out.loss,
                    max_abs(&grads)
                )));
            }
            adam.step(model.tensors_mut(), &grads, &trainable)?;
            if !model.tensors().iter().all(|t| all_finite(t.iter())) {
                return Err(LaceError::NumericalFailure(format!(
                    "parameters became non-finite at epoch {epoch}, batch {b} (max |grad| = {:e})",
                    max_abs(&grads)
                )));
            }
            loss_sum += out.loss * idx.len() as f64;
            correct += out
                .scores
                .rows()
                .into_iter()
                .zip(&labels)
                .filter(|(row, &l)| argmax(row.view()) == l)
                .count();
        }
        let val = evaluate(&model, val_set, config.norm_eps)
            .map_err(|e| at(e, &format!("validation after epoch {epoch}")))?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_loss: val.mean_loss,
            val_acc: val.accuracy,
        });
        match stopper.observe(epoch, val.mean_loss) {
            Progress::Improved => best = model.clone(),
            Progress::Waiting => {}
            Progress::Stop => {
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    let report = TrainReport {
        stop_epoch: epochs.len(),
        best_epoch: stopper.best_epoch(),
        epochs,
        stop_reason,
        wall_time: started.elapsed(),
        test: None,
    };
    Ok((best, report))
}

/// Accuracy (argmax of the head's scores, lowest index on ties), mean loss
/// and per-class accuracy over a split.
pub fn evaluate(model: &Model, split: &Dataset, eps: f64) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(LaceError::invalid("cannot evaluate an empty split"));
    }
    let classes = model.head.num_classes();
    let mut hits = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = split.features.select(Axis(0), chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| split.labels[i]).collect();
        let emb = model.embed(&x)?;
        if !all_finite(emb.iter()) {
            return Err(LaceError::NumericalFailure(
                "model produced non-finite embeddings".into(),
            ));
        }
        loss_sum += model.head.forward(&emb, &labels, eps)?.loss * chunk.len() as f64;
        let scores = model.head.scores(&emb, eps)?;
        for (row, &l) in scores.rows().into_iter().zip(&labels) {
            seen[l] += 1;
            if argmax(row) == l {
                hits[l] += 1;
            }
        }
    }
    Ok(Evaluation {
        accuracy: hits.iter().sum::<usize>() as f64 / split.len() as f64,
        mean_loss: loss_sum / split.len() as f64,
        per_class_accuracy: hits
            .iter()
            .zip(&seen)
            .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
            .collect(),
    })
}
