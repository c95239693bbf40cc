//! Central finite-difference verification of the analytic gradients,
//! end to end through backbone and LACE head.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{self, BackboneSpec, MlpSpec, ModelState};
use crate::error::{LaceError, Result};
use crate::loss::{Ablation, Head, LaceParams};
use crate::numerics::{Matrix, Vector, NORM_EPS};
use crate::trainer::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Signatures,
    Mean,
    Factor,
    Embeddings,
    Backbone,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Signatures,
        Group::Mean,
        Group::Factor,
        Group::Embeddings,
        Group::Backbone,
    ];
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Signatures => "S",
            Group::Mean => "mu_b",
            Group::Factor => "M",
            Group::Embeddings => "embeddings",
            Group::Backbone => "backbone",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub dim: usize,
    pub classes: usize,
    pub batch: usize,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub ablation: Ablation,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Test hook: negate the analytic gradient of one group.
    pub flip_sign: Option<Group>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            dim: 4,
            classes: 3,
            batch: 5,
            input_dim: 6,
            hidden: vec![5],
            seed: 0,
            ablation: Ablation::default(),
            step: 1e-5,
            rel_tol: 1e-5,
            abs_tol: 1e-8,
            flip_sign: None,
        }
    }
}

/// One compared coordinate: `index` is `(tensor, element)` within the group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coordinate {
    pub group: Group,
    pub tensor: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Coordinate {
    pub fn abs_err(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }

    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            self.abs_err() / scale
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub group: Group,
    pub checked: usize,
    /// Largest relative error among coordinates whose absolute error exceeds
    /// the absolute tolerance (0 if none do).
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub max_abs_analytic: f64,
    pub worst: Option<Coordinate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub rel_tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < self.rel_tol)
    }

    /// First offending coordinate, if any.
    pub fn mismatch(&self) -> Option<Coordinate> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_err >= self.rel_tol)
            .find_map(|g| g.worst)
    }
}

fn validate(cfg: &GradcheckConfig) -> Result<()> {
    if !(2..=8).contains(&cfg.dim) || !(1..=6).contains(&cfg.classes) || !(1..=8).contains(&cfg.batch) {
        return Err(LaceError::invalid(format!(
            "gradient check needs 2 ≤ d ≤ 8, 1 ≤ C ≤ 6, 1 ≤ B ≤ 8 (got d={}, C={}, B={})",
            cfg.dim, cfg.classes, cfg.batch
        )));
    }
    if !(cfg.step > 0.0) {
        return Err(LaceError::invalid("finite-difference step must be positive"));
    }
    Ok(())
}

/// Random fixture: MLP backbone, LACE head with perturbed statistics,
/// Gaussian inputs and random labels.
pub fn fixture(cfg: &GradcheckConfig) -> Result<(Model, Matrix, Vec<usize>)> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gauss = |shape: (usize, usize)| Matrix::from_shape_fn(shape, |_| StandardNormal.sample(&mut rng));
    let spec = BackboneSpec::Mlp(MlpSpec {
        input_dim: cfg.input_dim,
        hidden: cfg.hidden.clone(),
        embed_dim: cfg.dim,
    });
    let mut backbone = ModelState::zeros(spec)?;
    for layer in backbone.layers.iter_mut() {
        let (r, c) = layer.weight.dim();
        layer.weight = gauss((r, c)) * (1.0 / (r as f64).sqrt());
        layer.bias = gauss((1, c)).row(0).to_owned() * 0.1;
    }
    let (d, c) = (cfg.dim, cfg.classes);
    let head = LaceParams {
        signatures: gauss((d, c)),
        mean: Vector::from(gauss((1, d)).row(0).to_vec()) * 0.2,
        factor: Matrix::eye(d) + gauss((d, d)) * 0.3,
        ablation: cfg.ablation,
    };
    let x = gauss((cfg.batch, cfg.input_dim));
    let labels: Vec<usize> = gauss((1, cfg.batch))
        .iter()
        .map(|z| ((z.abs() * 1000.0) as usize) % c)
        .collect();
    Ok((
        Model {
            backbone,
            head: Head::Lace(head),
        },
        x,
        labels,
    ))
}

fn loss(model: &Model, x: &Matrix, labels: &[usize]) -> Result<f64> {
    let emb = backbone::embed(&model.backbone, x)?;
    Ok(model.head.forward(&emb, labels, NORM_EPS)?.loss)
}

struct Accumulator {
    report: GroupReport,
    abs_tol: f64,
}

impl Accumulator {
    fn new(group: Group, abs_tol: f64) -> Self {
        Accumulator {
            report: GroupReport {
                group,
                checked: 0,
                max_rel_err: 0.0,
                max_abs_err: 0.0,
                max_abs_analytic: 0.0,
                worst: None,
            },
            abs_tol,
        }
    }

    fn push(&mut self, c: Coordinate) {
        let r = &mut self.report;
        r.checked += 1;
        r.max_abs_err = r.max_abs_err.max(c.abs_err());
        r.max_abs_analytic = r.max_abs_analytic.max(c.analytic.abs());
        if c.abs_err() >= self.abs_tol && c.rel_err() > r.max_rel_err {
            r.max_rel_err = c.rel_err();
            r.worst = Some(c);
        }
    }
}

/// Compares every analytic gradient of the fixture against central
/// differences of the loss.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let (model, x, labels) = fixture(cfg)?;
    let (emb, tape) = backbone::forward(&model.backbone, &x)?;
    let (_, head_grads) = model.head.forward_backward(&emb, &labels, NORM_EPS)?;
    let bb_grads = backbone::backward(&model.backbone, &tape, &head_grads.d_embeddings)?;
    let sign = |g: Group| if cfg.flip_sign == Some(g) { -1.0 } else { 1.0 };
    let h = cfg.step;

    let n_bb = model.backbone.tensors().len();
    let mut analytic: Vec<Vec<f64>> = bb_grads.tensors().iter().map(|t| t.to_vec()).collect();
    analytic.extend(head_grads.tensors.iter().cloned());
    let group_of = |t: usize| match t.checked_sub(n_bb) {
        None => Group::Backbone,
        Some(0) => Group::Signatures,
        Some(1) => Group::Mean,
        Some(_) => Group::Factor,
    };

    let mut acc: Vec<Accumulator> = Group::ALL.iter().map(|&g| Accumulator::new(g, cfg.abs_tol)).collect();
    let slot = |g: Group| Group::ALL.iter().position(|&x| x == g).expect("known group");

    for t in 0..analytic.len() {
        let group = group_of(t);
        for i in 0..analytic[t].len() {
            let mut plus = model.clone();
            plus.tensors_mut()[t][i] += h;
            let mut minus = model.clone();
            minus.tensors_mut()[t][i] -= h;
            let numeric = (loss(&plus, &x, &labels)? - loss(&minus, &x, &labels)?) / (2.0 * h);
            acc[slot(group)].push(Coordinate {
                group,
                tensor: if group == Group::Backbone { t } else { 0 },
                element: i,
                analytic: sign(group) * analytic[t][i],
                numeric,
            });
        }
    }

    let head_loss = |e: &Matrix| model.head.forward(e, &labels, NORM_EPS).map(|o| o.loss);
    for ((r, c), &g) in head_grads.d_embeddings.indexed_iter() {
        let mut plus = emb.clone();
        plus[[r, c]] += h;
        let mut minus = emb.clone();
        minus[[r, c]] -= h;
        let numeric = (head_loss(&plus)? - head_loss(&minus)?) / (2.0 * h);
        acc[slot(Group::Embeddings)].push(Coordinate {
            group: Group::Embeddings,
            tensor: 0,
            element: r * emb.ncols() + c,
            analytic: sign(Group::Embeddings) * g,
            numeric,
        });
    }

    Ok(GradcheckReport {
        groups: acc.into_iter().map(|a| a.report).collect(),
        rel_tol: cfg.rel_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_fixture_passes() {
        let r = gradcheck(&GradcheckConfig::default()).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.groups.iter().all(|g| g.checked > 0));
    }

    #[test]
    fn sign_flip_is_caught() {
        for g in Group::ALL {
            let r = gradcheck(&GradcheckConfig {
                flip_sign: Some(g),
                ..GradcheckConfig::default()
            })
            .unwrap();
            assert!(!r.passed(), "{g}");
            assert_eq!(r.mismatch().unwrap().group, g);
        }
    }

    #[test]
    fn single_class_gradients_vanish() {
        let r = gradcheck(&GradcheckConfig {
            classes: 1,
            ..GradcheckConfig::default()
        })
        .unwrap();
        assert!(r.passed());
        for g in &r.groups {
            assert_eq!(g.max_abs_analytic, 0.0, "{}", g.group);
            assert_eq!(g.max_abs_err, 0.0, "{}", g.group);
        }
    }

    #[test]
    fn oversized_fixture_rejected() {
        assert!(gradcheck(&GradcheckConfig {
            dim: 9,
            ..GradcheckConfig::default()
        })
        .is_err());
    }
}
