//! Adam with bias correction.

use crate::error::{LaceError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of a flat parameter slice. `t` is the 1-based step count
/// used for bias correction.
///
/// A zero step leaves the parameter untouched, so `lr = 0` keeps every bit.
pub fn adam_step(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    assert!(
        params.len() == grads.len() && m.len() == params.len() && v.len() == params.len(),
        "adam_step slices must share a length"
    );
    assert!(t >= 1, "adam step count starts at 1");
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = if c1 > 0.0 { m[i] / c1 } else { m[i] };
        let v_hat = if c2 > 0.0 { v[i] / c2 } else { v[i] };
        let step = cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        if step != 0.0 {
            params[i] -= step;
        }
    }
}

/// Adam state over a fixed list of tensors. Frozen tensors keep zero
/// moments and are never written.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Result<Self> {
        if !(config.lr >= 0.0 && config.lr.is_finite()) {
            return Err(LaceError::invalid(format!(
                "learning rate must be finite and ≥ 0, got {}",
                config.lr
            )));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) || config.eps <= 0.0 {
            return Err(LaceError::invalid("Adam needs betas in [0, 1) and eps > 0"));
        }
        Ok(Adam {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]], trainable: &[bool]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() || trainable.len() != params.len() {
            return Err(LaceError::invalid(format!(
                "optimiser tracks {} tensors, got {} params / {} grads / {} flags",
                self.first.len(),
                params.len(),
                grads.len(),
                trainable.len()
            )));
        }
        self.step += 1;
        for (k, p) in params.into_iter().enumerate() {
            if !trainable[k] {
                continue;
            }
            if p.len() != self.first[k].len() || grads[k].len() != p.len() {
                return Err(LaceError::invalid(format!("tensor {k} changed size")));
            }
            adam_step(
                p,
                grads[k],
                &mut self.first[k],
                &mut self.second[k],
                self.step,
                &self.config,
            );
        }
        Ok(())
    }
}
