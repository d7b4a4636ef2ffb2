//! Adam with linear warmup and global-norm clipping, plus parameter EMA.

use maskdistill_tensor::{Array, Checkpoint};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Linear warmup length in steps; 0 disables warmup.
    #[serde(default)]
    pub warmup: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            warmup: 0,
            clip_norm: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ModelParams) -> Self {
        let zeros = || params.params().iter().map(|p| Array::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        if c.warmup == 0 {
            c.lr
        } else {
            c.lr * ((self.step + 1) as f64 / c.warmup as f64).min(1.0)
        }
    }

    /// One update of every trainable parameter that received a gradient.
    /// Frozen parameters are never written.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Array>]) -> Result<()> {
        if grads.len() != params.params().len() {
            return Err(invalid("one gradient slot per parameter required"));
        }
        let norm = grads
            .iter()
            .zip(params.params())
            .filter(|(_, p)| p.trainable)
            .filter_map(|(g, _)| g.as_ref())
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = self.current_lr();
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.params_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if !p.trainable {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let g = g * clip;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }

    pub fn write_into(&self, ck: &mut Checkpoint, prefix: &str, params: &ModelParams) {
        for (i, p) in params.params().iter().enumerate() {
            ck.push(format!("{prefix}.m.{}", p.name), self.m[i].clone());
            ck.push(format!("{prefix}.v.{}", p.name), self.v[i].clone());
        }
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str, config: AdamConfig, params: &ModelParams, step: u64) -> Result<Self> {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for p in params.params() {
            m.push(ck.get(&format!("{prefix}.m.{}", p.name))?.clone());
            v.push(ck.get(&format!("{prefix}.v.{}", p.name))?.clone());
        }
        Ok(Self { config, step, m, v })
    }
}

/// `ema ← ρ·ema + (1 − ρ)·current`, tensor by tensor.
pub fn ema_update(ema: &mut ModelParams, current: &ModelParams, rho: f64) {
    for (e, c) in ema.params_mut().iter_mut().zip(current.params()) {
        for (e, c) in e.value.data_mut().iter_mut().zip(c.value.data()) {
            *e = rho * *e + (1.0 - rho) * c;
        }
    }
}
