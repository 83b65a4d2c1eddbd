//! Optimizers. Per-tensor state is keyed by tensor name.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{KerlError, Result};
use crate::nn::ParamGroup;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn check_shapes<P: ParamGroup>(params: &P, grads: &P) -> Result<()> {
    let p = params.tensors();
    let g = grads.tensors();
    if p.len() != g.len() || p.iter().zip(&g).any(|(a, b)| a.0 != b.0 || a.2.len() != b.2.len()) {
        return Err(KerlError::Shape("gradient layout differs from parameter layout".into()));
    }
    Ok(())
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ v + (g + λ θ)`, `θ ← θ − η v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub cfg: SgdConfig,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) || cfg.weight_decay < 0.0 {
            return Err(KerlError::Invalid(format!("invalid SGD settings {cfg:?}")));
        }
        Ok(Self {
            cfg,
            velocity: HashMap::new(),
        })
    }

    pub fn step<P: ParamGroup>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        check_shapes(params, grads)?;
        let grads = grads.tensors();
        for ((name, theta), (_, _, g)) in params.tensors_mut().into_iter().zip(grads) {
            let v = self
                .velocity
                .entry(name)
                .or_insert_with(|| vec![0.0; theta.len()]);
            for ((t, vi), gi) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.cfg.momentum * *vi + gi + self.cfg.weight_decay * *t;
                *t -= self.cfg.lr * *vi;
            }
        }
        Ok(())
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.velocity.contains_key(name)
    }

    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.velocity.keys().map(String::as_str)
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !(cfg.lr > 0.0) || !beta_ok(cfg.beta1) || !beta_ok(cfg.beta2) || !(cfg.eps > 0.0) {
            return Err(KerlError::Invalid(format!("invalid Adam settings {cfg:?}")));
        }
        Ok(Self {
            cfg,
            ..Self::default()
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<P: ParamGroup>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        check_shapes(params, grads)?;
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let grads = grads.tensors();
        for ((name, theta), (_, _, g)) in params.tensors_mut().into_iter().zip(grads) {
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; theta.len()]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; theta.len()]);
            for (((t, mi), vi), &gi) in theta.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *t -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
