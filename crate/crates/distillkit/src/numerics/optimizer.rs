//! Adam with inverse-sqrt warmup schedule and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ADAM_EPS: f64 = 1e-8;

/// Training hyperparameters. Defaults follow the transformer recipe used
/// throughout: Adam (0.9, 0.98), 4000 warmup steps, inverse-sqrt decay from
/// a 5e-4 peak, clipnorm 1.0, label smoothing 0.1, dropout 0.2.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub betas: (f64, f64),
    pub warmup_steps: u64,
    pub max_grad_norm: f64,
    pub label_smoothing: f64,
    pub dropout: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 5e-4,
            betas: (0.9, 0.98),
            warmup_steps: 4000,
            max_grad_norm: 1.0,
            label_smoothing: 0.1,
            dropout: 0.2,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::InvalidConfig(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        for (i, b) in [self.betas.0, self.betas.1].into_iter().enumerate() {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::InvalidConfig(format!("beta{} must lie in (0, 1), got {b}", i + 1)));
            }
        }
        if self.warmup_steps < 1 {
            return Err(Error::InvalidConfig("warmup_steps must be at least 1".into()));
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "max_grad_norm must be positive, got {}",
                self.max_grad_norm
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidConfig(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step` (1-based): linear warmup to `base_lr`, then
/// inverse-sqrt decay. Both branches meet at `base_lr` when
/// `step == warmup_steps`.
pub fn lr_at(step: u64, cfg: &OptimizerConfig) -> Result<f64> {
    if step == 0 {
        return Err(Error::InvalidConfig("lr_at requires step >= 1".into()));
    }
    let w = cfg.warmup_steps as f64;
    let s = step as f64;
    Ok(if step <= cfg.warmup_steps {
        cfg.base_lr * s / w
    } else {
        cfg.base_lr * (w / s).sqrt()
    })
}

/// A named trainable tensor with its accumulated gradient. Frozen
/// parameters (`trainable = false`) keep zero gradients and are skipped by
/// the optimizer.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        let len = data.len();
        debug_assert_eq!(len, shape.iter().product::<usize>());
        Param { name: name.into(), shape, data, grad: vec![0.0; len], trainable: true }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// First and second Adam moments, parallel to a parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Rebuild state from serialized moments (checkpoint restore).
    pub fn from_moments(m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::Shape(format!(
                "moment lists disagree: {} first vs {} second",
                m.len(),
                v.len()
            )));
        }
        for (a, b) in m.iter().zip(&v) {
            if a.len() != b.len() {
                return Err(Error::Shape("moment vector lengths disagree".into()));
            }
        }
        Ok(AdamState { m, v })
    }
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm. Already-compliant gradients pass through
/// untouched, which makes the operation idempotent.
pub fn clip_grad_norm(params: &mut [Param], max_norm: f64) -> Result<f64> {
    if !(max_norm.is_finite() && max_norm > 0.0) {
        return Err(Error::InvalidConfig(format!("max_norm must be positive, got {max_norm}")));
    }
    let mut sq = 0.0;
    for p in params.iter() {
        for &g in &p.grad {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of '{}' is non-finite", p.name)));
            }
            sq += g * g;
        }
    }
    let total = sq.sqrt();
    // Tiny slack keeps re-clipping an already-clipped set a strict no-op.
    if total > max_norm * (1.0 + 1e-12) {
        let scale = max_norm / total;
        for p in params.iter_mut() {
            for g in &mut p.grad {
                *g *= scale;
            }
        }
    }
    Ok(total)
}

/// One bias-corrected Adam update over all trainable parameters at
/// `lr_at(step)`. Gradients are expected to be pre-clipped.
pub fn adam_step(
    params: &mut [Param],
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    step: u64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer state covers {} parameters, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    let lr = lr_at(step, cfg)?;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        if state.m[i].len() != p.data.len() {
            return Err(Error::Shape(format!(
                "optimizer moment shape mismatch for '{}'",
                p.name
            )));
        }
        for j in 0..p.data.len() {
            let g = p.grad[j];
            if g.is_nan() {
                return Err(Error::NonFinite(format!("NaN gradient in parameter '{}'", p.name)));
            }
            let m = b1 * state.m[i][j] + (1.0 - b1) * g;
            let v = b2 * state.v[i][j] + (1.0 - b2) * g * g;
            state.m[i][j] = m;
            state.v[i][j] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            p.data[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}
