//! Adam/AdamW steppers and early stopping.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::encoders::{GradientTape, Parameterized};
use crate::error::{Error, Result};

/// Minimum decrease of the validation loss that counts as an improvement.
pub const IMPROVEMENT_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `false` gives plain Adam: no weight decay at all.
    pub decoupled: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adamw(1e-3, 1e-3)
    }
}

impl OptimizerConfig {
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decoupled: true,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            weight_decay: 0.0,
            decoupled: false,
            ..Self::adamw(lr, 0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter moment buffers keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    config: OptimizerConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
    no_decay: BTreeSet<String>,
}

impl AdamWState {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
            no_decay: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Exempts a parameter from weight decay.
    pub fn exclude_from_decay(&mut self, name: impl Into<String>) {
        self.no_decay.insert(name.into());
    }

    /// One optimizer step over every parameter of `model` that has a
    /// gradient on the tape; parameters without one are left untouched.
    pub fn step<P: Parameterized + ?Sized>(&mut self, model: &mut P, tape: &GradientTape) -> Result<()> {
        self.step += 1;
        let step = self.step;
        for view in model.params_mut() {
            let Some(grad) = tape.get(&view.name) else {
                continue;
            };
            let decay = !self.no_decay.contains(&view.name);
            self.update(&view.name, view.values, grad, decay, step)?;
        }
        Ok(())
    }

    /// Updates a single named buffer as part of step number `step`.
    fn update(&mut self, name: &str, params: &mut [f64], grad: &[f64], decay: bool, step: u64) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name} has {} values, gradient {}",
                params.len(),
                grad.len()
            )));
        }
        let c = self.config;
        let mom = self.moments.entry(name.to_owned()).or_insert_with(|| Moments {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
        });
        let bc1 = 1.0 - c.beta1.powi(step as i32);
        let bc2 = 1.0 - c.beta2.powi(step as i32);
        let shrink = if c.decoupled && decay {
            1.0 - c.lr * c.weight_decay
        } else {
            1.0
        };
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut mom.m).zip(&mut mom.v) {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * shrink - c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }

    /// Steps a bare parameter slice; used for standalone checks.
    pub fn step_slice(&mut self, name: &str, params: &mut [f64], grad: &[f64]) -> Result<()> {
        self.step += 1;
        let decay = !self.no_decay.contains(name);
        self.update(name, params, grad, decay, self.step)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue { improved: bool },
    Stop,
}

/// Tracks the best validation loss; epochs are numbered from 1.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
            since_best: 0,
        })
    }

    pub fn observe(&mut self, val_loss: f64) -> StopDecision {
        self.epoch += 1;
        if val_loss < self.best - IMPROVEMENT_EPS || (self.best_epoch == 0 && val_loss.is_finite()) {
            self.best = val_loss;
            self.best_epoch = self.epoch;
            self.since_best = 0;
            return StopDecision::Continue { improved: true };
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue { improved: false }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Zero until a finite loss has been observed.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Replays a validation-loss history; returns `(stop_epoch, best_epoch)`
/// when the rule fires, `None` if training would continue.
pub fn early_stop(val_losses: &[f64], patience: usize) -> Result<Option<(usize, usize)>> {
    if val_losses.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut es = EarlyStopping::new(patience)?;
    for (i, &l) in val_losses.iter().enumerate() {
        if es.observe(l) == StopDecision::Stop {
            return Ok(Some((i + 1, es.best_epoch())));
        }
    }
    Ok(None)
}
