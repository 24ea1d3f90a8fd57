use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, ParamStore};

/// What the schedule's `decay` value means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    /// Multiply the learning rate by `decay` at each milestone.
    LrFactor,
    /// Use `decay` as the L2 coefficient in the momentum update.
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    pub warmup_iters: usize,
    /// Learning rate during warm-up is `warmup_factor * base_lr`.
    #[serde(default = "default_warmup_factor")]
    pub warmup_factor: f64,
    pub total_iters: usize,
    pub momentum: f64,
    pub decay: f64,
    pub decay_kind: DecayKind,
    /// Iterations at which an `LrFactor` decay is applied.
    #[serde(default)]
    pub milestones: Vec<usize>,
    /// L2 coefficient used when `decay` is a learning-rate factor.
    #[serde(default)]
    pub l2: f64,
    pub batch_size: usize,
    /// Rescale the gradient when its global L2 norm exceeds this.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

fn default_warmup_factor() -> f64 {
    0.1
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.warmup_iters >= self.total_iters {
            return Err(Error::Config(format!(
                "warmup_iters ({}) must be below total_iters ({})",
                self.warmup_iters, self.total_iters
            )));
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return Err(Error::Config("max_grad_norm must be positive".into()));
        }
        if self.batch_size == 0 || !(0.0..1.0).contains(&self.momentum) || self.decay < 0.0 || self.l2 < 0.0 {
            return Err(Error::Config("batch size must be positive, momentum in [0, 1), decays non-negative".into()));
        }
        Ok(())
    }

    /// Effective L2 coefficient for the optimizer.
    pub fn l2_coefficient(&self) -> f64 {
        match self.decay_kind {
            DecayKind::L2 => self.decay,
            DecayKind::LrFactor => self.l2,
        }
    }
}

/// Constant warm-up at `warmup_factor * base_lr`, then `base_lr` with step
/// decay at the milestones when `decay` is a learning-rate factor.
pub fn lr_at(iter: usize, spec: &ScheduleSpec) -> f64 {
    if iter < spec.warmup_iters {
        return spec.warmup_factor * spec.base_lr;
    }
    match spec.decay_kind {
        DecayKind::LrFactor => {
            let passed = spec.milestones.iter().filter(|&&m| iter >= m).count();
            spec.base_lr * spec.decay.powi(passed as i32)
        }
        DecayKind::L2 => spec.base_lr,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub velocity: BTreeMap<String, Vec<f64>>,
    /// Steps dropped because a gradient was not finite.
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

/// Global L2 norm over all gradients.
pub fn grad_norm(grads: &Gradients) -> f64 {
    grads.values().flat_map(|g| &g.data).map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales `grads` down to norm `max_norm` when above it. Returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let f = max_norm / norm;
        grads.values_mut().for_each(|g| g.data.iter_mut().for_each(|v| *v *= f));
    }
    norm
}

/// `v <- momentum * v + g + l2 * p; p <- p - lr * v` for every parameter that
/// received a gradient. Parameters without a gradient are left alone.
pub fn sgd_momentum_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    l2: f64,
) -> Result<StepOutcome> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::Shape(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape != g.shape {
            return Err(Error::Shape(format!("gradient for `{name}` has shape {:?}, parameter {:?}", g.shape, p.shape)));
        }
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        state.skipped_steps += 1;
        warn!("non-finite gradient in `{name}`; step skipped ({} so far)", state.skipped_steps);
        return Ok(StepOutcome::SkippedNonFinite);
    }
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let v = state.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.data.len()]);
        for ((vi, &gi), pi) in v.iter_mut().zip(&g.data).zip(p.data.iter_mut()) {
            *vi = momentum * *vi + gi + l2 * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(StepOutcome::Applied)
}
