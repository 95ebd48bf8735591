use serde::{Deserialize, Serialize};

use super::params::{GradBuffer, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Adamw,
}

/// Learning-rate shape after warmup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    Constant,
    InverseSqrt,
}

/// Optimization hyperparameters shared by probe and translation training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub decay: LrDecay,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    pub max_epochs: Option<usize>,
    /// Early stopping: evaluations without validation improvement.
    pub patience: Option<usize>,
    /// Validate every this many steps (`None`: once per epoch).
    pub eval_every: Option<usize>,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self::translation()
    }
}

impl TrainHyper {
    /// Leak-probe settings: Adam, lr 1e-4, 5000 steps of 32 fresh sequences.
    pub fn leak_probe() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            warmup_steps: 0,
            decay: LrDecay::Constant,
            batch_size: 32,
            label_smoothing: 0.0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_steps: Some(5000),
            max_epochs: None,
            patience: None,
            eval_every: None,
            grad_clip: None,
            seed: 0,
        }
    }

    /// Leak probe as run by the audit: identical to [`Self::leak_probe`]
    /// except for a 1e-3 learning rate. At `d = 128` the slower rate leaves
    /// the conv-position leaks of δ = 4 well short of exact recovery after
    /// 5000 steps.
    pub fn leak_probe_desk() -> Self {
        Self {
            learning_rate: 1e-3,
            ..Self::leak_probe()
        }
    }

    /// Full-scale translation settings: AdamW, lr 2e-4, 4000 warmup steps,
    /// batch 128, label smoothing 0.1, patience 10.
    pub fn translation() -> Self {
        Self {
            optimizer: OptimizerKind::Adamw,
            learning_rate: 2e-4,
            warmup_steps: 4000,
            decay: LrDecay::Constant,
            batch_size: 128,
            label_smoothing: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_steps: None,
            max_epochs: None,
            patience: Some(10),
            eval_every: None,
            grad_clip: None,
            seed: 0,
        }
    }

    /// Small-corpus preset used for the toy tasks.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_steps: 200,
            batch_size: 32,
            patience: Some(3),
            max_epochs: Some(20),
            grad_clip: Some(1.0),
            ..Self::translation()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_steps.is_none() && self.max_epochs.is_none() && self.patience.is_none() {
            return Err(Error::Config(
                "one of max_steps, max_epochs or patience is required".into(),
            ));
        }
        Ok(())
    }
}

/// Learning-rate multiplier: linear ramp 0 → 1 over the warmup, then flat
/// (or inverse-sqrt decay when configured).
pub fn lr_schedule(step: usize, hyper: &TrainHyper) -> f64 {
    let warmup = hyper.warmup_steps;
    if warmup > 0 && step < warmup {
        return step as f64 / warmup as f64;
    }
    match hyper.decay {
        LrDecay::Constant => 1.0,
        LrDecay::InverseSqrt => {
            let w = warmup.max(1) as f64;
            (w / (step.max(1) as f64).max(w)).sqrt()
        }
    }
}

/// One Adam/AdamW update. `step` counts updates from 1 and drives both the
/// bias correction and the schedule.
pub fn optimizer_step(store: &mut ParamStore, grads: &GradBuffer, hyper: &TrainHyper, step: usize) -> Result<()> {
    if grads.grads.len() != store.len() {
        return Err(Error::Shape(format!(
            "{} gradient arrays for {} parameters",
            grads.grads.len(),
            store.len()
        )));
    }
    for id in store.ids() {
        if grads.grads[id.0].len() != store.data(id).len() {
            return Err(Error::Shape(format!(
                "gradient for {} has {} values, expected {}",
                store.name(id),
                grads.grads[id.0].len(),
                store.data(id).len()
            )));
        }
    }
    let t = step.max(1) as i32;
    let lr = hyper.learning_rate * lr_schedule(step, hyper);
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let decay = match hyper.optimizer {
        OptimizerKind::Adamw => lr * hyper.weight_decay,
        OptimizerKind::Adam => 0.0,
    };
    let clip = match hyper.grad_clip {
        Some(max) => {
            let norm = grads.global_norm();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    for id in store.ids() {
        let e = store.entry_mut(id);
        for (((p, m), v), &g) in e
            .data
            .iter_mut()
            .zip(e.m.iter_mut())
            .zip(e.v.iter_mut())
            .zip(&grads.grads[id.0])
        {
            let g = g as f64 * clip;
            let m_new = b1 * *m as f64 + (1.0 - b1) * g;
            let v_new = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = m_new as f32;
            *v = v_new as f32;
            let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + hyper.adam_eps);
            let mut x = *p as f64;
            x -= decay * x;
            x -= update;
            *p = x as f32;
        }
    }
    Ok(())
}
