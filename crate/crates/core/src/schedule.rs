//! Fine-tuning strategies: slanted triangular learning rate, discriminative
//! per-group learning rates, gradual unfreezing, freeze-last-k, the named
//! strategy presets, and the Adam optimizer that consumes them.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::Scalar;
use crate::model::{group_names, group_of, Gradients, HeadSource, ParamSet};

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// The named strategy combinations from the catastrophic-forgetting grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyPreset {
    /// Constant learning rate, no discrimination, nothing frozen.
    #[serde(rename = "NA")]
    Na,
    /// Slanted triangular learning rate only.
    #[serde(rename = "STL")]
    Stl,
    /// Triangular schedule plus discriminative fine-tuning.
    #[serde(rename = "STL+DFT")]
    StlDft,
    /// Triangular schedule plus gradual unfreezing.
    #[serde(rename = "STL+GU")]
    StlGu,
    /// All three strategies together.
    #[serde(rename = "ALL")]
    All,
}

impl StrategyPreset {
    pub const ALL_PRESETS: [StrategyPreset; 5] = [
        StrategyPreset::Na,
        StrategyPreset::Stl,
        StrategyPreset::StlDft,
        StrategyPreset::StlGu,
        StrategyPreset::All,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyPreset::Na => "NA",
            StrategyPreset::Stl => "STL",
            StrategyPreset::StlDft => "STL+DFT",
            StrategyPreset::StlGu => "STL+GU",
            StrategyPreset::All => "ALL",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, ScheduleError> {
        match name {
            "NA" => Ok(StrategyPreset::Na),
            "STL" => Ok(StrategyPreset::Stl),
            "STL+DFT" => Ok(StrategyPreset::StlDft),
            "STL+GU" => Ok(StrategyPreset::StlGu),
            "ALL" => Ok(StrategyPreset::All),
            other => Err(ScheduleError::Parameter(format!(
                "unknown strategy preset {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for StrategyPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The complete fine-tuning strategy for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub preset: StrategyPreset,
    pub peak_lr: f64,
    pub use_stlr: bool,
    /// Warm-up proportion of the triangular schedule.
    pub warmup_proportion: f64,
    /// Total optimizer steps of the run; 0 until resolved against the data.
    pub total_steps: usize,
    /// Discrimination rate theta; 1 gives every group the base rate.
    pub discrimination_rate: f64,
    pub gradual_unfreeze: bool,
    /// Unfreeze one more group after each such fraction of a training epoch.
    pub unfreeze_interval: f64,
    /// Fine-tune only the last k encoder layers (plus the head).
    pub freeze_last_k: Option<usize>,
    #[serde(default)]
    pub head_source: HeadSource,
}

impl TrainingPlan {
    /// Build the plan a named preset stands for, with the published default
    /// hyperparameters (peak 2e-5, warm-up 0.2, theta 0.85, unfreeze each
    /// third of an epoch).
    pub fn preset(preset: StrategyPreset) -> Self {
        let base = TrainingPlan {
            preset,
            peak_lr: 2e-5,
            use_stlr: false,
            warmup_proportion: 0.2,
            total_steps: 0,
            discrimination_rate: 1.0,
            gradual_unfreeze: false,
            unfreeze_interval: 1.0 / 3.0,
            freeze_last_k: None,
            head_source: HeadSource::LastLayer,
        };
        match preset {
            StrategyPreset::Na => base,
            StrategyPreset::Stl => TrainingPlan {
                use_stlr: true,
                ..base
            },
            StrategyPreset::StlDft => TrainingPlan {
                use_stlr: true,
                discrimination_rate: 0.85,
                ..base
            },
            StrategyPreset::StlGu => TrainingPlan {
                use_stlr: true,
                gradual_unfreeze: true,
                ..base
            },
            StrategyPreset::All => TrainingPlan {
                use_stlr: true,
                discrimination_rate: 0.85,
                gradual_unfreeze: true,
                ..base
            },
        }
    }

    pub fn from_name(name: &str) -> Result<Self, ScheduleError> {
        StrategyPreset::from_name(name).map(Self::preset)
    }

    pub fn with_peak_lr(mut self, lr: f64) -> Self {
        self.peak_lr = lr;
        self
    }

    pub fn with_total_steps(mut self, total: usize) -> Self {
        self.total_steps = total;
        self
    }

    pub fn with_freeze_last_k(mut self, k: usize) -> Self {
        self.freeze_last_k = Some(k);
        self.gradual_unfreeze = false;
        self
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.peak_lr <= 0.0 {
            return Err(ScheduleError::Parameter(format!(
                "peak_lr {} must be positive",
                self.peak_lr
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_proportion) || self.warmup_proportion == 0.0 {
            return Err(ScheduleError::Parameter(format!(
                "warmup_proportion {} outside (0, 1)",
                self.warmup_proportion
            )));
        }
        if !(0.0..=1.0).contains(&self.discrimination_rate) || self.discrimination_rate == 0.0 {
            return Err(ScheduleError::Parameter(format!(
                "discrimination_rate {} outside (0, 1]",
                self.discrimination_rate
            )));
        }
        if self.unfreeze_interval <= 0.0 {
            return Err(ScheduleError::Parameter(
                "unfreeze_interval must be positive".into(),
            ));
        }
        if self.gradual_unfreeze && self.freeze_last_k.is_some() {
            return Err(ScheduleError::Parameter(
                "gradual unfreezing and freeze-last-k cannot both be active".into(),
            ));
        }
        Ok(())
    }
}

/// Slanted triangular learning rate: linear ramp to the peak at
/// `warmup_proportion * total_steps`, then linear decay to zero at the end.
/// Plans without the schedule get the constant peak rate.
pub fn stlr_lr(plan: &TrainingPlan, step: usize) -> Result<f64, ScheduleError> {
    if !plan.use_stlr {
        return Ok(plan.peak_lr);
    }
    if plan.total_steps == 0 {
        return Err(ScheduleError::Schedule("total_steps not resolved".into()));
    }
    if step > plan.total_steps {
        return Err(ScheduleError::Schedule(format!(
            "step {step} beyond total_steps {}",
            plan.total_steps
        )));
    }
    let t = step as f64;
    let total = plan.total_steps as f64;
    let cut = plan.warmup_proportion * total;
    if t <= cut {
        Ok(plan.peak_lr * t / cut)
    } else {
        Ok(plan.peak_lr * (total - t) / ((1.0 - plan.warmup_proportion) * total))
    }
}

/// Per-group learning rates: head gets the base rate, each step down the
/// stack multiplies by theta once, embeddings last. The chain is a literal
/// sequence of multiplications so adjacent ratios equal theta exactly.
pub fn group_learning_rates(
    plan: &TrainingPlan,
    base_lr: f64,
    num_layers: usize,
) -> IndexMap<String, f64> {
    let mut rates = IndexMap::new();
    rates.insert("head".to_string(), base_lr);
    let theta = plan.discrimination_rate;
    let mut lr = base_lr;
    for l in (1..=num_layers).rev() {
        lr *= theta;
        rates.insert(format!("encoder.{l}"), lr);
    }
    lr *= theta;
    rates.insert("embeddings".to_string(), lr);
    rates
}

/// Learning rate for one named group.
pub fn layer_lr(
    plan: &TrainingPlan,
    group: &str,
    base_lr: f64,
    num_layers: usize,
) -> Result<f64, ScheduleError> {
    group_learning_rates(plan, base_lr, num_layers)
        .get(group)
        .copied()
        .ok_or_else(|| ScheduleError::Parameter(format!("unknown parameter group {group:?}")))
}

/// Groups still frozen at `step` under gradual unfreezing: initially all but
/// the head, unfreezing top-down one group per `unfreeze_interval` of an
/// epoch. Without gradual unfreezing this is the freeze-last-k complement,
/// or empty.
pub fn frozen_set(
    plan: &TrainingPlan,
    step: usize,
    steps_per_epoch: usize,
    num_layers: usize,
) -> Result<BTreeSet<String>, ScheduleError> {
    if steps_per_epoch == 0 {
        return Err(ScheduleError::Parameter(
            "steps_per_epoch must be positive".into(),
        ));
    }
    if let Some(k) = plan.freeze_last_k {
        let trainable = freeze_mask_last_k(k, num_layers)?;
        return Ok(group_names(num_layers)
            .into_iter()
            .filter(|g| !trainable.contains(g))
            .collect());
    }
    if !plan.gradual_unfreeze {
        return Ok(BTreeSet::new());
    }
    // Unfreeze order after the head: encoder.L .. encoder.1, then embeddings.
    let mut order: Vec<String> = (1..=num_layers)
        .rev()
        .map(|l| format!("encoder.{l}"))
        .collect();
    order.push("embeddings".to_string());
    let boundary = plan.unfreeze_interval * steps_per_epoch as f64;
    let unfrozen = if boundary <= 0.0 {
        order.len()
    } else {
        (((step as f64) + 1e-9) / boundary).floor() as usize
    };
    Ok(order
        .into_iter()
        .skip(unfrozen.min(num_layers + 1))
        .collect())
}

/// Trainable groups when fine-tuning only the last k encoder layers: the
/// head plus encoder.(L-k+1) .. encoder.L. k = 0 trains the head alone.
pub fn freeze_mask_last_k(k: usize, num_layers: usize) -> Result<BTreeSet<String>, ScheduleError> {
    if k > num_layers {
        return Err(ScheduleError::Parameter(format!(
            "k = {k} exceeds {num_layers} encoder layers"
        )));
    }
    let mut trainable = BTreeSet::new();
    trainable.insert("head".to_string());
    for l in num_layers - k + 1..=num_layers {
        trainable.insert(format!("encoder.{l}"));
    }
    Ok(trainable)
}

// ── Adam ────────────────────────────────────────────────────────────

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Per-parameter update count; drives bias correction so parameters
    /// unfrozen late still get a correct first step.
    t: u64,
}

/// First/second moment estimates per parameter plus a global step counter.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: u64,
    moments: IndexMap<String, Moments>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// True if the named parameter has ever been updated.
    pub fn touched(&self, name: &str) -> bool {
        self.moments.get(name).map(|m| m.t > 0).unwrap_or(false)
    }

    pub fn moment_norms(&self, name: &str) -> Option<(f64, f64)> {
        self.moments.get(name).map(|mo| {
            (
                mo.m.iter().map(|x| x * x).sum::<f64>().sqrt(),
                mo.v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            )
        })
    }
}

/// One bias-corrected Adam step over every bound, non-frozen parameter.
///
/// `bound` lists the parameters registered in this step's graph; each one
/// whose group is not frozen must have a gradient. Frozen parameters and
/// their moments stay bit-identical even when gradients exist for them.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut OptimizerState,
    group_lrs: &IndexMap<String, f64>,
    frozen: &BTreeSet<String>,
    bound: &[String],
) -> Result<(), ScheduleError> {
    for name in bound {
        let group = group_of(name);
        if frozen.contains(&group) {
            continue;
        }
        let grad = grads.get(name).ok_or_else(|| {
            ScheduleError::Contract(format!("missing gradient on trainable parameter {name:?}"))
        })?;
        let lr = *group_lrs.get(&group).ok_or_else(|| {
            ScheduleError::Parameter(format!("no learning rate for group {group:?}"))
        })?;
        let param = params
            .get_mut(name)
            .ok_or_else(|| ScheduleError::Contract(format!("unknown parameter {name:?}")))?;
        if grad.len() != param.value.len() {
            return Err(ScheduleError::Contract(format!(
                "gradient length {} vs parameter length {} for {name:?}",
                grad.len(),
                param.value.len()
            )));
        }
        let entry = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                t: 0,
            });
        entry.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(entry.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(entry.t as i32);
        for i in 0..grad.len() {
            let g = grad[i] as f64;
            entry.m[i] = ADAM_BETA1 * entry.m[i] + (1.0 - ADAM_BETA1) * g;
            entry.v[i] = ADAM_BETA2 * entry.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = entry.m[i] / bc1;
            let v_hat = entry.v[i] / bc2;
            let delta = lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            param.value[i] = (param.value[i] as f64 - delta) as Scalar;
        }
    }
    state.step += 1;
    Ok(())
}
