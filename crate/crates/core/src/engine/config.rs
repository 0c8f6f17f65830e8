use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{OptimizerHyper, OptimizerKind};
use crate::segmenter::DEFAULT_SIGMA_FRACTION;

/// How a session turns clicks into masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Pretrained model, all clicks in one prompt, no learning.
    Baseline,
    /// One model adapted on every click.
    NaiveTta,
    /// Click routing and mask union, no learning.
    DcOnly,
    /// Routing, per-unit adaptation, mask union, merging and a final fine-tune.
    DcTta,
    /// Routing and per-unit adaptation; the final mask is the union of unit masks.
    DcTtaNoMerge,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Baseline, Mode::NaiveTta, Mode::DcOnly, Mode::DcTtaNoMerge, Mode::DcTta];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::NaiveTta => "naive_tta",
            Mode::DcOnly => "dc_only",
            Mode::DcTta => "dc_tta",
            Mode::DcTtaNoMerge => "dc_tta_no_merge",
        }
    }

    /// Modes that route positive clicks into units.
    pub fn uses_units(self) -> bool {
        matches!(self, Mode::DcOnly | Mode::DcTta | Mode::DcTtaNoMerge)
    }

    /// Modes that take gradient steps.
    pub fn adapts(self) -> bool {
        matches!(self, Mode::NaiveTta | Mode::DcTta | Mode::DcTtaNoMerge)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

pub const DEFAULT_GAMMA: f64 = 0.7;
pub const DEFAULT_ETA: f64 = 3e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Task-vector scaling; units beyond the global one get `gamma^2`.
    pub gamma: f64,
    /// Learning rate for every adaptation step.
    pub eta: f64,
    pub optimizer: OptimizerKind,
    pub steps_per_event: usize,
    /// A positive click joins a unit only when the probe IoU is strictly above this.
    pub assign_iou_threshold: f64,
    pub sigma_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let h = OptimizerHyper::default();
        Self {
            gamma: DEFAULT_GAMMA,
            eta: DEFAULT_ETA,
            optimizer: OptimizerKind::AdamW,
            steps_per_event: 1,
            assign_iou_threshold: 0.0,
            sigma_fraction: DEFAULT_SIGMA_FRACTION,
            beta1: h.beta1,
            beta2: h.beta2,
            epsilon: h.eps,
            weight_decay: h.weight_decay,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return fail(format!("eta must be positive, got {}", self.eta));
        }
        if self.steps_per_event == 0 {
            return fail("steps_per_event must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.assign_iou_threshold) {
            return fail(format!("assign_iou_threshold {} outside [0, 1)", self.assign_iou_threshold));
        }
        if !(self.sigma_fraction.is_finite() && self.sigma_fraction > 0.0) {
            return fail(format!("sigma_fraction must be positive, got {}", self.sigma_fraction));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }

    pub fn hyper(&self) -> OptimizerHyper {
        OptimizerHyper {
            lr: self.eta,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }

    /// Applies a JSON object of overrides on top of `self`.
    pub fn with_overrides(&self, overrides: &serde_json::Value) -> Result<Self> {
        let mut merged = serde_json::to_value(self)?;
        match (merged.as_object_mut(), overrides) {
            (Some(base), serde_json::Value::Object(o)) => {
                for (k, v) in o {
                    base.insert(k.clone(), v.clone());
                }
            }
            (_, serde_json::Value::Null) => {}
            _ => return Err(Error::Config("config overrides must be a JSON object".into())),
        }
        let cfg: EngineConfig =
            serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
