use serde::{Deserialize, Serialize};

use crate::error::{HsaeError, Result};
use crate::hierarchy::{AssignMode, SimilarityMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Partial,
    Full,
    Binary,
    /// Partial assignment that stops updating after `freeze_hierarchy_after`.
    Fixed,
}

impl Topology {
    pub fn assign_mode(self) -> AssignMode {
        match self {
            Topology::Partial | Topology::Fixed => AssignMode::Partial,
            Topology::Full => AssignMode::Full,
            Topology::Binary => AssignMode::Binary,
        }
    }
}

/// How the perturbation rate maps to a substitution probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationSemantics {
    /// A parent's contribution is replaced by its children's with probability `r`.
    Substitute,
    /// `f̃ = z·f + (1 − z)·Σ children` with `z ~ Bernoulli(r)`: replaced with probability `1 − r`.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Strictly increasing dictionary sizes, coarsest first.
    pub dict_sizes: Vec<usize>,
    pub target_l0: f64,
    /// Weight `ρ` of the parent-children constraint loss.
    pub constraint_weight: f64,
    /// Perturbation rate `r`.
    pub perturbation_rate: f64,
    pub perturbation_semantics: PerturbationSemantics,
    /// Gradient steps between hierarchy updates.
    pub hierarchy_update_interval: u64,
    pub exclusion_quantile: f64,
    pub similarity: SimilarityMethod,
    pub topology: Topology,
    /// Hierarchy stays fixed once an update at or after this step has run.
    /// `Fixed` topology defaults it to the first update.
    pub freeze_hierarchy_after: Option<u64>,
    /// Decay rate `η` of the target L0 trajectory.
    pub controller_decay: f64,
    pub l0_ema_momentum: f64,
    /// Multiplicative sparsity-weight step `κ`.
    pub controller_gain: f64,
    pub lambda_max: f64,
    pub coactivation_momentum: f64,
    /// Straight-through kernel bandwidth `ε`.
    pub bandwidth: f64,
    pub lr_base: f64,
    pub warmup_fraction: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub theta_init: f32,
    pub lambda_init: f32,
    /// Steps without activation after which a feature is resampled.
    pub dead_threshold: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dict_sizes: vec![2048, 4096, 8192, 16384],
            target_l0: 50.0,
            constraint_weight: 0.01,
            perturbation_rate: 0.05,
            perturbation_semantics: PerturbationSemantics::Substitute,
            hierarchy_update_interval: 5000,
            exclusion_quantile: 0.2,
            similarity: SimilarityMethod::Encoder,
            topology: Topology::Partial,
            freeze_hierarchy_after: None,
            controller_decay: 0.001,
            l0_ema_momentum: 0.999,
            controller_gain: 0.001,
            lambda_max: 10.0,
            coactivation_momentum: 0.999,
            bandwidth: 0.001,
            lr_base: 3e-4,
            warmup_fraction: 0.1,
            adam_beta1: 0.0,
            adam_beta2: 0.995,
            adam_eps: 1e-8,
            batch_size: 1024,
            total_steps: 100_000,
            seed: 0,
            theta_init: 0.001,
            lambda_init: 1e-4,
            dead_threshold: 1000,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn num_levels(&self) -> usize {
        self.dict_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HsaeError::InvalidArgument(m));
        if self.dict_sizes.is_empty() {
            return bad("dict_sizes must list at least one level".into());
        }
        if self.dict_sizes[0] == 0 || self.dict_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "dict_sizes must be positive and strictly increasing, got {:?}",
                self.dict_sizes
            ));
        }
        let unit = |name: &str, v: f64| -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(HsaeError::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("perturbation_rate", self.perturbation_rate)?;
        unit("warmup_fraction", self.warmup_fraction)?;
        unit("adam_beta1", self.adam_beta1)?;
        for (name, v) in [
            ("l0_ema_momentum", self.l0_ema_momentum),
            ("coactivation_momentum", self.coactivation_momentum),
            ("adam_beta2", self.adam_beta2),
            ("exclusion_quantile", self.exclusion_quantile),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("target_l0", self.target_l0),
            ("constraint_weight", self.constraint_weight),
            ("controller_decay", self.controller_decay),
            ("controller_gain", self.controller_gain),
            ("lambda_max", self.lambda_max),
            ("lr_base", self.lr_base),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.bandwidth > 0.0) || !(self.adam_eps > 0.0) {
            return bad("bandwidth and adam_eps must be > 0".into());
        }
        if self.batch_size == 0 || self.hierarchy_update_interval == 0 {
            return bad("batch_size and hierarchy_update_interval must be >= 1".into());
        }
        if !(self.theta_init >= 0.0) || !(self.lambda_init >= 0.0) {
            return bad("theta_init and lambda_init must be >= 0".into());
        }
        if self.lambda_init as f64 > self.lambda_max {
            return bad("lambda_init exceeds lambda_max".into());
        }
        Ok(())
    }

    /// Probability that a feature with children is substituted in a step.
    pub fn substitution_probability(&self) -> f64 {
        match self.perturbation_semantics {
            PerturbationSemantics::Substitute => self.perturbation_rate,
            PerturbationSemantics::Literal => 1.0 - self.perturbation_rate,
        }
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).round() as u64
    }

    /// Step at which the hierarchy stops updating, if ever.
    pub fn freeze_step(&self) -> Option<u64> {
        match (self.freeze_hierarchy_after, self.topology) {
            (Some(s), _) => Some(s),
            (None, Topology::Fixed) => Some(self.hierarchy_update_interval),
            (None, _) => None,
        }
    }

    /// Learning rate for zero-based `step`: linear warm-up from zero, then
    /// cosine decay to zero at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        lr_schedule(step, self.total_steps, self.warmup_steps(), self.lr_base)
    }
}

pub fn lr_schedule(step: u64, total: u64, warmup: u64, lr_base: f64) -> f64 {
    if step < warmup {
        return lr_base * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    lr_base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
