use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HsaeError, Result};
use crate::numerics::{dot, norm, random_unit_vector, AdamState, Matrix};
use crate::sae::{FeatureSets, SaeLevel};

/// Scale of a resampled encoder row relative to the mean live encoder norm.
pub const RESAMPLE_ENCODER_SCALE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerParams {
    pub target_l0: f64,
    /// Momentum of the L0 moving average.
    pub momentum: f64,
    /// Decay rate `η` of the desired trajectory toward the target.
    pub decay: f64,
    /// Multiplicative step `κ`.
    pub gain: f64,
    pub lambda_max: f64,
}

/// Per-level feedback loop steering the sparsity weight toward a target L0.
///
/// The moving average `s` of the batch L0 should move by
/// `Δ* = −η (s − target)` per step. If it rose faster (or fell slower)
/// than that, `λ` is multiplied by `1 + κ`; if it fell faster, divided by
/// `1 + κ`; on an exact match it is left alone. `λ` stays in `[0, λ_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SparsityController {
    pub l0_ema: f64,
    pub prev_l0_ema: f64,
    pub initialized: bool,
}

impl SparsityController {
    /// Folds in one batch L0 and returns the new sparsity weight. The first
    /// observation seeds the moving average.
    pub fn step(&mut self, batch_l0: f64, lambda: f64, p: &ControllerParams) -> f64 {
        if !self.initialized {
            self.l0_ema = batch_l0;
            self.initialized = true;
        }
        self.prev_l0_ema = self.l0_ema;
        self.l0_ema = p.momentum * self.prev_l0_ema + (1.0 - p.momentum) * batch_l0;
        let observed = self.l0_ema - self.prev_l0_ema;
        let desired = -p.decay * (self.l0_ema - p.target_l0);
        let next = if observed > desired {
            lambda * (1.0 + p.gain)
        } else if observed < desired {
            lambda / (1.0 + p.gain)
        } else {
            lambda
        };
        next.clamp(0.0, p.lambda_max)
    }
}

/// Counts, per feature, consecutive steps without any activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadFeatureTracker {
    pub steps_since_active: Vec<u64>,
    pub threshold: u64,
}

impl DeadFeatureTracker {
    pub fn new(n: usize, threshold: u64) -> Self {
        DeadFeatureTracker {
            steps_since_active: vec![0; n],
            threshold,
        }
    }

    pub fn observe(&mut self, active: &FeatureSets) {
        let mut fired = vec![false; self.steps_since_active.len()];
        for b in 0..active.rows() {
            for &i in active.row(b) {
                fired[i as usize] = true;
            }
        }
        for (c, f) in self.steps_since_active.iter_mut().zip(fired) {
            *c = if f { 0 } else { *c + 1 };
        }
    }

    pub fn dead(&self) -> Vec<usize> {
        if self.threshold == 0 {
            return Vec::new();
        }
        (0..self.steps_since_active.len())
            .filter(|&i| self.steps_since_active[i] >= self.threshold)
            .collect()
    }

    pub fn reset(&mut self, i: usize) {
        self.steps_since_active[i] = 0;
    }
}

/// Adam state of one level's three parameter groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelOptimizer {
    pub encoder: AdamState,
    pub decoder: AdamState,
    pub thresholds: AdamState,
}

impl LevelOptimizer {
    pub fn new(n: usize, d: usize, beta1: f64, beta2: f64, eps: f64, lr_base: f64) -> Self {
        LevelOptimizer {
            encoder: AdamState::new(n, d, beta1, beta2, eps, lr_base),
            decoder: AdamState::new(n, d, beta1, beta2, eps, lr_base),
            thresholds: AdamState::new(n, 1, beta1, beta2, eps, lr_base),
        }
    }

    pub fn reset_feature(&mut self, i: usize) {
        self.encoder.reset_row(i);
        self.decoder.reset_row(i);
        self.thresholds.reset_row(i);
    }
}

/// Re-initializes every dead feature of `level` from the batch residuals.
///
/// Candidate rows are ranked by residual norm; each dead feature (ascending
/// index) takes the next candidate whose residual has a positive inner
/// product with its input, so the new feature responds to that input. The
/// decoder becomes the unit residual, the encoder the same direction scaled
/// to a fifth of the mean live encoder norm, the threshold `theta_init`,
/// and the feature's optimizer moments are cleared. With no usable
/// candidate a random unit direction is used. Returns the resampled indices.
pub fn dead_feature_resample<R: Rng + ?Sized>(
    level: &mut SaeLevel,
    optim: &mut LevelOptimizer,
    tracker: &mut DeadFeatureTracker,
    x: &Matrix,
    recon: &Matrix,
    theta_init: f32,
    rng: &mut R,
) -> Result<Vec<usize>> {
    x.check_same_shape(recon, "dead_feature_resample")?;
    if x.cols() != level.input_dim() {
        return Err(HsaeError::dim("dead_feature_resample", level.input_dim(), x.cols()));
    }
    let dead = tracker.dead();
    if dead.is_empty() {
        return Ok(dead);
    }
    let d = x.cols();
    let mut is_dead = vec![false; level.dict_size()];
    dead.iter().for_each(|&i| is_dead[i] = true);
    let live: Vec<f64> = (0..level.dict_size())
        .filter(|&i| !is_dead[i])
        .map(|i| norm(level.encoder.row(i)))
        .collect();
    let enc_norm = if live.is_empty() {
        1.0
    } else {
        live.iter().sum::<f64>() / live.len() as f64
    } * RESAMPLE_ENCODER_SCALE;

    let mut candidates: Vec<(usize, f64, Vec<f32>)> = (0..x.rows())
        .filter_map(|b| {
            let r: Vec<f32> = x.row(b).iter().zip(recon.row(b)).map(|(a, c)| a - c).collect();
            let rn = norm(&r);
            (rn > 1e-12 && dot(&r, x.row(b)) > 0.0).then_some((b, rn, r))
        })
        .collect();
    candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    let mut next = candidates.into_iter();

    for &i in &dead {
        let dir: Vec<f32> = match next.next() {
            Some((_, rn, r)) => r.iter().map(|v| (*v as f64 / rn) as f32).collect(),
            None => random_unit_vector(d, rng),
        };
        level.decoder.row_mut(i).copy_from_slice(&dir);
        for (e, v) in level.encoder.row_mut(i).iter_mut().zip(&dir) {
            *e = (*v as f64 * enc_norm) as f32;
        }
        level.thresholds[i] = theta_init;
        optim.reset_feature(i);
        tracker.reset(i);
    }
    Ok(dead)
}
