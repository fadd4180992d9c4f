use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::controller::{dead_feature_resample, ControllerParams, DeadFeatureTracker, LevelOptimizer, SparsityController};
use super::objective::{hsae_objective, LossBreakdown, SubstitutionMask};
use crate::data::{BatchStream, RowSource};
use crate::error::{HsaeError, Result};
use crate::hierarchy::{assign_parents, similarity_matrix, CoactivationStats, Hierarchy, SimilarityMethod};
use crate::numerics::{normalize_rows_in_place, Matrix};
use crate::sae::SaeLevel;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Joint objective with perturbation, constraint, and alternating
    /// hierarchy updates.
    Hsae,
    /// Independent levels; the hierarchy is built once after training.
    Baseline,
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// One-based level, 1 = coarsest.
    pub level: usize,
    pub mse: f64,
    pub l0: f64,
    pub lambda: f64,
    pub lr: f64,
    /// Constraint loss between this level and the next; absent for the finest level.
    pub pc_loss: Option<f64>,
    pub perturbed_count: usize,
}

#[derive(Debug, Clone)]
pub struct StepMetrics {
    /// Zero-based index of the step just taken.
    pub step: u64,
    pub lr: f64,
    pub breakdown: LossBreakdown,
    /// Per level, features resampled this step.
    pub resampled: Vec<Vec<usize>>,
    pub hierarchy_updated: bool,
}

impl StepMetrics {
    pub fn records(&self) -> Vec<StepRecord> {
        let b = &self.breakdown;
        b.levels
            .iter()
            .enumerate()
            .map(|(k, t)| StepRecord {
                step: self.step,
                level: k + 1,
                mse: t.mse,
                l0: t.l0,
                lambda: t.lambda,
                lr: self.lr,
                pc_loss: b.pc.get(k).copied(),
                perturbed_count: t.perturbed,
            })
            .collect()
    }
}

/// Complete mutable training state; everything needed to resume exactly.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub mode: TrainMode,
    pub levels: Vec<SaeLevel>,
    pub optim: Vec<LevelOptimizer>,
    pub controllers: Vec<SparsityController>,
    pub trackers: Vec<DeadFeatureTracker>,
    pub hierarchy: Hierarchy,
    /// Maintained only when the similarity method needs it.
    pub coactivation: Option<CoactivationStats>,
    pub perturb_rng: ChaCha8Rng,
    /// Per level; also supplies replacement directions for degenerate decoder rows.
    pub resample_rngs: Vec<ChaCha8Rng>,
    /// Gradient steps taken so far.
    pub step: u64,
}

/// Seed of the parameters of a level with `n` features. Depends only on the
/// run seed and `n`, so a level initializes identically whether it is trained
/// alone or inside a ladder.
pub fn level_seed(seed: u64, n: usize) -> u64 {
    derive_seed(seed, "init", &[n as u64])
}

/// The batch stream a run with `config` reads from.
pub fn training_stream<S: RowSource>(config: &TrainConfig, source: S) -> Result<BatchStream<S>> {
    BatchStream::new(source, config.batch_size, derive_seed(config.seed, "data", &[]), None)
}

impl Trainer {
    pub fn new(config: TrainConfig, mode: TrainMode, d: usize) -> Result<Self> {
        config.validate()?;
        let levels = config
            .dict_sizes
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                SaeLevel::with_init(k, d, n, level_seed(config.seed, n), config.theta_init, config.lambda_init)
            })
            .collect::<Result<Vec<_>>>()?;
        let optim = config
            .dict_sizes
            .iter()
            .map(|&n| LevelOptimizer::new(n, d, config.adam_beta1, config.adam_beta2, config.adam_eps, config.lr_base))
            .collect();
        let nl = config.num_levels();
        Ok(Trainer {
            optim,
            controllers: vec![SparsityController::default(); nl],
            trackers: config
                .dict_sizes
                .iter()
                .map(|&n| DeadFeatureTracker::new(n, config.dead_threshold))
                .collect(),
            hierarchy: Hierarchy::empty(&config.dict_sizes),
            coactivation: (config.similarity == SimilarityMethod::Coactivation)
                .then(|| CoactivationStats::new(&config.dict_sizes, config.coactivation_momentum)),
            perturb_rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "perturb", &[])),
            resample_rngs: config
                .dict_sizes
                .iter()
                .map(|&n| ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "resample", &[n as u64])))
                .collect(),
            step: 0,
            levels,
            mode,
            config,
        })
    }

    pub fn dict_sizes(&self) -> &[usize] {
        &self.config.dict_sizes
    }

    fn controller_params(&self) -> ControllerParams {
        ControllerParams {
            target_l0: self.config.target_l0,
            momentum: self.config.l0_ema_momentum,
            decay: self.config.controller_decay,
            gain: self.config.controller_gain,
            lambda_max: self.config.lambda_max,
        }
    }

    /// `(ρ, substitution probability)` in effect for this run.
    pub fn effective_weights(&self) -> (f64, f64) {
        match self.mode {
            TrainMode::Hsae => (self.config.constraint_weight, self.config.substitution_probability()),
            TrainMode::Baseline => (0.0, 0.0),
        }
    }

    /// One gradient step on `x`, followed by any bookkeeping that is due:
    /// sparsity control, dead-feature resampling, and (every K steps in HSAE
    /// mode) a hierarchy update.
    pub fn train_step(&mut self, x: &Matrix) -> Result<StepMetrics> {
        let d = self.levels[0].input_dim();
        if x.cols() != d {
            return Err(HsaeError::dim("train_step", d, x.cols()));
        }
        let cfg = &self.config;
        let lr = cfg.lr_at(self.step);
        let (rho, p) = self.effective_weights();
        let mask = if p > 0.0 {
            SubstitutionMask::sample(&self.hierarchy, p, &mut self.perturb_rng)?
        } else {
            SubstitutionMask::none(&cfg.dict_sizes)
        };
        let out = hsae_objective(&self.levels, &self.hierarchy, x, rho, cfg.bandwidth, &mask, true)?;

        let params = self.controller_params();
        let theta_init = self.config.theta_init;
        let mut resampled = Vec::with_capacity(self.levels.len());
        for (k, grads) in out.grads.iter().enumerate() {
            let level = &mut self.levels[k];
            let opt = &mut self.optim[k];
            opt.encoder.update(level.encoder.as_mut_slice(), grads.encoder.as_slice(), lr)?;
            opt.decoder.update(level.decoder.as_mut_slice(), grads.decoder.as_slice(), lr)?;
            opt.thresholds.update(&mut level.thresholds, &grads.thresholds, lr)?;
            normalize_rows_in_place(&mut level.decoder, &mut self.resample_rngs[k]);
            level.clamp_thresholds();
            let lambda = self.controllers[k].step(out.breakdown.levels[k].l0, level.lambda as f64, &params);
            level.lambda = lambda as f32;
        }
        if let Some(stats) = &mut self.coactivation {
            let sets: Vec<_> = out.forwards.iter().map(|f| &f.active).collect();
            stats.update(&sets)?;
        }
        for k in 0..self.levels.len() {
            self.trackers[k].observe(&out.forwards[k].active);
            resampled.push(dead_feature_resample(
                &mut self.levels[k],
                &mut self.optim[k],
                &mut self.trackers[k],
                x,
                &out.forwards[k].recon,
                theta_init,
                &mut self.resample_rngs[k],
            )?);
        }

        let taken = self.step;
        self.step += 1;
        let mut updated = false;
        if self.mode == TrainMode::Hsae
            && self.step % self.config.hierarchy_update_interval == 0
            && !self.hierarchy.frozen
        {
            self.update_hierarchy()?;
            updated = true;
            if self.config.freeze_step().is_some_and(|s| self.step >= s) {
                self.hierarchy.frozen = true;
            }
        }
        Ok(StepMetrics {
            step: taken,
            lr,
            breakdown: out.breakdown,
            resampled,
            hierarchy_updated: updated,
        })
    }

    /// Rebuilds every parent array from the current parameters and swaps
    /// the new forest in as a whole.
    pub fn update_hierarchy(&mut self) -> Result<()> {
        let frozen = self.hierarchy.frozen;
        self.hierarchy = build_hierarchy(&self.levels, self.coactivation.as_ref(), &self.config)?;
        self.hierarchy.frozen = frozen;
        Ok(())
    }

    /// Runs steps until `until` steps have been taken in total, calling
    /// `on_step` after each one.
    pub fn run_until<S, F>(&mut self, stream: &mut BatchStream<S>, until: u64, mut on_step: F) -> Result<()>
    where
        S: RowSource,
        F: FnMut(&Trainer, &StepMetrics) -> Result<()>,
    {
        while self.step < until {
            let batch = stream
                .next_batch()?
                .ok_or_else(|| HsaeError::Data("batch stream ended".into()))?;
            let m = self.train_step(&batch)?;
            on_step(self, &m)?;
        }
        Ok(())
    }

    /// Post-hoc hierarchy for baseline runs; a no-op in HSAE mode.
    pub fn finish(&mut self) -> Result<()> {
        if self.mode == TrainMode::Baseline {
            self.update_hierarchy()?;
        }
        Ok(())
    }
}

/// Assigns parents for every adjacent pair with the configured similarity,
/// quantile, and topology.
pub fn build_hierarchy(
    levels: &[SaeLevel],
    stats: Option<&CoactivationStats>,
    config: &TrainConfig,
) -> Result<Hierarchy> {
    let sizes: Vec<usize> = levels.iter().map(SaeLevel::dict_size).collect();
    let empty;
    let stats = match stats {
        Some(s) => s,
        None if config.similarity == SimilarityMethod::Coactivation => {
            return Err(HsaeError::InvalidArgument(
                "coactivation similarity requires coactivation statistics".into(),
            ))
        }
        None => {
            empty = CoactivationStats::new(&[], config.coactivation_momentum);
            &empty
        }
    };
    let parents = (0..sizes.len().saturating_sub(1))
        .map(|k| {
            let sim = similarity_matrix(levels, stats, config.similarity, k)?;
            assign_parents(&sim, config.exclusion_quantile, config.topology.assign_mode())
        })
        .collect::<Result<Vec<_>>>()?;
    Hierarchy::from_parents(&sizes, parents)
}

/// Trains the full model with alternating hierarchy updates.
pub fn run_training<S, F>(config: &TrainConfig, source: S, mut on_record: F) -> Result<Trainer>
where
    S: RowSource,
    F: FnMut(&StepRecord),
{
    run_mode(config, TrainMode::Hsae, source, &mut on_record)
}

/// Trains every level independently, then builds the hierarchy once with
/// the same similarity method, quantile, and topology.
pub fn train_baseline<S, F>(config: &TrainConfig, source: S, mut on_record: F) -> Result<Trainer>
where
    S: RowSource,
    F: FnMut(&StepRecord),
{
    run_mode(config, TrainMode::Baseline, source, &mut on_record)
}

fn run_mode<S: RowSource>(
    config: &TrainConfig,
    mode: TrainMode,
    source: S,
    on_record: &mut dyn FnMut(&StepRecord),
) -> Result<Trainer> {
    let d = source.dim();
    let mut stream = training_stream(config, source)?;
    let mut trainer = Trainer::new(config.clone(), mode, d)?;
    trainer.run_until(&mut stream, config.total_steps, |_, m| {
        m.records().iter().for_each(&mut *on_record);
        Ok(())
    })?;
    trainer.finish()?;
    Ok(trainer)
}
