//! Objective assembly, optimization loop, sparsity control, and dead-feature handling.

pub mod config;
pub mod controller;
pub mod objective;
pub mod trainer;

pub use config::{lr_schedule, PerturbationSemantics, Topology, TrainConfig};
pub use controller::{
    dead_feature_resample, ControllerParams, DeadFeatureTracker, LevelOptimizer, SparsityController,
};
pub use objective::{
    hsae_objective, hsae_total_loss, pc_loss, perturb_contributions, LevelTerms, LossBreakdown, ObjectiveOutput,
    SubstitutionMask,
};
pub use trainer::{
    build_hierarchy, level_seed, run_training, train_baseline, training_stream, StepMetrics, StepRecord, TrainMode,
    Trainer,
};
