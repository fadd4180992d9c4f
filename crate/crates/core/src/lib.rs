//! Hierarchical sparse autoencoders: a ladder of JumpReLU dictionaries of
//! increasing size, tied together by a learned parent-child forest.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod export;
pub mod hierarchy;
pub mod metrics;
pub mod numerics;
pub mod sae;
pub mod seed;
pub mod training;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use error::{HsaeError, Result};
pub use metrics::MetricsReport;
pub use hierarchy::{validate_tree, AssignMode, CoactivationStats, Hierarchy, SimilarityMethod};
pub use numerics::Matrix;
pub use sae::{LevelForward, SaeLevel};
pub use training::{TrainConfig, TrainMode, Trainer};
