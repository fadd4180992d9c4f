//! Activation storage, normalization, batch streaming and synthetic data.

pub mod manifest;
pub mod shard;
pub mod stream;
pub mod synthetic;

pub use manifest::{compute_scaler, InMemoryRows, Manifest, RowSource, ShardEntry, ShardSet};
pub use shard::{read_shard, write_shard, ShardHeader};
pub use stream::{BatchStream, StreamCursor};
pub use synthetic::{synthetic_generate, ActiveNode, ForestSpec, GeneratedDataset, SyntheticForest};
