use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::shard::{self, ShardHeader};
use crate::error::{HsaeError, Result};
use crate::numerics::{norm, Matrix};

pub const MANIFEST_SCHEMA: &str = "hsae-manifest/1";

/// Rows used to calibrate the normalization scaler.
pub const CALIBRATION_ROWS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub rows: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub d: usize,
    pub total_rows: u64,
    /// Multiplier applied to every loaded row.
    pub scaler: f64,
    pub source: String,
    pub seed: u64,
    pub shards: Vec<ShardEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(d: usize, scaler: f64, source: impl Into<String>, seed: u64, shards: Vec<ShardEntry>) -> Self {
        Manifest {
            schema: MANIFEST_SCHEMA.into(),
            d,
            total_rows: shards.iter().map(|s| s.rows).sum(),
            scaler,
            source: source.into(),
            seed,
            shards,
            base_dir: PathBuf::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != MANIFEST_SCHEMA {
            return Err(HsaeError::Schema {
                expected: MANIFEST_SCHEMA.into(),
                found: self.schema.clone(),
            });
        }
        let sum: u64 = self.shards.iter().map(|s| s.rows).sum();
        if sum != self.total_rows {
            return Err(HsaeError::Data(format!(
                "manifest lists {sum} shard rows but total_rows = {}",
                self.total_rows
            )));
        }
        if !(self.scaler > 0.0) || !self.scaler.is_finite() {
            return Err(HsaeError::Data(format!("scaler must be > 0, got {}", self.scaler)));
        }
        if self.d == 0 {
            return Err(HsaeError::Data("manifest d must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HsaeError::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| HsaeError::io(path, e))
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn shard_path(&self, i: usize) -> PathBuf {
        self.base_dir.join(&self.shards[i].path)
    }

    /// Opens every shard and checks its header against the manifest.
    pub fn open(&self) -> Result<ShardSet> {
        self.validate()?;
        let mut headers = Vec::with_capacity(self.shards.len());
        for (i, entry) in self.shards.iter().enumerate() {
            let p = self.shard_path(i);
            let h = shard::read_header(&p)?;
            if h.d as usize != self.d || h.row_count != entry.rows {
                return Err(HsaeError::Data(format!(
                    "shard {} has d={} rows={}, manifest says d={} rows={}",
                    p.display(),
                    h.d,
                    h.row_count,
                    self.d,
                    entry.rows
                )));
            }
            headers.push((p, h));
        }
        Ok(ShardSet {
            d: self.d,
            scaler: self.scaler,
            headers,
        })
    }
}

/// `c = √d / mean‖x‖₂`, so that scaled rows have mean norm `√d`.
pub fn compute_scaler(sample: &Matrix) -> Result<f64> {
    if sample.rows() == 0 {
        return Err(HsaeError::InvalidArgument("scaler needs at least one row".into()));
    }
    let mean = (0..sample.rows()).map(|b| norm(sample.row(b))).sum::<f64>() / sample.rows() as f64;
    if mean <= 0.0 {
        return Err(HsaeError::Data("calibration sample is all zeros".into()));
    }
    Ok((sample.cols() as f64).sqrt() / mean)
}

/// A random-access source of (already scaled) activation rows.
pub trait RowSource {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Rows `start..start + count`, scaled.
    fn load(&self, start: usize, count: usize) -> Result<Matrix>;
}

/// Rows held in memory with a scaler applied on load.
#[derive(Debug, Clone)]
pub struct InMemoryRows {
    rows: Matrix,
    scaler: f32,
}

impl InMemoryRows {
    pub fn new(rows: Matrix, scaler: f64) -> Self {
        InMemoryRows {
            rows,
            scaler: scaler as f32,
        }
    }
}

impl RowSource for InMemoryRows {
    fn dim(&self) -> usize {
        self.rows.cols()
    }

    fn len(&self) -> usize {
        self.rows.rows()
    }

    fn load(&self, start: usize, count: usize) -> Result<Matrix> {
        let d = self.rows.cols();
        let slice = &self.rows.as_slice()[start * d..(start + count) * d];
        Matrix::from_vec(count, d, slice.iter().map(|v| v * self.scaler).collect())
    }
}

/// The shards of a manifest, read lazily.
#[derive(Debug, Clone)]
pub struct ShardSet {
    d: usize,
    scaler: f64,
    headers: Vec<(PathBuf, ShardHeader)>,
}

impl RowSource for ShardSet {
    fn dim(&self) -> usize {
        self.d
    }

    fn len(&self) -> usize {
        self.headers.iter().map(|(_, h)| h.row_count as usize).sum()
    }

    fn load(&self, start: usize, count: usize) -> Result<Matrix> {
        let mut data = Vec::with_capacity(count * self.d);
        let (mut pos, end) = (start, start + count);
        let mut shard_start = 0usize;
        for (path, h) in &self.headers {
            let rows = h.row_count as usize;
            let shard_end = shard_start + rows;
            if pos < shard_end && pos < end {
                let take = end.min(shard_end) - pos;
                let m = shard::read_rows(path, h, pos - shard_start, take)?;
                data.extend(m.into_vec());
                pos += take;
            }
            shard_start = shard_end;
            if pos >= end {
                break;
            }
        }
        if pos < end {
            return Err(HsaeError::Data(format!(
                "requested rows up to {end} but shards hold {shard_start}"
            )));
        }
        let c = self.scaler as f32;
        data.iter_mut().for_each(|v| *v *= c);
        Matrix::from_vec(count, self.d, data)
    }
}
