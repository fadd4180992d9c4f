//! Planted concept forests and the activations they generate.
//!
//! Every node of the forest owns a unit direction. A row is produced by
//! activating each root with probability `p_root`, each child of an active
//! node with probability `p_child` (children of inactive nodes stay off),
//! summing `α·direction` over active nodes with `α ~ U[coeff_lo, coeff_hi]`,
//! and adding isotropic Gaussian noise. A child's direction is drawn at a
//! fixed cosine `child_alignment` from its parent's.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{compute_scaler, Manifest, ShardEntry, CALIBRATION_ROWS};
use super::shard::write_shard;
use crate::error::{HsaeError, Result};
use crate::numerics::{self, Matrix};
use crate::seed::derive_seed;

pub const TRUTH_SCHEMA: &str = "hsae-truth/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestSpec {
    pub d: usize,
    pub roots: usize,
    pub branching: usize,
    /// Number of levels, roots included.
    pub depth: usize,
    pub p_root: f64,
    pub p_child: f64,
    pub coeff_lo: f64,
    pub coeff_hi: f64,
    pub noise_sigma: f64,
    /// Cosine between each child's direction and its parent's.
    pub child_alignment: f64,
}

impl Default for ForestSpec {
    fn default() -> Self {
        ForestSpec {
            d: 64,
            roots: 8,
            branching: 3,
            depth: 3,
            p_root: 0.15,
            p_child: 0.6,
            coeff_lo: 0.5,
            coeff_hi: 1.5,
            noise_sigma: 0.05,
            child_alignment: 0.5,
        }
    }
}

impl ForestSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HsaeError::InvalidArgument(m));
        if self.d == 0 || self.roots == 0 || self.branching == 0 || self.depth == 0 {
            return bad("d, roots, branching and depth must all be >= 1".into());
        }
        for (name, p) in [("p_root", self.p_root), ("p_child", self.p_child)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.coeff_lo >= 0.0 && self.coeff_lo <= self.coeff_hi && self.coeff_hi.is_finite()) {
            return bad(format!(
                "coefficient range must satisfy 0 <= lo <= hi, got [{}, {}]",
                self.coeff_lo, self.coeff_hi
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..1.0).contains(&self.child_alignment) {
            return bad(format!("child_alignment must lie in [0, 1), got {}", self.child_alignment));
        }
        if self.d < 2 && self.depth > 1 && self.child_alignment < 1.0 {
            return bad("child directions need d >= 2".into());
        }
        Ok(())
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|k| self.roots * self.branching.pow(k as u32))
            .collect()
    }
}

/// Ground truth: directions and parent arrays of the planted forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticForest {
    pub schema: String,
    pub spec: ForestSpec,
    pub seed: u64,
    pub level_sizes: Vec<usize>,
    /// `directions[k]` is `level_sizes[k] × d`, unit rows.
    pub directions: Vec<Matrix>,
    /// `parents[k][j]`: parent in level `k` of node `j` of level `k + 1`.
    pub parents: Vec<Vec<Option<usize>>>,
}

/// One active latent node in a generated row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveNode {
    pub level: usize,
    pub node: usize,
    pub coeff: f32,
}

impl SyntheticForest {
    pub fn build(spec: ForestSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let sizes = spec.level_sizes();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "forest", &[]));
        let d = spec.d;
        let a = spec.child_alignment;
        let mut directions: Vec<Matrix> = Vec::with_capacity(sizes.len());
        let mut parents = Vec::new();
        for (k, &n) in sizes.iter().enumerate() {
            let mut data = Vec::with_capacity(n * d);
            let mut par = Vec::with_capacity(n);
            for j in 0..n {
                if k == 0 {
                    data.extend(numerics::random_unit_vector(d, &mut rng));
                    continue;
                }
                let p = j / spec.branching;
                par.push(Some(p));
                let u = directions[k - 1].row(p);
                // Component orthogonal to the parent, then mix at cosine `a`.
                let mut v = numerics::random_unit_vector(d, &mut rng);
                loop {
                    let proj = numerics::dot(&v, u);
                    v.iter_mut().zip(u).for_each(|(x, y)| *x -= (proj * *y as f64) as f32);
                    if numerics::normalize_in_place(&mut v) {
                        break;
                    }
                    v = numerics::random_unit_vector(d, &mut rng);
                }
                let s = (1.0 - a * a).sqrt();
                let mut c: Vec<f32> = u
                    .iter()
                    .zip(&v)
                    .map(|(x, y)| (a * *x as f64 + s * *y as f64) as f32)
                    .collect();
                numerics::normalize_in_place(&mut c);
                data.extend(c);
            }
            directions.push(Matrix::from_vec(n, d, data)?);
            if k > 0 {
                parents.push(par);
            }
        }
        Ok(SyntheticForest {
            schema: TRUTH_SCHEMA.into(),
            spec,
            seed,
            level_sizes: sizes,
            directions,
            parents,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn node_count(&self) -> usize {
        self.level_sizes.iter().sum()
    }

    /// Edges `(parent_level, parent, child)`.
    pub fn edges(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (k, ps) in self.parents.iter().enumerate() {
            for (j, p) in ps.iter().enumerate() {
                if let Some(p) = p {
                    out.push((k, *p, j));
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Samples `n_rows` raw (unscaled) rows with their latent activations.
    /// `(forest, seed)` fixes the output bit for bit.
    pub fn sample(&self, n_rows: usize, seed: u64) -> Result<(Matrix, Vec<Vec<ActiveNode>>)> {
        let spec = &self.spec;
        let d = spec.d;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "rows", &[]));
        let mut data = Vec::with_capacity(n_rows * d);
        let mut latents = Vec::with_capacity(n_rows);
        let mut on: Vec<Vec<bool>> = self.level_sizes.iter().map(|&n| vec![false; n]).collect();
        let mut acc = vec![0f64; d];
        for _ in 0..n_rows {
            acc.iter_mut().for_each(|v| *v = 0.0);
            let mut active = Vec::new();
            for k in 0..self.num_levels() {
                for j in 0..self.level_sizes[k] {
                    let eligible = k == 0 || self.parents[k - 1][j].is_some_and(|p| on[k - 1][p]);
                    let p = if k == 0 { spec.p_root } else { spec.p_child };
                    let fire = eligible && rng.random::<f64>() < p;
                    on[k][j] = fire;
                    if fire {
                        let alpha = if spec.coeff_hi > spec.coeff_lo {
                            rng.random_range(spec.coeff_lo..spec.coeff_hi)
                        } else {
                            spec.coeff_lo
                        };
                        numerics::axpy_f64(alpha, self.directions[k].row(j), &mut acc);
                        active.push(ActiveNode {
                            level: k,
                            node: j,
                            coeff: alpha as f32,
                        });
                    }
                }
            }
            if spec.noise_sigma > 0.0 {
                for v in acc.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += spec.noise_sigma * z;
                }
            }
            data.extend(acc.iter().map(|v| *v as f32));
            latents.push(active);
        }
        Ok((Matrix::from_vec(n_rows, d, data)?, latents))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HsaeError::io(path, e))?;
        let f: SyntheticForest = serde_json::from_str(&text)?;
        if f.schema != TRUTH_SCHEMA {
            return Err(HsaeError::Schema {
                expected: TRUTH_SCHEMA.into(),
                found: f.schema,
            });
        }
        if f.directions.len() != f.level_sizes.len() || f.parents.len() + 1 != f.level_sizes.len() {
            return Err(HsaeError::Data("truth file level counts disagree".into()));
        }
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text + "\n").map_err(|e| HsaeError::io(path, e))
    }
}

/// Files written by [`synthetic_generate`].
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub manifest: Manifest,
    pub manifest_path: std::path::PathBuf,
    pub truth_path: std::path::PathBuf,
}

/// Generates `n_rows` rows into `out_dir` as shards of at most
/// `rows_per_shard` rows, plus `manifest.json` and `truth.json`. The scaler
/// is calibrated on the first `min(1e6, n_rows)` rows. `name` prefixes the
/// file names so that several datasets (train/eval) can share a directory;
/// the truth file is shared.
pub fn synthetic_generate(
    forest: &SyntheticForest,
    n_rows: usize,
    seed: u64,
    out_dir: &Path,
    name: &str,
    rows_per_shard: usize,
) -> Result<GeneratedDataset> {
    if rows_per_shard == 0 {
        return Err(HsaeError::InvalidArgument("rows_per_shard must be >= 1".into()));
    }
    if n_rows == 0 {
        return Err(HsaeError::InvalidArgument("n_rows must be >= 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| HsaeError::io(out_dir, e))?;
    let (rows, _) = forest.sample(n_rows, seed)?;
    let d = forest.spec.d;
    let calib = rows_head(&rows, CALIBRATION_ROWS.min(n_rows))?;
    let scaler = compute_scaler(&calib)?;
    let mut shards = Vec::new();
    for (s, start) in (0..n_rows).step_by(rows_per_shard).enumerate() {
        let count = rows_per_shard.min(n_rows - start);
        let part = Matrix::from_vec(count, d, rows.as_slice()[start * d..(start + count) * d].to_vec())?;
        let file = format!("{name}-{s:05}.bin");
        write_shard(&out_dir.join(&file), &part)?;
        shards.push(ShardEntry {
            path: file,
            rows: count as u64,
        });
    }
    let source = format!(
        "synthetic forest: roots={} branching={} depth={} p_root={} p_child={} noise_sigma={}",
        forest.spec.roots, forest.spec.branching, forest.spec.depth, forest.spec.p_root, forest.spec.p_child, forest.spec.noise_sigma
    );
    let manifest = Manifest::new(d, scaler, source, seed, shards).with_base_dir(out_dir);
    let manifest_path = out_dir.join(format!("{name}-manifest.json"));
    manifest.save(&manifest_path)?;
    let truth_path = out_dir.join("truth.json");
    forest.save(&truth_path)?;
    Ok(GeneratedDataset {
        manifest,
        manifest_path,
        truth_path,
    })
}

pub(crate) fn rows_head(rows: &Matrix, n: usize) -> Result<Matrix> {
    let d = rows.cols();
    Matrix::from_vec(n, d, rows.as_slice()[..n * d].to_vec())
}
