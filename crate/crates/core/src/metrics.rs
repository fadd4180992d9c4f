//! Evaluation: hierarchy consistency between adjacent levels, reconstruction
//! fidelity, and recovery of a planted forest.
//!
//! All evaluation uses plain (unperturbed) forwards. Hierarchy metrics are
//! computed from integer counts, so results do not depend on how the
//! evaluation set is split into batches.

use serde::{Deserialize, Serialize};

use crate::data::{RowSource, SyntheticForest};
use crate::error::{HsaeError, Result};
use crate::hierarchy::Hierarchy;
use crate::numerics::{cosine_sim_matrix, Matrix};
use crate::sae::{FeatureSets, SaeLevel};

pub const REPORT_SCHEMA: &str = "hsae-report/1";
/// Default number of evaluation rows.
pub const DEFAULT_EVAL_ROWS: usize = 1_000_000;
/// A truth node counts as recovered when its matched decoder direction has
/// at least this absolute cosine.
pub const RECOVERY_COSINE: f64 = 0.8;

/// Activity counts for one adjacent level pair under a fixed hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCounts {
    /// `children[i]` of parent level feature `i`.
    children: Vec<Vec<usize>>,
    parents: Vec<Option<usize>>,
    samples: u64,
    hamming: u64,
    parent_active: Vec<u64>,
    child_active: Vec<u64>,
    /// Samples where child `j` and its parent are both active.
    both: Vec<u64>,
    // Per-sample scratch.
    predicted: Vec<bool>,
    fired: Vec<bool>,
    touched: Vec<usize>,
}

impl PairCounts {
    /// Counts for the pair `(level, level + 1)` of `h`.
    pub fn new(h: &Hierarchy, level: usize) -> Result<Self> {
        if level >= h.pair_count() {
            return Err(HsaeError::InvalidArgument(format!(
                "level {level} has no child level in a {}-level hierarchy",
                h.pair_count() + 1
            )));
        }
        let children = h.child_sets(level).to_vec();
        let parents = h.parents(level + 1).to_vec();
        let (np, nc) = (children.len(), parents.len());
        Ok(PairCounts {
            children,
            parents,
            samples: 0,
            hamming: 0,
            parent_active: vec![0; np],
            child_active: vec![0; nc],
            both: vec![0; nc],
            predicted: vec![false; np],
            fired: vec![false; np],
            touched: Vec::new(),
        })
    }

    pub fn observe(&mut self, upper: &FeatureSets, lower: &FeatureSets) -> Result<()> {
        if upper.rows() != lower.rows() {
            return Err(HsaeError::dim("pair metrics", upper.rows(), lower.rows()));
        }
        for b in 0..upper.rows() {
            for &i in upper.row(b) {
                let i = i as usize;
                self.fired[i] = true;
                self.parent_active[i] += 1;
            }
            self.touched.clear();
            for &j in lower.row(b) {
                let j = j as usize;
                self.child_active[j] += 1;
                if let Some(p) = self.parents[j] {
                    if !self.predicted[p] {
                        self.predicted[p] = true;
                        self.touched.push(p);
                    }
                    if self.fired[p] {
                        self.both[j] += 1;
                    }
                }
            }
            // Symmetric difference between fired participating parents and predicted ones.
            for &i in upper.row(b) {
                let i = i as usize;
                if !self.children[i].is_empty() && !self.predicted[i] {
                    self.hamming += 1;
                }
            }
            for &p in &self.touched {
                if !self.fired[p] {
                    self.hamming += 1;
                }
            }
            for &i in upper.row(b) {
                self.fired[i as usize] = false;
            }
            for &p in &self.touched {
                self.predicted[p] = false;
            }
            self.samples += 1;
        }
        Ok(())
    }

    pub fn participating_parents(&self) -> usize {
        self.children.iter().filter(|c| !c.is_empty()).count()
    }

    pub fn assigned_pairs(&self) -> usize {
        self.parents.iter().filter(|p| p.is_some()).count()
    }

    /// Mean over samples of the number of participating parents whose
    /// activity differs from the OR of their children's.
    pub fn hamming_mean(&self) -> Option<f64> {
        (self.participating_parents() > 0 && self.samples > 0).then(|| self.hamming as f64 / self.samples as f64)
    }

    /// Mean over assigned pairs whose child fired of `P(parent | child)`.
    pub fn p_parent_given_child(&self) -> Option<f64> {
        let (mut sum, mut n) = (0f64, 0usize);
        for (j, p) in self.parents.iter().enumerate() {
            if p.is_some() && self.child_active[j] > 0 {
                sum += self.both[j] as f64 / self.child_active[j] as f64;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Mean over assigned pairs whose parent fired of `P(child | parent)`.
    pub fn p_child_given_parent(&self) -> Option<f64> {
        let (mut sum, mut n) = (0f64, 0usize);
        for (j, p) in self.parents.iter().enumerate() {
            if let Some(p) = *p {
                if self.parent_active[p] > 0 {
                    sum += self.both[j] as f64 / self.parent_active[p] as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

fn masks_to_counts(parent_mask: &Matrix, child_mask: &Matrix, h: &Hierarchy, level: usize) -> Result<PairCounts> {
    let mut c = PairCounts::new(h, level)?;
    if parent_mask.cols() != c.parent_active.len() {
        return Err(HsaeError::dim("parent mask width", c.parent_active.len(), parent_mask.cols()));
    }
    if child_mask.cols() != c.child_active.len() {
        return Err(HsaeError::dim("child mask width", c.child_active.len(), child_mask.cols()));
    }
    c.observe(&FeatureSets::from_mask(parent_mask), &FeatureSets::from_mask(child_mask))?;
    Ok(c)
}

/// Mean logical-OR Hamming distance for pair `(level, level + 1)` from dense
/// `batch × n` activity masks; `None` when no parent has children.
pub fn logical_or_hamming(parent_mask: &Matrix, child_mask: &Matrix, h: &Hierarchy, level: usize) -> Result<Option<f64>> {
    Ok(masks_to_counts(parent_mask, child_mask, h, level)?.hamming_mean())
}

pub fn p_parent_given_child(parent_mask: &Matrix, child_mask: &Matrix, h: &Hierarchy, level: usize) -> Result<Option<f64>> {
    Ok(masks_to_counts(parent_mask, child_mask, h, level)?.p_parent_given_child())
}

pub fn p_child_given_parent(parent_mask: &Matrix, child_mask: &Matrix, h: &Hierarchy, level: usize) -> Result<Option<f64>> {
    Ok(masks_to_counts(parent_mask, child_mask, h, level)?.p_child_given_parent())
}

/// Streaming sums for average L0 and variance explained of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityCounts {
    rows: u64,
    active: u64,
    sse: f64,
}

/// Streaming per-dimension sums of the evaluation data.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMoments {
    rows: u64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl DataMoments {
    pub fn new(d: usize) -> Self {
        DataMoments {
            rows: 0,
            sum: vec![0.0; d],
            sum_sq: vec![0.0; d],
        }
    }

    pub fn observe(&mut self, x: &Matrix) {
        for b in 0..x.rows() {
            for ((s, q), v) in self.sum.iter_mut().zip(self.sum_sq.iter_mut()).zip(x.row(b)) {
                let v = *v as f64;
                *s += v;
                *q += v * v;
            }
        }
        self.rows += x.rows() as u64;
    }

    /// `Σ_b ‖x_b − x̄‖²`.
    pub fn total_variance(&self) -> f64 {
        if self.rows == 0 {
            return 0.0;
        }
        let n = self.rows as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| (q - s * s / n).max(0.0))
            .sum()
    }
}

impl FidelityCounts {
    fn observe(&mut self, active: &FeatureSets, recon: &Matrix, x: &Matrix) {
        self.rows += x.rows() as u64;
        self.active += active.total() as u64;
        self.sse += crate::sae::mean_squared_error(recon, x) * x.rows() as f64;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelFidelity {
    /// One-based, 1 = coarsest.
    pub level: usize,
    pub dict_size: usize,
    pub avg_l0: f64,
    pub variance_explained: f64,
}

fn fidelity_from(counts: &[FidelityCounts], sizes: &[usize], moments: &DataMoments) -> Result<Vec<LevelFidelity>> {
    let var = moments.total_variance();
    if !(var > 0.0) {
        return Err(HsaeError::Data(
            "evaluation data has zero variance; variance explained is undefined".into(),
        ));
    }
    Ok(counts
        .iter()
        .zip(sizes)
        .enumerate()
        .map(|(k, (c, &n))| LevelFidelity {
            level: k + 1,
            dict_size: n,
            avg_l0: c.active as f64 / c.rows.max(1) as f64,
            variance_explained: 1.0 - c.sse / var,
        })
        .collect())
}

/// Average L0 and variance explained of every level over `batches`.
pub fn fidelity(levels: &[SaeLevel], batches: &[Matrix]) -> Result<Vec<LevelFidelity>> {
    let d = levels
        .first()
        .ok_or_else(|| HsaeError::InvalidArgument("fidelity needs at least one level".into()))?
        .input_dim();
    let mut moments = DataMoments::new(d);
    let mut counts = vec![FidelityCounts { rows: 0, active: 0, sse: 0.0 }; levels.len()];
    for x in batches {
        moments.observe(x);
        for (l, c) in levels.iter().zip(counts.iter_mut()) {
            let f = l.forward(x)?;
            c.observe(&f.active, &f.recon, x);
        }
    }
    let sizes: Vec<usize> = levels.iter().map(SaeLevel::dict_size).collect();
    fidelity_from(&counts, &sizes, &moments)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub feature_match_rate: f64,
    pub edge_precision: f64,
    pub edge_recall: f64,
    /// Recovered fraction of truth nodes per level.
    pub per_level_match_rate: Vec<f64>,
    /// `matches[k][t]`: learned feature matched to truth node `t` of level
    /// `k`, when recovered.
    pub matches: Vec<Vec<Option<usize>>>,
}

/// Greedy one-to-one matching of truth directions (rows of `truth`) to
/// decoder rows by descending absolute cosine; keeps pairs at or above
/// [`RECOVERY_COSINE`]. Ties break toward lower truth, then feature, index.
pub fn match_directions(truth: &Matrix, decoder: &Matrix) -> Result<Vec<Option<usize>>> {
    let sim = cosine_sim_matrix(truth, decoder)?;
    let mut cands: Vec<(f32, usize, usize)> = Vec::new();
    for t in 0..sim.rows() {
        for f in 0..sim.cols() {
            let c = sim.get(t, f).abs();
            if c as f64 >= RECOVERY_COSINE {
                cands.push((c, t, f));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; truth.rows()];
    let mut used = vec![false; decoder.rows()];
    for (_, t, f) in cands {
        if out[t].is_none() && !used[f] {
            out[t] = Some(f);
            used[f] = true;
        }
    }
    Ok(out)
}

/// How well the learned levels and forest recover a planted forest.
///
/// Edge precision counts learned edges whose endpoints both matched a truth
/// node; it is 0 when there are none. Recall divides by all truth edges.
pub fn ground_truth_recovery(levels: &[SaeLevel], h: &Hierarchy, truth: &SyntheticForest) -> Result<Recovery> {
    if levels.len() != truth.num_levels() {
        return Err(HsaeError::dim("ground_truth_recovery(levels)", truth.num_levels(), levels.len()));
    }
    if h.pair_count() + 1 != levels.len() {
        return Err(HsaeError::dim("ground_truth_recovery(hierarchy levels)", levels.len(), h.pair_count() + 1));
    }
    let matches = levels
        .iter()
        .zip(&truth.directions)
        .map(|(l, dirs)| match_directions(dirs, &l.decoder))
        .collect::<Result<Vec<_>>>()?;
    let nodes: usize = truth.level_sizes.iter().sum();
    let recovered: usize = matches.iter().map(|m| m.iter().filter(|x| x.is_some()).count()).sum();
    let per_level_match_rate = matches
        .iter()
        .map(|m| {
            if m.is_empty() {
                0.0
            } else {
                m.iter().filter(|x| x.is_some()).count() as f64 / m.len() as f64
            }
        })
        .collect();

    let truth_edges = truth.edges();
    let hit = truth_edges
        .iter()
        .filter(|&&(k, u, v)| match (matches[k][u], matches[k + 1][v]) {
            (Some(fu), Some(fv)) => h.parent_of(k + 1, fv) == Some(fu),
            _ => false,
        })
        .count();

    // Inverse matching: learned feature -> truth node.
    let inverse: Vec<Vec<Option<usize>>> = matches
        .iter()
        .zip(levels)
        .map(|(m, l)| {
            let mut inv = vec![None; l.dict_size()];
            for (t, f) in m.iter().enumerate() {
                if let Some(f) = f {
                    inv[*f] = Some(t);
                }
            }
            inv
        })
        .collect();
    let (mut eligible, mut correct) = (0usize, 0usize);
    for (k, p, c) in h.edges() {
        if let (Some(tp), Some(tc)) = (inverse[k][p], inverse[k + 1][c]) {
            eligible += 1;
            if truth.parents[k][tc] == Some(tp) {
                correct += 1;
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Recovery {
        feature_match_rate: ratio(recovered, nodes),
        edge_precision: ratio(correct, eligible),
        edge_recall: ratio(hit, truth_edges.len()),
        per_level_match_rate,
        matches,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    /// One-based level of the parents; children live one level below.
    pub parent_level: usize,
    pub hamming_mean: Option<f64>,
    pub p_parent_given_child: Option<f64>,
    pub p_child_given_parent: Option<f64>,
    pub assigned_pair_count: usize,
    pub participating_parents: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub rows_evaluated: u64,
    pub levels: Vec<LevelFidelity>,
    pub pairs: Vec<PairMetrics>,
    /// Sum of the per-pair Hamming means; absent when no pair has one.
    pub aggregate_hamming: Option<f64>,
    pub ground_truth: Option<Recovery>,
    /// Effective training config of the evaluated model, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: MetricsReport = serde_json::from_str(text)?;
        if r.schema != REPORT_SCHEMA {
            return Err(HsaeError::Schema {
                expected: REPORT_SCHEMA.into(),
                found: r.schema,
            });
        }
        Ok(r)
    }

    /// Mean of the per-pair `P(parent | child)` values that are present.
    pub fn mean_p_parent_given_child(&self) -> Option<f64> {
        let v: Vec<f64> = self.pairs.iter().filter_map(|p| p.p_parent_given_child).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Accumulates every metric over a stream of evaluation batches.
#[derive(Debug, Clone)]
pub struct Evaluator<'a> {
    levels: &'a [SaeLevel],
    moments: DataMoments,
    fidelity: Vec<FidelityCounts>,
    pairs: Vec<PairCounts>,
}

impl<'a> Evaluator<'a> {
    pub fn new(levels: &'a [SaeLevel], h: &Hierarchy) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| HsaeError::InvalidArgument("evaluation needs at least one level".into()))?;
        if h.pair_count() + 1 != levels.len() {
            return Err(HsaeError::dim("evaluator(hierarchy levels)", levels.len(), h.pair_count() + 1));
        }
        Ok(Evaluator {
            levels,
            moments: DataMoments::new(first.input_dim()),
            fidelity: vec![FidelityCounts { rows: 0, active: 0, sse: 0.0 }; levels.len()],
            pairs: (0..h.pair_count()).map(|k| PairCounts::new(h, k)).collect::<Result<_>>()?,
        })
    }

    pub fn observe(&mut self, x: &Matrix) -> Result<()> {
        let fwds = self.levels.iter().map(|l| l.forward(x)).collect::<Result<Vec<_>>>()?;
        self.moments.observe(x);
        for (c, f) in self.fidelity.iter_mut().zip(&fwds) {
            c.observe(&f.active, &f.recon, x);
        }
        for (k, pc) in self.pairs.iter_mut().enumerate() {
            pc.observe(&fwds[k].active, &fwds[k + 1].active)?;
        }
        Ok(())
    }

    pub fn finish(self, truth: Option<(&Hierarchy, &SyntheticForest)>) -> Result<MetricsReport> {
        let sizes: Vec<usize> = self.levels.iter().map(SaeLevel::dict_size).collect();
        let levels = fidelity_from(&self.fidelity, &sizes, &self.moments)?;
        let pairs: Vec<PairMetrics> = self
            .pairs
            .iter()
            .enumerate()
            .map(|(k, c)| PairMetrics {
                parent_level: k + 1,
                hamming_mean: c.hamming_mean(),
                p_parent_given_child: c.p_parent_given_child(),
                p_child_given_parent: c.p_child_given_parent(),
                assigned_pair_count: c.assigned_pairs(),
                participating_parents: c.participating_parents(),
            })
            .collect();
        let hams: Vec<f64> = pairs.iter().filter_map(|p| p.hamming_mean).collect();
        let ground_truth = truth
            .map(|(h, t)| ground_truth_recovery(self.levels, h, t))
            .transpose()?;
        Ok(MetricsReport {
            schema: REPORT_SCHEMA.into(),
            rows_evaluated: self.moments.rows,
            levels,
            pairs,
            aggregate_hamming: (!hams.is_empty()).then(|| hams.iter().sum()),
            ground_truth,
            config: None,
        })
    }
}

/// Evaluates the first `min(max_rows, len)` rows of `source`, in order, in
/// chunks of `chunk` rows.
pub fn build_report<S: RowSource>(
    levels: &[SaeLevel],
    h: &Hierarchy,
    source: &S,
    max_rows: usize,
    chunk: usize,
    truth: Option<&SyntheticForest>,
) -> Result<MetricsReport> {
    if chunk == 0 {
        return Err(HsaeError::InvalidArgument("evaluation chunk must be >= 1".into()));
    }
    if source.dim() != levels.first().map_or(0, SaeLevel::input_dim) {
        return Err(HsaeError::dim(
            "build_report",
            levels.first().map_or(0, SaeLevel::input_dim),
            source.dim(),
        ));
    }
    let total = max_rows.min(source.len());
    let mut ev = Evaluator::new(levels, h)?;
    let mut start = 0;
    while start < total {
        let n = chunk.min(total - start);
        ev.observe(&source.load(start, n)?)?;
        start += n;
    }
    ev.finish(truth.map(|t| (h, t)))
}
