//! The partial feature forest and its similarity-driven reassignment.
//!
//! Levels are zero-based: level 0 is the coarsest dictionary. Edges only
//! ever connect a feature of level `k` to features of level `k + 1`, and a
//! feature has at most one parent, so child sets of distinct parents are
//! disjoint by construction.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HsaeError, Result};
use crate::numerics::{cosine_sim_matrix, Matrix};
use crate::sae::{FeatureSets, SaeLevel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMethod {
    Encoder,
    Decoder,
    Coactivation,
}

impl FromStr for SimilarityMethod {
    type Err = HsaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Self::Encoder),
            "decoder" => Ok(Self::Decoder),
            "coactivation" => Ok(Self::Coactivation),
            other => Err(HsaeError::InvalidArgument(format!(
                "unknown similarity method {other:?} (expected encoder, decoder or coactivation)"
            ))),
        }
    }
}

/// How children are attached during an assignment round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignMode {
    /// Bottom quantile of children by best similarity stays unassigned.
    Partial,
    /// Every child gets its best parent.
    Full,
    /// Partial, plus at most two children per parent.
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    /// `parent_of[k][j]`: parent in level `k` of feature `j` of level `k + 1`.
    parent_of: Vec<Vec<Option<usize>>>,
    /// `children_of[k][i]`: ascending children in level `k + 1` of feature `i` of level `k`.
    children_of: Vec<Vec<Vec<usize>>>,
    pub frozen: bool,
}

impl Hierarchy {
    /// A forest with no edges over the given dictionary sizes.
    pub fn empty(dict_sizes: &[usize]) -> Self {
        let levels = dict_sizes.len();
        Hierarchy {
            parent_of: dict_sizes.iter().skip(1).map(|&n| vec![None; n]).collect(),
            children_of: dict_sizes
                .iter()
                .take(levels.saturating_sub(1))
                .map(|&n| vec![Vec::new(); n])
                .collect(),
            frozen: false,
        }
    }

    /// Builds the forest from explicit parent arrays, one per non-root level.
    pub fn from_parents(dict_sizes: &[usize], parent_of: Vec<Vec<Option<usize>>>) -> Result<Self> {
        let mut h = Hierarchy::empty(dict_sizes);
        if parent_of.len() != h.parent_of.len() {
            return Err(HsaeError::InvalidArgument(format!(
                "expected {} parent arrays, got {}",
                h.parent_of.len(),
                parent_of.len()
            )));
        }
        for (k, parents) in parent_of.into_iter().enumerate() {
            h.set_parents(k + 1, parents)?;
        }
        Ok(h)
    }

    /// Assembles a forest from both maps without checking them; see
    /// [`validate_tree`].
    pub fn from_parts_unchecked(
        parent_of: Vec<Vec<Option<usize>>>,
        children_of: Vec<Vec<Vec<usize>>>,
        frozen: bool,
    ) -> Self {
        Hierarchy {
            parent_of,
            children_of,
            frozen,
        }
    }

    /// Number of adjacent level pairs (one fewer than the number of levels).
    pub fn pair_count(&self) -> usize {
        self.children_of.len()
    }

    /// Replaces the parent array of `level` (≥ 1) and rebuilds the inverse map.
    pub fn set_parents(&mut self, level: usize, parents: Vec<Option<usize>>) -> Result<()> {
        if level == 0 || level > self.parent_of.len() {
            return Err(HsaeError::InvalidArgument(format!(
                "level {level} has no parent level"
            )));
        }
        let k = level - 1;
        if parents.len() != self.parent_of[k].len() {
            return Err(HsaeError::dim(
                "set_parents",
                self.parent_of[k].len(),
                parents.len(),
            ));
        }
        let n_par = self.children_of[k].len();
        let mut children = vec![Vec::new(); n_par];
        for (j, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n_par {
                    return Err(HsaeError::InvalidArgument(format!(
                        "parent {p} of feature {j} at level {level} is out of range (< {n_par})"
                    )));
                }
                children[p].push(j);
            }
        }
        self.parent_of[k] = parents;
        self.children_of[k] = children;
        Ok(())
    }

    /// Parents of the features of `level` (≥ 1).
    pub fn parents(&self, level: usize) -> &[Option<usize>] {
        &self.parent_of[level - 1]
    }

    pub fn parent_of(&self, level: usize, j: usize) -> Option<usize> {
        if level == 0 {
            return None;
        }
        self.parent_of.get(level - 1).and_then(|p| p.get(j).copied().flatten())
    }

    /// Children (in `level + 1`) of feature `i` of `level`, ascending.
    pub fn children_of(&self, level: usize, i: usize) -> Result<&[usize]> {
        let per_level = self.children_of.get(level).ok_or_else(|| {
            HsaeError::InvalidArgument(format!(
                "level {level} has no child level (levels with children: 0..{})",
                self.children_of.len()
            ))
        })?;
        per_level
            .get(i)
            .map(Vec::as_slice)
            .ok_or_else(|| {
                HsaeError::InvalidArgument(format!(
                    "feature {i} out of range at level {level} (n = {})",
                    per_level.len()
                ))
            })
    }

    /// All child lists of `level`.
    pub fn child_sets(&self, level: usize) -> &[Vec<usize>] {
        &self.children_of[level]
    }

    /// Edges `(parent_level, parent, child)` in level, parent, child order.
    pub fn edges(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (k, per_level) in self.children_of.iter().enumerate() {
            for (i, cs) in per_level.iter().enumerate() {
                out.extend(cs.iter().map(|&j| (k, i, j)));
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.parent_of
            .iter()
            .map(|p| p.iter().filter(|x| x.is_some()).count())
            .sum()
    }

    pub fn raw_parents(&self) -> &[Vec<Option<usize>>] {
        &self.parent_of
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeViolation {
    LevelCount { expected: usize, found: usize },
    LevelSize { level: usize, expected: usize, found: usize },
    ParentOutOfRange { level: usize, child: usize, parent: usize },
    ChildOutOfRange { level: usize, parent: usize, child: usize },
    SharedChild { level: usize, child: usize, parents: Vec<usize> },
    MissingInverse { level: usize, child: usize, parent: usize },
    SpuriousInverse { level: usize, parent: usize, child: usize },
    UnsortedChildren { level: usize, parent: usize },
}

impl fmt::Display for TreeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use TreeViolation::*;
        match self {
            LevelCount { expected, found } => {
                write!(f, "expected {expected} levels, found {found}")
            }
            LevelSize { level, expected, found } => {
                write!(f, "level {level}: expected {expected} features, found {found}")
            }
            ParentOutOfRange { level, child, parent } => {
                write!(f, "level {level} feature {child}: parent {parent} out of range")
            }
            ChildOutOfRange { level, parent, child } => {
                write!(f, "level {level} feature {parent}: child {child} out of range")
            }
            SharedChild { level, child, parents } => write!(
                f,
                "level {} feature {child} listed under several parents {parents:?}",
                level + 1
            ),
            MissingInverse { level, child, parent } => write!(
                f,
                "level {level} feature {child} has parent {parent} but is missing from its child set"
            ),
            SpuriousInverse { level, parent, child } => write!(
                f,
                "level {level} feature {parent} lists child {child} whose parent differs"
            ),
            UnsortedChildren { level, parent } => {
                write!(f, "level {level} feature {parent}: child set not strictly ascending")
            }
        }
    }
}

/// Audits disjointness, index ranges, and consistency between the parent
/// arrays and the child sets. Reports every violation found.
pub fn validate_tree(h: &Hierarchy, dict_sizes: &[usize]) -> std::result::Result<(), Vec<TreeViolation>> {
    let mut v = Vec::new();
    let levels = dict_sizes.len();
    if levels == 0 {
        return if h.parent_of.is_empty() && h.children_of.is_empty() {
            Ok(())
        } else {
            Err(vec![TreeViolation::LevelCount {
                expected: 0,
                found: h.parent_of.len() + 1,
            }])
        };
    }
    if h.parent_of.len() != levels - 1 || h.children_of.len() != levels - 1 {
        v.push(TreeViolation::LevelCount {
            expected: levels,
            found: h.parent_of.len().max(h.children_of.len()) + 1,
        });
        return Err(v);
    }
    for k in 0..levels - 1 {
        let (n_par, n_child) = (dict_sizes[k], dict_sizes[k + 1]);
        let parents = &h.parent_of[k];
        let children = &h.children_of[k];
        if parents.len() != n_child {
            v.push(TreeViolation::LevelSize {
                level: k + 1,
                expected: n_child,
                found: parents.len(),
            });
        }
        if children.len() != n_par {
            v.push(TreeViolation::LevelSize {
                level: k,
                expected: n_par,
                found: children.len(),
            });
        }
        let mut listed_by: Vec<Vec<usize>> = vec![Vec::new(); n_child.max(parents.len())];
        for (i, cs) in children.iter().enumerate() {
            if cs.windows(2).any(|w| w[0] >= w[1]) {
                v.push(TreeViolation::UnsortedChildren { level: k, parent: i });
            }
            for &j in cs {
                if j >= n_child {
                    v.push(TreeViolation::ChildOutOfRange {
                        level: k,
                        parent: i,
                        child: j,
                    });
                    continue;
                }
                listed_by[j].push(i);
                if parents.get(j).copied().flatten() != Some(i) {
                    v.push(TreeViolation::SpuriousInverse {
                        level: k,
                        parent: i,
                        child: j,
                    });
                }
            }
        }
        for (j, owners) in listed_by.iter().enumerate() {
            let mut owners = owners.clone();
            owners.dedup();
            if owners.len() > 1 {
                v.push(TreeViolation::SharedChild {
                    level: k,
                    child: j,
                    parents: owners,
                });
            }
        }
        for (j, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n_par {
                    v.push(TreeViolation::ParentOutOfRange {
                        level: k + 1,
                        child: j,
                        parent: p,
                    });
                } else if children.get(p).is_none_or(|cs| !cs.contains(&j)) {
                    v.push(TreeViolation::MissingInverse {
                        level: k + 1,
                        child: j,
                        parent: p,
                    });
                }
            }
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Exponential moving averages of feature activity: marginal activation
/// frequency per feature and joint frequency per adjacent-level pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoactivationStats {
    /// `joint[k]` is `n_k × n_{k+1}`.
    pub joint: Vec<Matrix>,
    pub marginal: Vec<Vec<f32>>,
    pub momentum: f64,
}

impl CoactivationStats {
    pub fn new(dict_sizes: &[usize], momentum: f64) -> Self {
        CoactivationStats {
            joint: dict_sizes
                .windows(2)
                .map(|w| Matrix::zeros(w[0], w[1]))
                .collect(),
            marginal: dict_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            momentum,
        }
    }

    /// Folds one batch of activity into the averages of levels `k`, `k + 1`
    /// and of their joint matrix.
    pub fn update_pair(&mut self, k: usize, upper: &FeatureSets, lower: &FeatureSets) -> Result<()> {
        if upper.rows() != lower.rows() {
            return Err(HsaeError::dim("coactivation_update", upper.rows(), lower.rows()));
        }
        let batch = upper.rows();
        if batch == 0 {
            return Ok(());
        }
        let joint = &mut self.joint[k];
        let cols = joint.cols();
        let mut counts = vec![0u32; joint.rows() * cols];
        for b in 0..batch {
            let lo = lower.row(b);
            for &i in upper.row(b) {
                let base = i as usize * cols;
                for &j in lo {
                    counts[base + j as usize] += 1;
                }
            }
        }
        let m = self.momentum;
        let inv = 1.0 / batch as f64;
        for (s, c) in joint.as_mut_slice().iter_mut().zip(&counts) {
            *s = (m * *s as f64 + (1.0 - m) * (*c as f64 * inv)) as f32;
        }
        Ok(())
    }

    pub fn update_marginal(&mut self, level: usize, active: &FeatureSets) {
        let batch = active.rows();
        if batch == 0 {
            return;
        }
        let marg = &mut self.marginal[level];
        let mut counts = vec![0u32; marg.len()];
        for b in 0..batch {
            for &i in active.row(b) {
                counts[i as usize] += 1;
            }
        }
        let m = self.momentum;
        for (s, c) in marg.iter_mut().zip(&counts) {
            *s = (m * *s as f64 + (1.0 - m) * (*c as f64 / batch as f64)) as f32;
        }
    }

    /// Updates every level and every adjacent pair from one batch.
    pub fn update(&mut self, active: &[&FeatureSets]) -> Result<()> {
        if active.len() != self.marginal.len() {
            return Err(HsaeError::dim("coactivation_update", self.marginal.len(), active.len()));
        }
        for (k, sets) in active.windows(2).enumerate() {
            self.update_pair(k, sets[0], sets[1])?;
        }
        for (l, sets) in active.iter().enumerate() {
            self.update_marginal(l, sets);
        }
        Ok(())
    }
}

/// Similarity between features of level `k` (rows) and level `k + 1` (columns).
pub fn similarity_matrix(
    levels: &[SaeLevel],
    stats: &CoactivationStats,
    method: SimilarityMethod,
    k: usize,
) -> Result<Matrix> {
    if k + 1 >= levels.len() {
        return Err(HsaeError::InvalidArgument(format!(
            "level {k} has no child level in a {}-level ladder",
            levels.len()
        )));
    }
    match method {
        SimilarityMethod::Encoder => cosine_sim_matrix(&levels[k].encoder, &levels[k + 1].encoder),
        SimilarityMethod::Decoder => cosine_sim_matrix(&levels[k].decoder, &levels[k + 1].decoder),
        SimilarityMethod::Coactivation => stats
            .joint
            .get(k)
            .cloned()
            .ok_or_else(|| HsaeError::InvalidArgument(format!("no coactivation stats for pair {k}"))),
    }
}

/// Column-wise best parent `(index, similarity)`, ties to the lowest index.
fn best_parents(sim: &Matrix) -> Vec<Option<(usize, f32)>> {
    (0..sim.cols())
        .map(|j| {
            let mut best: Option<(usize, f32)> = None;
            for i in 0..sim.rows() {
                let s = sim.get(i, j);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((i, s));
                }
            }
            best
        })
        .collect()
}

/// Number of children excluded by the quantile rule.
pub fn excluded_count(n_children: usize, quantile: f64) -> usize {
    (quantile * n_children as f64).floor() as usize
}

/// Picks a parent (in the rows of `sim`) for every child (column).
///
/// Each child's candidate is its column argmax, with score `s_j`. Children
/// are ranked by ascending `s_j` (equal scores: higher child index first)
/// and the first `⌊q·n⌋` of them are left unassigned, except in
/// [`AssignMode::Full`]. In [`AssignMode::Binary`] the kept children are
/// placed greedily in descending `s_j` order, each taking the most similar
/// parent that still has fewer than two children and whose similarity is at
/// least the smallest kept score; children that find none stay unassigned.
pub fn assign_parents(sim: &Matrix, quantile: f64, mode: AssignMode) -> Result<Vec<Option<usize>>> {
    if !(0.0..1.0).contains(&quantile) {
        return Err(HsaeError::InvalidArgument(format!(
            "exclusion quantile must lie in [0, 1), got {quantile}"
        )));
    }
    let n_child = sim.cols();
    let best = best_parents(sim);
    let mut out: Vec<Option<usize>> = best.iter().map(|b| b.map(|(i, _)| i)).collect();
    if sim.rows() == 0 {
        return Ok(out);
    }
    let score = |j: usize| best[j].map_or(f32::NEG_INFINITY, |(_, s)| s);

    let drop = match mode {
        AssignMode::Full => 0,
        _ => excluded_count(n_child, quantile),
    };
    let mut ascending: Vec<usize> = (0..n_child).collect();
    ascending.sort_by(|&a, &b| {
        score(a)
            .partial_cmp(&score(b))
            .unwrap_or(Ordering::Equal)
            .then(b.cmp(&a))
    });
    for &j in &ascending[..drop] {
        out[j] = None;
    }
    if mode != AssignMode::Binary {
        return Ok(out);
    }

    let kept = &ascending[drop..];
    let Some(&weakest) = kept.first() else {
        return Ok(out);
    };
    let cut = score(weakest);
    let mut order: Vec<usize> = kept.to_vec();
    order.sort_by(|&a, &b| {
        score(b)
            .partial_cmp(&score(a))
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut load = vec![0u8; sim.rows()];
    let mut parents_by_sim: Vec<usize> = (0..sim.rows()).collect();
    for j in order {
        parents_by_sim.sort_by(|&a, &b| {
            sim.get(b, j)
                .partial_cmp(&sim.get(a, j))
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        out[j] = parents_by_sim
            .iter()
            .copied()
            .take_while(|&i| sim.get(i, j) >= cut)
            .find(|&i| load[i] < 2);
        if let Some(i) = out[j] {
            load[i] += 1;
        }
    }
    Ok(out)
}
