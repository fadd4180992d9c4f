//! The hierarchical objective over a ladder of levels.
//!
//! For level `k` the reconstruction term uses a perturbed reconstruction in
//! which every substituted feature `i` (one that has children) contributes
//! `Σ_{j ∈ C(i)} a_j d_j` from level `k + 1` instead of its own `a_i d_i`.
//! The sparsity term always counts the level's own unperturbed activity.
//! The parent-children term of pair `k` is the batch mean of
//! `Σ_i ‖a_i d_i − Σ_{j ∈ C(i)} a_j d_j‖²` over parents with children.

use rand::Rng;

use crate::error::{HsaeError, Result};
use crate::hierarchy::Hierarchy;
use crate::numerics::{axpy_f64, Matrix};
use crate::sae::{
    accumulate_recon_grad, finish_backward, mean_l0, relevant_entries, GradAccumulator, LevelForward,
    LevelGrads, SaeLevel,
};

/// Which features have their contribution replaced by their children's in
/// one step; one flag vector per level that has a child level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubstitutionMask {
    per_level: Vec<Vec<bool>>,
}

impl SubstitutionMask {
    pub fn none(dict_sizes: &[usize]) -> Self {
        let pairs = dict_sizes.len().saturating_sub(1);
        SubstitutionMask {
            per_level: dict_sizes[..pairs].iter().map(|&n| vec![false; n]).collect(),
        }
    }

    /// Flags each feature that has children independently with probability `p`.
    /// Draws happen level by level, feature by feature, and only for
    /// features with children.
    pub fn sample<R: Rng + ?Sized>(h: &Hierarchy, p: f64, rng: &mut R) -> Result<Self> {
        let per_level = (0..h.pair_count())
            .map(|k| {
                let has: Vec<bool> = h.child_sets(k).iter().map(|c| !c.is_empty()).collect();
                draw_substitutions(&has, p, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SubstitutionMask { per_level })
    }

    pub fn from_flags(per_level: Vec<Vec<bool>>) -> Self {
        SubstitutionMask { per_level }
    }

    #[inline]
    pub fn get(&self, level: usize, i: usize) -> bool {
        self.per_level.get(level).is_some_and(|v| v[i])
    }

    pub fn count(&self, level: usize) -> usize {
        self.per_level.get(level).map_or(0, |v| v.iter().filter(|f| **f).count())
    }

    pub fn levels(&self) -> usize {
        self.per_level.len()
    }

    /// Clears the flags of features without children, which have nothing to
    /// be substituted by.
    fn restricted_to(&self, h: &Hierarchy) -> Result<Self> {
        let per_level = self
            .per_level
            .iter()
            .enumerate()
            .map(|(k, flags)| {
                let kids = h.child_sets(k);
                if flags.len() != kids.len() {
                    return Err(HsaeError::dim("substitution mask", kids.len(), flags.len()));
                }
                Ok(flags.iter().zip(kids).map(|(&f, c)| f && !c.is_empty()).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SubstitutionMask { per_level })
    }
}

fn draw_substitutions<R: Rng + ?Sized>(has_children: &[bool], p: f64, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(HsaeError::InvalidArgument(format!(
            "substitution probability must lie in [0, 1], got {p}"
        )));
    }
    Ok(has_children
        .iter()
        .map(|&h| h && p > 0.0 && rng.random_bool(p))
        .collect())
}

/// Mixes per-feature contributions: a feature with children is replaced by
/// its children's sum with probability `p`. Rows of `parent` and
/// `children_sum` are features. Returns the mixed rows and the mask.
pub fn perturb_contributions<R: Rng + ?Sized>(
    parent: &Matrix,
    children_sum: &Matrix,
    has_children: &[bool],
    p: f64,
    rng: &mut R,
) -> Result<(Matrix, Vec<bool>)> {
    parent.check_same_shape(children_sum, "perturb_contributions")?;
    if has_children.len() != parent.rows() {
        return Err(HsaeError::dim("perturb_contributions", parent.rows(), has_children.len()));
    }
    let mask = draw_substitutions(has_children, p, rng)?;
    let mut out = parent.clone();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            out.row_mut(i).copy_from_slice(children_sum.row(i));
        }
    }
    Ok((out, mask))
}

/// Batch mean of `‖parent_b − children_b‖²` for one parent's outputs
/// (`batch × d`) against its children's summed outputs.
pub fn pc_loss(parent_out: &Matrix, children_sum: &Matrix) -> Result<f64> {
    parent_out.check_same_shape(children_sum, "pc_loss")?;
    Ok(crate::sae::mean_squared_error(parent_out, children_sum))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelTerms {
    /// Reconstruction error of the (possibly perturbed) reconstruction.
    pub mse: f64,
    pub l0: f64,
    pub lambda: f64,
    /// Features whose contribution was substituted this step.
    pub perturbed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub levels: Vec<LevelTerms>,
    /// Unweighted parent-children loss per adjacent pair.
    pub pc: Vec<f64>,
    pub rho: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub breakdown: LossBreakdown,
    pub forwards: Vec<LevelForward>,
    /// Empty unless gradients were requested.
    pub grads: Vec<LevelGrads>,
}

/// Objective value with a freshly sampled substitution mask.
pub fn hsae_total_loss<R: Rng + ?Sized>(
    levels: &[SaeLevel],
    h: &Hierarchy,
    x: &Matrix,
    rho: f64,
    substitution_p: f64,
    eps: f64,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let mask = SubstitutionMask::sample(h, substitution_p, rng)?;
    Ok(hsae_objective(levels, h, x, rho, eps, &mask, false)?.breakdown)
}

/// Evaluates the objective for a fixed substitution mask and, optionally,
/// its straight-through gradients with respect to every level's parameters.
pub fn hsae_objective(
    levels: &[SaeLevel],
    h: &Hierarchy,
    x: &Matrix,
    rho: f64,
    eps: f64,
    mask: &SubstitutionMask,
    want_grads: bool,
) -> Result<ObjectiveOutput> {
    let nl = levels.len();
    if nl == 0 {
        return Err(HsaeError::InvalidArgument("objective needs at least one level".into()));
    }
    if h.pair_count() != nl - 1 {
        return Err(HsaeError::dim("hsae_objective(hierarchy levels)", nl, h.pair_count() + 1));
    }
    if mask.levels() != nl - 1 {
        return Err(HsaeError::dim("hsae_objective(mask levels)", nl - 1, mask.levels()));
    }
    let mask = &mask.restricted_to(h)?;
    let (batch, d) = x.shape();
    let forwards = levels.iter().map(|l| l.forward(x)).collect::<Result<Vec<_>>>()?;
    let inv_b = if batch > 0 { 1.0 / batch as f64 } else { 0.0 };

    // Reconstruction terms and their upstream gradients 2(R̃ − x)/B.
    let mut terms = Vec::with_capacity(nl);
    let mut upstream: Vec<Vec<Vec<f64>>> = Vec::with_capacity(nl);
    let mut r = vec![0f64; d];
    for k in 0..nl {
        let fwd = &forwards[k];
        let any = mask.count(k) > 0;
        let mut sse = 0f64;
        let mut g = Vec::with_capacity(if want_grads { batch } else { 0 });
        for b in 0..batch {
            for ((o, rc), xv) in r.iter_mut().zip(fwd.recon.row(b)).zip(x.row(b)) {
                *o = *rc as f64 - *xv as f64;
            }
            if any {
                for &i in fwd.active.row(b) {
                    let i = i as usize;
                    if mask.get(k, i) {
                        axpy_f64(-(fwd.acts.get(b, i) as f64), levels[k].decoder.row(i), &mut r);
                    }
                }
                let next = &forwards[k + 1];
                let parents = h.parents(k + 1);
                for &j in next.active.row(b) {
                    let j = j as usize;
                    if parents[j].is_some_and(|p| mask.get(k, p)) {
                        axpy_f64(next.acts.get(b, j) as f64, levels[k + 1].decoder.row(j), &mut r);
                    }
                }
            }
            sse += r.iter().map(|v| v * v).sum::<f64>();
            if want_grads {
                g.push(r.iter().map(|v| 2.0 * v * inv_b).collect());
            }
        }
        terms.push(LevelTerms {
            mse: sse * inv_b,
            l0: mean_l0(fwd),
            lambda: levels[k].lambda as f64,
            perturbed: mask.count(k),
        });
        upstream.push(g);
    }

    let relevant: Vec<_> = if want_grads {
        levels
            .iter()
            .zip(&forwards)
            .map(|(l, f)| relevant_entries(l, f, eps))
            .collect()
    } else {
        Vec::new()
    };
    let mut accs: Vec<GradAccumulator> = if want_grads {
        levels
            .iter()
            .map(|l| GradAccumulator::new(batch, l.dict_size(), d))
            .collect()
    } else {
        Vec::new()
    };

    if want_grads {
        for k in 0..nl {
            accumulate_recon_grad(
                &levels[k],
                &forwards[k],
                &relevant[k],
                &upstream[k],
                1.0,
                |i| !mask.get(k, i),
                &mut accs[k],
            );
            if k + 1 < nl && mask.count(k) > 0 {
                let parents = h.parents(k + 1);
                accumulate_recon_grad(
                    &levels[k + 1],
                    &forwards[k + 1],
                    &relevant[k + 1],
                    &upstream[k],
                    1.0,
                    |j| parents[j].is_some_and(|p| mask.get(k, p)),
                    &mut accs[k + 1],
                );
            }
        }
    }

    // Parent-children terms.
    let mut pc = vec![0f64; nl - 1];
    let pc_grads = want_grads && rho > 0.0;
    for k in 0..nl.saturating_sub(1) {
        if h.child_sets(k).iter().all(Vec::is_empty) {
            continue;
        }
        let (upper, lower) = (&levels[k], &levels[k + 1]);
        let (fu, fl) = (&forwards[k], &forwards[k + 1]);
        let parents = h.parents(k + 1);
        let has_children: Vec<bool> = h.child_sets(k).iter().map(|c| !c.is_empty()).collect();
        let mut slot = vec![usize::MAX; upper.dict_size()];
        let mut touched: Vec<usize> = Vec::new();
        let mut pbuf: Vec<f64> = Vec::new();
        let mut total = 0f64;
        for b in 0..batch {
            for &i in fu.active.row(b) {
                let i = i as usize;
                if has_children[i] {
                    let s = open_slot(&mut slot, &mut touched, &mut pbuf, i, d);
                    axpy_f64(fu.acts.get(b, i) as f64, upper.decoder.row(i), &mut pbuf[s * d..(s + 1) * d]);
                }
            }
            for &j in fl.active.row(b) {
                let j = j as usize;
                if let Some(p) = parents[j] {
                    let s = open_slot(&mut slot, &mut touched, &mut pbuf, p, d);
                    axpy_f64(-(fl.acts.get(b, j) as f64), lower.decoder.row(j), &mut pbuf[s * d..(s + 1) * d]);
                }
            }
            total += pbuf.iter().map(|v| v * v).sum::<f64>();

            if pc_grads && !touched.is_empty() {
                let hs = 2.0 * rho * inv_b;
                for &i in relevant[k].row(b) {
                    let i = i as usize;
                    let s = slot[i];
                    if s == usize::MAX {
                        continue;
                    }
                    let pv = &pbuf[s * d..(s + 1) * d];
                    *accs[k].act_mut(b, i) += hs * crate::sae::dot_f64(pv, upper.decoder.row(i));
                    let a = fu.acts.get(b, i) as f64;
                    if a != 0.0 {
                        for (o, v) in accs[k].decoder_row_mut(i).iter_mut().zip(pv) {
                            *o += hs * a * v;
                        }
                    }
                }
                for &j in relevant[k + 1].row(b) {
                    let j = j as usize;
                    let Some(p) = parents[j] else { continue };
                    let s = slot[p];
                    if s == usize::MAX {
                        continue;
                    }
                    let pv = &pbuf[s * d..(s + 1) * d];
                    *accs[k + 1].act_mut(b, j) -= hs * crate::sae::dot_f64(pv, lower.decoder.row(j));
                    let a = fl.acts.get(b, j) as f64;
                    if a != 0.0 {
                        for (o, v) in accs[k + 1].decoder_row_mut(j).iter_mut().zip(pv) {
                            *o -= hs * a * v;
                        }
                    }
                }
            }
            for &i in &touched {
                slot[i] = usize::MAX;
            }
            touched.clear();
            pbuf.clear();
        }
        pc[k] = total * inv_b;
    }

    let total = terms.iter().map(|t| t.mse + t.lambda * t.l0).sum::<f64>() + rho * pc.iter().sum::<f64>();
    let grads = if want_grads {
        accs.into_iter()
            .enumerate()
            .map(|(k, acc)| {
                finish_backward(&levels[k], &forwards[k], x, &relevant[k], acc, levels[k].lambda as f64, eps)
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(ObjectiveOutput {
        breakdown: LossBreakdown {
            levels: terms,
            pc,
            rho,
            total,
        },
        forwards,
        grads,
    })
}

fn open_slot(slot: &mut [usize], touched: &mut Vec<usize>, pbuf: &mut Vec<f64>, i: usize, d: usize) -> usize {
    if slot[i] == usize::MAX {
        slot[i] = touched.len();
        touched.push(i);
        pbuf.resize(pbuf.len() + d, 0.0);
    }
    slot[i]
}
