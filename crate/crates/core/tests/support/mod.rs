//! Reference implementations written directly from the definitions, in
//! plain f64 loops, for comparison against the library.

#![allow(dead_code)]

use hsae_core::{Hierarchy, Matrix, SaeLevel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// One level's parameters in f64.
#[derive(Debug, Clone)]
pub struct Params {
    pub enc: Vec<Vec<f64>>,
    pub dec: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    pub lambda: f64,
}

impl Params {
    pub fn of(level: &SaeLevel) -> Self {
        let rows = |m: &Matrix| (0..m.rows()).map(|r| m.row(r).iter().map(|v| *v as f64).collect()).collect();
        Params {
            enc: rows(&level.encoder),
            dec: rows(&level.decoder),
            theta: level.thresholds.iter().map(|v| *v as f64).collect(),
            lambda: level.lambda as f64,
        }
    }

    pub fn n(&self) -> usize {
        self.theta.len()
    }
}

pub fn rows_f64(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).iter().map(|v| *v as f64).collect()).collect()
}

pub fn pre(p: &Params, x: &[f64], i: usize) -> f64 {
    p.enc[i].iter().zip(x).map(|(a, b)| a * b).sum()
}

/// JumpReLU activations `a[b][i]`.
pub fn activations(p: &Params, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|xb| {
            (0..p.n())
                .map(|i| {
                    let v = pre(p, xb, i);
                    if v > p.theta[i] {
                        v
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

pub fn children(parents: &[Option<usize>], i: usize) -> Vec<usize> {
    (0..parents.len()).filter(|&j| parents[j] == Some(i)).collect()
}

#[derive(Debug, Clone)]
pub struct OracleLoss {
    pub mse: Vec<f64>,
    pub l0: Vec<f64>,
    pub pc: Vec<f64>,
    pub total: f64,
}

/// The hierarchical objective term by term: per-level reconstruction error
/// of the substituted reconstruction, per-level mean active count, and the
/// per-pair parent-children loss, combined as
/// `Σ_k (mse_k + λ_k l0_k) + ρ Σ_k pc_k`.
pub fn hsae_loss(
    levels: &[Params],
    parents: &[Vec<Option<usize>>],
    substituted: &[Vec<bool>],
    x: &[Vec<f64>],
    rho: f64,
) -> OracleLoss {
    let acts: Vec<Vec<Vec<f64>>> = levels.iter().map(|p| activations(p, x)).collect();
    hsae_loss_with_acts(levels, &acts, parents, substituted, x, rho)
}

/// [`hsae_loss`] with the activations `acts[k][b][i]` supplied directly;
/// a feature counts as active when its activation is non-zero.
pub fn hsae_loss_with_acts(
    levels: &[Params],
    acts: &[Vec<Vec<f64>>],
    parents: &[Vec<Option<usize>>],
    substituted: &[Vec<bool>],
    x: &[Vec<f64>],
    rho: f64,
) -> OracleLoss {
    let nl = levels.len();
    let batch = x.len() as f64;
    let d = x[0].len();
    let contribution = |k: usize, b: usize, i: usize| -> Vec<f64> {
        levels[k].dec[i].iter().map(|v| acts[k][b][i] * v).collect()
    };
    let children_sum = |k: usize, b: usize, i: usize| -> Vec<f64> {
        let mut s = vec![0.0; d];
        for j in children(&parents[k], i) {
            for (t, v) in contribution(k + 1, b, j).iter().enumerate() {
                s[t] += v;
            }
        }
        s
    };
    let mut out = OracleLoss {
        mse: vec![0.0; nl],
        l0: vec![0.0; nl],
        pc: vec![0.0; nl.saturating_sub(1)],
        total: 0.0,
    };
    for k in 0..nl {
        for (b, xb) in x.iter().enumerate() {
            let mut recon = vec![0.0; d];
            for i in 0..levels[k].n() {
                let swap = k + 1 < nl
                    && substituted[k][i]
                    && !children(&parents[k], i).is_empty();
                let c = if swap { children_sum(k, b, i) } else { contribution(k, b, i) };
                for t in 0..d {
                    recon[t] += c[t];
                }
                if acts[k][b][i] != 0.0 {
                    out.l0[k] += 1.0;
                }
            }
            out.mse[k] += (0..d).map(|t| (xb[t] - recon[t]).powi(2)).sum::<f64>();
            if k + 1 < nl {
                for i in 0..levels[k].n() {
                    if children(&parents[k], i).is_empty() {
                        continue;
                    }
                    let (own, kids) = (contribution(k, b, i), children_sum(k, b, i));
                    out.pc[k] += (0..d).map(|t| (own[t] - kids[t]).powi(2)).sum::<f64>();
                }
            }
        }
        out.mse[k] /= batch;
        out.l0[k] /= batch;
    }
    for v in &mut out.pc {
        *v /= batch;
    }
    out.total = (0..nl).map(|k| out.mse[k] + levels[k].lambda * out.l0[k]).sum::<f64>() + rho * out.pc.iter().sum::<f64>();
    out
}

/// Binary activity of every feature of a level on every row.
pub type Mask = Vec<Vec<bool>>;

/// Per sample, the parents with at least one child whose own firing
/// disagrees with the OR of their children; averaged over samples.
pub fn hamming(parent: &Mask, child: &Mask, parents: &[Option<usize>]) -> Option<f64> {
    let n_par = parent.first().map_or(0, Vec::len);
    let with_kids: Vec<usize> = (0..n_par).filter(|&i| !children(parents, i).is_empty()).collect();
    if with_kids.is_empty() || parent.is_empty() {
        return None;
    }
    let mut total = 0usize;
    for b in 0..parent.len() {
        for &i in &with_kids {
            let or = children(parents, i).iter().any(|&j| child[b][j]);
            total += (parent[b][i] != or) as usize;
        }
    }
    Some(total as f64 / parent.len() as f64)
}

fn count(m: &Mask, f: impl Fn(&[bool]) -> bool) -> usize {
    m.iter().filter(|r| f(r)).count()
}

/// Mean over assigned children that fired at least once of
/// `#(parent ∧ child) / #child`, children in index order.
pub fn p_parent_given_child(parent: &Mask, child: &Mask, parents: &[Option<usize>]) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (j, p) in parents.iter().enumerate() {
        let Some(p) = *p else { continue };
        let c = count(child, |r| r[j]);
        if c == 0 {
            continue;
        }
        let both = (0..parent.len()).filter(|&b| parent[b][p] && child[b][j]).count();
        sum += both as f64 / c as f64;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean over assigned children whose parent fired at least once of
/// `#(parent ∧ child) / #parent`, children in index order.
pub fn p_child_given_parent(parent: &Mask, child: &Mask, parents: &[Option<usize>]) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (j, p) in parents.iter().enumerate() {
        let Some(p) = *p else { continue };
        let c = count(parent, |r| r[p]);
        if c == 0 {
            continue;
        }
        let both = (0..parent.len()).filter(|&b| parent[b][p] && child[b][j]).count();
        sum += both as f64 / c as f64;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

pub fn mask_matrix(m: &Mask) -> Matrix {
    let rows: Vec<Vec<f32>> = m.iter().map(|r| r.iter().map(|&v| v as u8 as f32).collect()).collect();
    if rows.is_empty() {
        return Matrix::zeros(0, 0);
    }
    Matrix::from_rows(&rows).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, rows: usize, n: usize, p: f64) -> Mask {
    (0..rows).map(|_| (0..n).map(|_| rng.random_bool(p)).collect()).collect()
}

/// Random parent array; each child unassigned with probability `p_none`.
pub fn random_parents(rng: &mut ChaCha8Rng, n_par: usize, n_child: usize, p_none: f64) -> Vec<Option<usize>> {
    (0..n_child)
        .map(|_| (!rng.random_bool(p_none)).then(|| rng.random_range(0..n_par)))
        .collect()
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let v = (0..rows * cols)
        .map(|_| (scale * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect();
    Matrix::from_vec(rows, cols, v).unwrap()
}

pub fn unit_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let n = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
    }
}

/// A level with Gaussian encoder, unit decoder rows, and thresholds in
/// `[0, theta_hi)`.
pub fn random_level(rng: &mut ChaCha8Rng, index: usize, d: usize, n: usize, theta_hi: f32, lambda: f32) -> SaeLevel {
    let mut l = SaeLevel::new(index, d, n, rng.random()).unwrap();
    l.encoder = normal_matrix(rng, n, d, 1.0);
    let mut dec = normal_matrix(rng, n, d, 1.0);
    unit_rows(&mut dec);
    l.decoder = dec;
    l.thresholds = (0..n).map(|_| rng.random_range(0.0..theta_hi)).collect();
    l.lambda = lambda;
    l
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn hierarchy(sizes: &[usize], parents: Vec<Vec<Option<usize>>>) -> Hierarchy {
    Hierarchy::from_parents(sizes, parents).unwrap()
}

/// Greedy matching by repeated global maximum of |cosine| over the still
/// unmatched pairs, keeping pairs at or above `threshold`.
pub fn greedy_match(truth: &[Vec<f64>], learned: &[Vec<f64>], threshold: f64) -> Vec<Option<usize>> {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na < 1e-12 || nb < 1e-12 {
            0.0
        } else {
            (dot / (na * nb)).abs()
        }
    };
    let mut out = vec![None; truth.len()];
    let mut used = vec![false; learned.len()];
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for (t, tv) in truth.iter().enumerate() {
            if out[t].is_some() {
                continue;
            }
            for (f, fv) in learned.iter().enumerate() {
                if used[f] {
                    continue;
                }
                let c = cos(tv, fv);
                if c >= threshold && best.is_none_or(|(bc, _, _)| c > bc) {
                    best = Some((c, t, f));
                }
            }
        }
        match best {
            Some((_, t, f)) => {
                out[t] = Some(f);
                used[f] = true;
            }
            None => return out,
        }
    }
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub compared: usize,
    pub excluded: usize,
}

pub const GRAD_D: usize = 4;
pub const GRAD_SIZES: [usize; 2] = [2, 4];
pub const GRAD_BATCH: usize = 3;
pub const GRAD_RHO: f64 = 0.01;

/// Relative error with a floor so that two vanishing values compare equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Gradient check on a random two-level instance with parents
/// `[0, 0, 1, none]` and feature 0 of the top level substituted.
/// Encoder rows and thresholds with any `|pre − θ| < 2ε` are excluded.
pub fn gradient_check(seed: u64, h: f64, eps: f64) -> GradCheck {
    use hsae_core::training::{hsae_objective, SubstitutionMask};
    let mut rng = seeded(seed);
    let levels: Vec<SaeLevel> = GRAD_SIZES
        .iter()
        .enumerate()
        .map(|(k, &n)| random_level(&mut rng, k, GRAD_D, n, 0.3, 0.05))
        .collect();
    let x = normal_matrix(&mut rng, GRAD_BATCH, GRAD_D, 1.0);
    let parents = vec![vec![Some(0), Some(0), Some(1), None]];
    let flags = vec![vec![true, false]];
    let hier = hierarchy(&GRAD_SIZES, parents.clone());
    let mask = SubstitutionMask::from_flags(flags.clone());
    let out = hsae_objective(&levels, &hier, &x, GRAD_RHO, eps, &mask, true).unwrap();

    let xs = rows_f64(&x);
    let base: Vec<Params> = levels.iter().map(Params::of).collect();
    let loss = |p: &[Params]| hsae_loss(p, &parents, &flags, &xs, GRAD_RHO).total;
    let fd = |f: &dyn Fn(&mut Vec<Params>, f64)| {
        let mut plus = base.clone();
        f(&mut plus, h);
        let mut minus = base.clone();
        f(&mut minus, -h);
        (loss(&plus) - loss(&minus)) / (2.0 * h)
    };
    let mut res = GradCheck {
        max_rel_err: 0.0,
        compared: 0,
        excluded: 0,
    };
    let mut record = |a: f64, f: f64| {
        res.max_rel_err = res.max_rel_err.max(rel_err(a, f));
        res.compared += 1;
    };
    for (k, g) in out.grads.iter().enumerate() {
        let p = &base[k];
        for i in 0..p.n() {
            let near = xs.iter().any(|xb| (pre(p, xb, i) - p.theta[i]).abs() < 2.0 * eps);
            for t in 0..GRAD_D {
                let f = fd(&|ps: &mut Vec<Params>, dh| ps[k].dec[i][t] += dh);
                record(g.decoder.get(i, t) as f64, f);
            }
            if near {
                res.excluded += GRAD_D + 1;
                continue;
            }
            for t in 0..GRAD_D {
                let f = fd(&|ps: &mut Vec<Params>, dh| ps[k].enc[i][t] += dh);
                record(g.encoder.get(i, t) as f64, f);
            }
            let f = fd(&|ps: &mut Vec<Params>, dh| ps[k].theta[i] += dh);
            record(g.thresholds[i] as f64, f);
        }
    }
    res
}
