//! A single JumpReLU sparse-autoencoder level.
//!
//! Feature `i` of a level owns an encoder row `e_i`, a decoder direction
//! `d_i` and a threshold `θ_i`; its output on `x` is
//! `d_i · σ(e_iᵀx)` with `σ(u) = u · 1[u > θ_i]`. There are no biases.
//!
//! Gradients through the threshold use the rectangle-kernel
//! straight-through estimator: with `K(u) = 1[|u| ≤ ½]` and bandwidth `ε`,
//!
//! ```text
//! ∂σ/∂θ ≈ -(θ/ε)·K((pre-θ)/ε)     ∂H/∂θ ≈ -(1/ε)·K((pre-θ)/ε)
//! ∂σ/∂pre = 1[pre > θ]            ∂H/∂pre = 0
//! ```
//!
//! where `H(pre) = 1[pre > θ]` is the step inside the L0 count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HsaeError, Result};
use crate::numerics::{self, dot, matmul_transposed, Matrix};

pub const DEFAULT_THETA_INIT: f32 = 0.001;
pub const DEFAULT_LAMBDA_INIT: f32 = 1e-4;
pub const DEFAULT_BANDWIDTH: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeLevel {
    /// Zero-based position in the ladder (0 = coarsest).
    pub level_index: usize,
    /// `n × d`, one encoder row per feature.
    pub encoder: Matrix,
    /// `n × d`, one unit-norm decoder direction per feature.
    pub decoder: Matrix,
    pub thresholds: Vec<f32>,
    pub lambda: f32,
}

/// Compressed per-sample feature index lists.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSets {
    offsets: Vec<usize>,
    indices: Vec<u32>,
}

impl FeatureSets {
    fn with_capacity(rows: usize) -> Self {
        let mut offsets = Vec::with_capacity(rows + 1);
        offsets.push(0);
        FeatureSets {
            offsets,
            indices: Vec::new(),
        }
    }

    fn push(&mut self, i: usize) {
        self.indices.push(i as u32);
    }

    fn end_row(&mut self) {
        self.offsets.push(self.indices.len());
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    pub fn row(&self, b: usize) -> &[u32] {
        &self.indices[self.offsets[b]..self.offsets[b + 1]]
    }

    pub fn total(&self) -> usize {
        self.indices.len()
    }

    /// Index lists of the non-zero entries of a dense `batch × n` mask.
    pub fn from_mask(mask: &Matrix) -> Self {
        let mut s = FeatureSets::with_capacity(mask.rows());
        for b in 0..mask.rows() {
            for (i, v) in mask.row(b).iter().enumerate() {
                if *v != 0.0 {
                    s.push(i);
                }
            }
            s.end_row();
        }
        s
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Self {
        let mut s = FeatureSets::with_capacity(rows.len());
        for r in rows {
            let mut r = r.clone();
            r.sort_unstable();
            r.dedup();
            r.into_iter().for_each(|i| s.push(i));
            s.end_row();
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelForward {
    /// `batch × n` pre-activations `e_iᵀx`.
    pub pre: Matrix,
    /// JumpReLU outputs; inactive entries are exactly `0.0`.
    pub acts: Matrix,
    /// Indices of active features, per sample, ascending.
    pub active: FeatureSets,
    /// `batch × d` reconstruction `acts · decoder`.
    pub recon: Matrix,
}

impl LevelForward {
    #[inline]
    pub fn is_active(&self, b: usize, i: usize) -> bool {
        self.active.row(b).binary_search(&(i as u32)).is_ok()
    }

    /// Dense 0/1 activity mask, `batch × n`.
    pub fn mask(&self) -> Matrix {
        let mut m = Matrix::zeros(self.acts.rows(), self.acts.cols());
        for b in 0..self.acts.rows() {
            for &i in self.active.row(b) {
                m.set(b, i as usize, 1.0);
            }
        }
        m
    }

    pub fn batch(&self) -> usize {
        self.pre.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaeLoss {
    pub total: f64,
    pub mse: f64,
    pub l0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelGrads {
    pub encoder: Matrix,
    pub decoder: Matrix,
    pub thresholds: Vec<f32>,
}

impl SaeLevel {
    /// Random unit-sphere decoder, encoder tied to the decoder, default
    /// threshold and sparsity weight.
    pub fn new(level_index: usize, d: usize, n: usize, seed: u64) -> Result<Self> {
        Self::with_init(level_index, d, n, seed, DEFAULT_THETA_INIT, DEFAULT_LAMBDA_INIT)
    }

    pub fn with_init(
        level_index: usize,
        d: usize,
        n: usize,
        seed: u64,
        theta_init: f32,
        lambda_init: f32,
    ) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(HsaeError::InvalidArgument(format!(
                "level dimensions must be positive (d={d}, n={n})"
            )));
        }
        if !(theta_init >= 0.0) || !(lambda_init >= 0.0) {
            return Err(HsaeError::InvalidArgument(
                "theta_init and lambda_init must be >= 0".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend(numerics::random_unit_vector(d, &mut rng));
        }
        let decoder = Matrix::from_vec(n, d, data)?;
        Ok(SaeLevel {
            level_index,
            encoder: decoder.clone(),
            decoder,
            thresholds: vec![theta_init; n],
            lambda: lambda_init,
        })
    }

    #[inline]
    pub fn dict_size(&self) -> usize {
        self.encoder.rows()
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.encoder.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<LevelForward> {
        if x.cols() != self.input_dim() {
            return Err(HsaeError::dim("forward", self.input_dim(), x.cols()));
        }
        let pre = matmul_transposed(x, &self.encoder)?;
        let (batch, n, d) = (x.rows(), self.dict_size(), self.input_dim());
        let mut acts = Matrix::zeros(batch, n);
        let mut active = FeatureSets::with_capacity(batch);
        let mut recon = Matrix::zeros(batch, d);
        let mut acc = vec![0f64; d];
        for b in 0..batch {
            acc.iter_mut().for_each(|v| *v = 0.0);
            let pre_row = pre.row(b);
            let act_row = acts.row_mut(b);
            for i in 0..n {
                let p = pre_row[i];
                if p > self.thresholds[i] {
                    act_row[i] = p;
                    active.push(i);
                    numerics::axpy_f64(p as f64, self.decoder.row(i), &mut acc);
                }
            }
            active.end_row();
            for (r, v) in recon.row_mut(b).iter_mut().zip(&acc) {
                *r = *v as f32;
            }
        }
        Ok(LevelForward {
            pre,
            acts,
            active,
            recon,
        })
    }

    /// Decoder output of a single feature at activation `a`.
    pub fn feature_output(&self, i: usize, a: f32) -> Vec<f32> {
        self.decoder.row(i).iter().map(|v| v * a).collect()
    }

    /// Clamps thresholds to be non-negative.
    pub fn clamp_thresholds(&mut self) {
        for t in &mut self.thresholds {
            if *t < 0.0 {
                *t = 0.0;
            }
        }
    }
}

/// Mean per-sample squared error, mean active count, and `mse + λ·l0`.
pub fn sae_loss(fwd: &LevelForward, x: &Matrix, lambda: f64) -> Result<SaeLoss> {
    fwd.recon.check_same_shape(x, "sae_loss")?;
    let mse = mean_squared_error(&fwd.recon, x);
    let l0 = mean_l0(fwd);
    Ok(SaeLoss {
        total: mse + lambda * l0,
        mse,
        l0,
    })
}

/// Batch mean of `‖recon_b − x_b‖²`.
pub(crate) fn mean_squared_error(recon: &Matrix, x: &Matrix) -> f64 {
    let batch = x.rows();
    if batch == 0 {
        return 0.0;
    }
    let mut total = 0f64;
    for b in 0..batch {
        total += recon
            .row(b)
            .iter()
            .zip(x.row(b))
            .map(|(r, v)| {
                let e = *r as f64 - *v as f64;
                e * e
            })
            .sum::<f64>();
    }
    total / batch as f64
}

pub(crate) fn mean_l0(fwd: &LevelForward) -> f64 {
    let batch = fwd.batch();
    if batch == 0 {
        0.0
    } else {
        fwd.active.total() as f64 / batch as f64
    }
}

/// Rectangle-kernel pseudo-derivatives `(∂σ/∂θ, ∂H/∂θ)`.
#[inline]
pub fn pseudo_derivatives(pre: f64, theta: f64, eps: f64) -> (f64, f64) {
    if ((pre - theta) / eps).abs() <= 0.5 {
        (-theta / eps, -1.0 / eps)
    } else {
        (0.0, 0.0)
    }
}

/// Per-level gradient buffers filled by one or more loss terms before
/// [`finish_backward`] turns them into parameter gradients.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    n: usize,
    d: usize,
    /// `batch × n` gradient with respect to feature activations; only
    /// entries in [`relevant_entries`] are ever read.
    pub act: Vec<f64>,
    /// `n × d` decoder gradient.
    pub decoder: Vec<f64>,
}

impl GradAccumulator {
    pub fn new(batch: usize, n: usize, d: usize) -> Self {
        GradAccumulator {
            n,
            d,
            act: vec![0.0; batch * n],
            decoder: vec![0.0; n * d],
        }
    }

    #[inline]
    pub fn act_mut(&mut self, b: usize, i: usize) -> &mut f64 {
        &mut self.act[b * self.n + i]
    }

    #[inline]
    pub fn decoder_row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.decoder[i * self.d..(i + 1) * self.d]
    }
}

/// Entries whose activation gradient matters: active features plus those
/// whose pre-activation lies inside the threshold kernel window.
pub fn relevant_entries(level: &SaeLevel, fwd: &LevelForward, eps: f64) -> FeatureSets {
    let batch = fwd.batch();
    let mut sets = FeatureSets::with_capacity(batch);
    for b in 0..batch {
        let pre = fwd.pre.row(b);
        for (i, &p) in pre.iter().enumerate() {
            let t = level.thresholds[i];
            if p > t || ((p as f64 - t as f64) / eps).abs() <= 0.5 {
                sets.push(i);
            }
        }
        sets.end_row();
    }
    sets
}

/// Routes a reconstruction gradient `g` (`batch × d`) through the features
/// selected by `include` into `acc`.
pub fn accumulate_recon_grad<F>(
    level: &SaeLevel,
    fwd: &LevelForward,
    relevant: &FeatureSets,
    g: &[Vec<f64>],
    scale: f64,
    include: F,
    acc: &mut GradAccumulator,
) where
    F: Fn(usize) -> bool,
{
    let d = level.input_dim();
    let mut g32 = vec![0f32; d];
    for (b, gb) in g.iter().enumerate() {
        if gb.iter().all(|v| *v == 0.0) {
            continue;
        }
        for (o, v) in g32.iter_mut().zip(gb) {
            *o = *v as f32;
        }
        for &i in relevant.row(b) {
            let i = i as usize;
            if !include(i) {
                continue;
            }
            let dg = dot_f64(gb, level.decoder.row(i));
            *acc.act_mut(b, i) += scale * dg;
            let a = fwd.acts.get(b, i);
            if a != 0.0 {
                let row = acc.decoder_row_mut(i);
                for (r, v) in row.iter_mut().zip(gb) {
                    *r += scale * a as f64 * v;
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot_f64(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * *y as f64).sum()
}

/// Converts accumulated activation gradients into encoder and threshold
/// gradients, adding the L0 term `λ·mean_b H` through its pseudo-derivative.
pub fn finish_backward(
    level: &SaeLevel,
    fwd: &LevelForward,
    x: &Matrix,
    relevant: &FeatureSets,
    acc: GradAccumulator,
    lambda: f64,
    eps: f64,
) -> LevelGrads {
    let (n, d) = (level.dict_size(), level.input_dim());
    let batch = fwd.batch();
    let mut d_enc = vec![0f64; n * d];
    let mut d_theta = vec![0f64; n];
    let l0_scale = if batch > 0 { lambda / batch as f64 } else { 0.0 };
    for b in 0..batch {
        let xb = x.row(b);
        for &i in relevant.row(b) {
            let i = i as usize;
            let p = fwd.pre.get(b, i) as f64;
            let t = level.thresholds[i] as f64;
            let g_act = acc.act[b * n + i];
            let (dsig, dh) = pseudo_derivatives(p, t, eps);
            d_theta[i] += g_act * dsig + l0_scale * dh;
            if fwd.acts.get(b, i) != 0.0 && g_act != 0.0 {
                numerics::axpy_f64(g_act, xb, &mut d_enc[i * d..(i + 1) * d]);
            }
        }
    }
    let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    LevelGrads {
        encoder: Matrix::from_vec(n, d, to32(d_enc)).expect("shape"),
        decoder: Matrix::from_vec(n, d, to32(acc.decoder)).expect("shape"),
        thresholds: to32(d_theta),
    }
}

/// Full backward pass of `mse + λ·l0` for one level. When `upstream` is
/// given it replaces the internal reconstruction gradient `2(recon − x)/batch`.
pub fn backward(
    level: &SaeLevel,
    fwd: &LevelForward,
    x: &Matrix,
    lambda: f64,
    upstream: Option<&Matrix>,
    eps: f64,
) -> Result<LevelGrads> {
    fwd.recon.check_same_shape(x, "backward")?;
    if let Some(u) = upstream {
        u.check_same_shape(x, "backward(upstream)")?;
    }
    let batch = x.rows();
    let g: Vec<Vec<f64>> = (0..batch)
        .map(|b| match upstream {
            Some(u) => u.row(b).iter().map(|v| *v as f64).collect(),
            None => fwd
                .recon
                .row(b)
                .iter()
                .zip(x.row(b))
                .map(|(r, v)| 2.0 * (*r as f64 - *v as f64) / batch as f64)
                .collect(),
        })
        .collect();
    let relevant = relevant_entries(level, fwd, eps);
    let mut acc = GradAccumulator::new(batch, level.dict_size(), level.input_dim());
    accumulate_recon_grad(level, fwd, &relevant, &g, 1.0, |_| true, &mut acc);
    Ok(finish_backward(level, fwd, x, &relevant, acc, lambda, eps))
}

/// Pre-activation of feature `i` on an arbitrary input row.
pub fn pre_activation(level: &SaeLevel, i: usize, x: &[f32]) -> f64 {
    dot(level.encoder.row(i), x)
}
