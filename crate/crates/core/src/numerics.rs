//! Dense row-major matrices and the Adam optimizer.
//!
//! Storage is `f32`; every reduction (dot products, norms, matrix products)
//! accumulates in `f64`. Kernels that run in parallel split work by output
//! row only, so each output element is produced by the same sequential
//! reduction regardless of thread count.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HsaeError, Result};

/// Norms below this are treated as zero.
pub const NORM_FLOOR: f64 = 1e-12;

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 18;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(HsaeError::dim(
                "Matrix::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(HsaeError::InvalidArgument(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice yields `0 x 0`.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(HsaeError::dim(
                    "Matrix::from_rows",
                    format!("row length {cols}"),
                    format!("row {i} of length {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f32) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub(crate) fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(HsaeError::dim(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }
}

/// Dot product with `f64` accumulation in a fixed lane order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] as f64 * y[k] as f64;
        }
    }
    let mut tail = 0f64;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x as f64 * *y as f64;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x` in `f32`.
#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y += alpha * x` into an `f64` accumulator.
#[inline]
pub fn axpy_f64(alpha: f64, x: &[f32], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi as f64;
    }
}

/// Standard product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(HsaeError::dim(
            "matmul",
            format!("b.rows == {}", a.cols),
            b.rows,
        ));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    if n == 0 {
        return Ok(out);
    }
    let kernel = |(i, out_row): (usize, &mut [f32])| {
        let mut acc = vec![0f64; n];
        let a_row = a.row(i);
        for p in 0..k {
            let av = a_row[p];
            if av != 0.0 {
                axpy_f64(av as f64, b.row(p), &mut acc);
            }
        }
        for (o, v) in out_row.iter_mut().zip(&acc) {
            *o = *v as f32;
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.data.par_chunks_mut(n).enumerate().for_each(kernel);
    } else {
        out.data.chunks_mut(n).enumerate().for_each(kernel);
    }
    Ok(out)
}

/// `a · bᵀ`, where both operands hold their vectors as rows.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(HsaeError::dim(
            "matmul_transposed",
            format!("b.cols == {}", a.cols),
            b.cols,
        ));
    }
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Matrix::zeros(m, n);
    if n == 0 {
        return Ok(out);
    }
    let kernel = |(i, out_row): (usize, &mut [f32])| {
        let a_row = a.row(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(a_row, b.row(j)) as f32;
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.data.par_chunks_mut(n).enumerate().for_each(kernel);
    } else {
        out.data.chunks_mut(n).enumerate().for_each(kernel);
    }
    Ok(out)
}

/// Cosine similarity between every row of `a` and every row of `b`.
/// Pairs involving a (near) zero-norm row are reported as 0.
pub fn cosine_sim_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(HsaeError::dim(
            "cosine_sim_matrix",
            format!("b.cols == {}", a.cols),
            b.cols,
        ));
    }
    let na: Vec<f64> = (0..a.rows).map(|i| norm(a.row(i))).collect();
    let nb: Vec<f64> = (0..b.rows).map(|j| norm(b.row(j))).collect();
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            if na[i] < NORM_FLOOR || nb[j] < NORM_FLOOR {
                continue;
            }
            let c = dot(a.row(i), b.row(j)) / (na[i] * nb[j]);
            out.data[i * b.rows + j] = c.clamp(-1.0, 1.0) as f32;
        }
    }
    Ok(out)
}

/// Uniform sample from the unit sphere in `dim` dimensions.
pub fn random_unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

/// Scales `v` to unit norm in place. Returns `false` (leaving `v`
/// untouched) when its norm is below [`NORM_FLOOR`].
pub fn normalize_in_place(v: &mut [f32]) -> bool {
    let n = norm(v);
    if n < NORM_FLOOR {
        return false;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / n) as f32;
    }
    true
}

/// Rescales every column to unit L2 norm; (near) zero columns are replaced
/// by a random unit vector drawn from `rng`.
pub fn normalize_columns<R: Rng + ?Sized>(m: &Matrix, rng: &mut R) -> Matrix {
    let mut t = m.transpose();
    normalize_rows_in_place(&mut t, rng);
    t.transpose()
}

/// Row counterpart of [`normalize_columns`], in place.
pub fn normalize_rows_in_place<R: Rng + ?Sized>(m: &mut Matrix, rng: &mut R) {
    let cols = m.cols;
    for r in 0..m.rows {
        let row = m.row_mut(r);
        if !normalize_in_place(row) {
            row.copy_from_slice(&random_unit_vector(cols, rng));
        }
    }
}

/// Adam moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_base: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, beta1: f64, beta2: f64, eps: f64, lr_base: f64) -> Self {
        AdamState {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
            beta1,
            beta2,
            eps,
            lr_base,
        }
    }

    /// Bias-corrected Adam update of `param` in place; `step` is incremented
    /// even when `lr_now` is zero so that the bias correction stays aligned
    /// with the moment estimates.
    pub fn update(&mut self, param: &mut [f32], grad: &[f32], lr_now: f64) -> Result<()> {
        let len = self.m.data.len();
        if param.len() != len || grad.len() != len {
            return Err(HsaeError::dim(
                "adam_step",
                format!("{len} elements"),
                format!("param {}, grad {}", param.len(), grad.len()),
            ));
        }
        if !(lr_now >= 0.0) {
            return Err(HsaeError::InvalidArgument(format!(
                "learning rate must be >= 0, got {lr_now}"
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, &g), m), v) in param
            .iter_mut()
            .zip(grad)
            .zip(self.m.data.iter_mut())
            .zip(self.v.data.iter_mut())
        {
            let g = g as f64;
            let m_new = b1 * *m as f64 + (1.0 - b1) * g;
            let v_new = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = m_new as f32;
            *v = v_new as f32;
            if lr_now > 0.0 && m_new != 0.0 {
                let m_hat = m_new / bc1;
                let v_hat = v_new / bc2;
                *p = (*p as f64 - lr_now * m_hat / (v_hat.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }

    /// Zeroes both moments of one row (one feature's slice of the tensor).
    pub fn reset_row(&mut self, r: usize) {
        self.m.row_mut(r).fill(0.0);
        self.v.row_mut(r).fill(0.0);
    }
}

/// Applies one Adam step to a matrix parameter.
pub fn adam_step(param: &mut Matrix, grad: &Matrix, state: &mut AdamState, lr_now: f64) -> Result<()> {
    param.check_same_shape(grad, "adam_step")?;
    state.update(&mut param.data, &grad.data, lr_now)
}
