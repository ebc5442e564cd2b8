//! Dense f32 kernels shared by every forward path.
//!
//! All accumulation is done in f32 in a fixed order so that two paths
//! evaluating the same expression produce the same bits.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row-major `rows x cols` matrix of f32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "tensor data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Stack equally sized rows into a matrix.
    pub fn from_rows<R: AsRef<[f32]>>(cols: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::Shape(format!("row of width {} in a {cols}-column matrix", row.len())));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Copy of columns `start..start + width`.
    pub fn columns(&self, start: usize, width: usize) -> Result<Tensor2> {
        if start + width > self.cols {
            return Err(Error::Shape(format!(
                "column range {start}..{} outside {} columns",
                start + width,
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Ok(Tensor2 { rows: self.rows, cols: width, data })
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot add {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor2 { rows: self.rows, cols: self.cols, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a · b` with each output element accumulated left to right over the
/// shared dimension, starting from 0.0.
pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let acc = &mut out[i * n..(i + 1) * n];
        let a_row = &a.data[i * k..(i + 1) * k];
        // k-outer, j-inner: every acc[j] still sees its terms in k order.
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (o, &b_kj) in acc.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
    Ok(Tensor2 { rows: m, cols: n, data: out })
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn rmsnorm(x: &[f32], gain: &[f32], eps: f32) -> Vec<f32> {
    let mut sum_sq = 0.0f32;
    for v in x {
        sum_sq += v * v;
    }
    let inv = 1.0 / (sum_sq / x.len() as f32 + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| g * (v * inv)).collect()
}

pub fn layernorm(x: &[f32], gain: &[f32], bias: &[f32], eps: f32) -> Vec<f32> {
    let n = x.len() as f32;
    let mut sum = 0.0f32;
    for v in x {
        sum += v;
    }
    let mean = sum / n;
    let mut var = 0.0f32;
    for v in x {
        let c = v - mean;
        var += c * c;
    }
    let var = var / n;
    let denom = var + eps;
    // Zero variance with eps = 0 would give 0/0; a constant row normalizes to 0.
    let inv = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
    x.iter()
        .zip(gain)
        .zip(bias)
        .map(|((v, g), b)| g * ((v - mean) * inv) + b)
        .collect()
}

pub fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_row(x: &[f32]) -> Vec<f32> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Rotate adjacent pairs `(x[2i], x[2i+1])` by `position * base^(-2i/h)`.
pub fn rope_rotate_in_place(x: &mut [f32], position: usize, base: f64) -> Result<()> {
    let h = x.len();
    if !h.is_multiple_of(2) {
        return Err(Error::Shape(format!("rope needs an even width, got {h}")));
    }
    if position == 0 {
        return Ok(());
    }
    for i in 0..h / 2 {
        let theta = position as f64 * base.powf(-2.0 * i as f64 / h as f64);
        let (sin, cos) = theta.sin_cos();
        let (sin, cos) = (sin as f32, cos as f32);
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * cos - b * sin;
        x[2 * i + 1] = a * sin + b * cos;
    }
    Ok(())
}

pub fn rope_rotate(x: &[f32], position: usize, base: f64) -> Result<Vec<f32>> {
    let mut out = x.to_vec();
    rope_rotate_in_place(&mut out, position, base)?;
    Ok(out)
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// Interleaved sinusoidal encoding: `pe[2i] = sin(w_i p)`, `pe[2i+1] = cos(w_i p)`
/// with `w_i = base^(-2i/d)`.
pub fn sinusoidal_pe(position: usize, d: usize, base: f64) -> Vec<f32> {
    (0..d)
        .map(|j| {
            let i = j / 2;
            let angle = position as f64 * base.powf(-2.0 * i as f64 / d as f64);
            if j % 2 == 0 {
                angle.sin() as f32
            } else {
                angle.cos() as f32
            }
        })
        .collect()
}
