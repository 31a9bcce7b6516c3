//! Dense row-major kernels used by every other module.
//!
//! Storage is `f32`; reductions (dot products, sums, norms) accumulate in
//! `f64` and round once on the way out.

use crate::error::{Result, TestaError};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TestaError::shape(
                "Matrix::new",
                format!(
                    "{rows}x{cols} needs {} values, got {}",
                    rows * cols,
                    data.len()
                ),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TestaError::shape("Matrix::from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
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

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics; a zero-width matrix still has `rows` empty rows.
        (0..self.rows).map(move |r| self.row(r))
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

    /// Gather the given rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols))
            .map(|i| self.get(i, i) as f64)
            .sum()
    }
}

fn matmul_row(a_row: &[f32], b: &Matrix, out: &mut [f32], acc: &mut [f64]) {
    acc.iter_mut().for_each(|v| *v = 0.0);
    for (k, &aik) in a_row.iter().enumerate() {
        if aik == 0.0 {
            continue;
        }
        let aik = aik as f64;
        for (s, &bkj) in acc.iter_mut().zip(b.row(k)) {
            *s += aik * bkj as f64;
        }
    }
    for (o, s) in out.iter_mut().zip(acc.iter()) {
        *o = *s as f32;
    }
}

/// Standard matrix product `a × b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(TestaError::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    if b.cols == 0 {
        return Ok(out);
    }

    #[cfg(feature = "parallel")]
    out.data.par_chunks_mut(b.cols).enumerate().for_each_init(
        || vec![0.0f64; b.cols],
        |acc, (i, row)| matmul_row(a.row(i), b, row, acc),
    );

    #[cfg(not(feature = "parallel"))]
    {
        let mut acc = vec![0.0f64; b.cols];
        for (i, row) in out.data.chunks_mut(b.cols).enumerate() {
            matmul_row(a.row(i), b, row, &mut acc);
        }
    }
    Ok(out)
}

/// Row-wise softmax of `m / scale`, stabilized by subtracting each row's max.
pub fn softmax_rows(m: &Matrix, scale: f32) -> Result<Matrix> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(TestaError::NonFinite("softmax_rows scale"));
    }
    if !m.is_finite() {
        return Err(TestaError::NonFinite("softmax_rows"));
    }
    let mut out = m.clone();
    let inv = 1.0 / scale as f64;
    for r in 0..out.rows {
        let row = out.row_mut(r);
        softmax_in_place(row, inv);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f32], inv_scale: f64) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut exps = Vec::with_capacity(row.len());
    let mut total = 0.0f64;
    for &x in row.iter() {
        let e = ((x as f64 - max) * inv_scale).exp();
        total += e;
        exps.push(e);
    }
    for (o, e) in row.iter_mut().zip(exps) {
        *o = (e / total) as f32;
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub(crate) fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Pairwise cosine similarity between the rows of `x` and the rows of `y`.
///
/// A zero-norm row has similarity 0 with everything, itself included.
pub fn cosine_sim_matrix(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    if x.cols != y.cols {
        return Err(TestaError::shape(
            "cosine_sim_matrix",
            format!("row widths {} and {}", x.cols, y.cols),
        ));
    }
    let xn: Vec<f64> = x.iter_rows().map(norm).collect();
    let yn: Vec<f64> = y.iter_rows().map(norm).collect();
    let mut out = Matrix::zeros(x.rows, y.rows);
    for (i, &nx) in xn.iter().enumerate() {
        for (j, &ny) in yn.iter().enumerate() {
            let denom = nx * ny;
            let sim = if denom > 0.0 {
                (dot(x.row(i), y.row(j)) / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            out.set(i, j, sim as f32);
        }
    }
    Ok(out)
}

/// `Σ wᵢ vᵢ / Σ wᵢ` over equal-length vectors with positive weights.
pub fn weighted_mean(values: &[&[f32]], weights: &[f64]) -> Result<Vec<f32>> {
    if values.is_empty() {
        return Err(TestaError::Empty("weighted_mean"));
    }
    if values.len() != weights.len() {
        return Err(TestaError::shape(
            "weighted_mean",
            format!("{} values, {} weights", values.len(), weights.len()),
        ));
    }
    let dim = values[0].len();
    if values.iter().any(|v| v.len() != dim) {
        return Err(TestaError::shape(
            "weighted_mean",
            "vectors differ in length",
        ));
    }
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(TestaError::NonFinite("weighted_mean weights"));
    }
    let total: f64 = weights.iter().sum();
    let mut acc = vec![0.0f64; dim];
    for (v, &w) in values.iter().zip(weights) {
        for (a, &x) in acc.iter_mut().zip(v.iter()) {
            *a += w * x as f64;
        }
    }
    Ok(acc.into_iter().map(|a| (a / total) as f32).collect())
}

/// Layer normalization of every row with affine parameters `gamma`, `beta`.
pub fn layer_norm(x: &Matrix, gamma: &[f32], beta: &[f32], eps: f64) -> Matrix {
    let mut out = x.clone();
    let n = x.cols as f64;
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = ((*v as f64 - mean) * inv * g as f64 + b as f64) as f32;
        }
    }
    out
}

/// Tanh-approximated GELU.
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

pub(crate) fn add_row_bias(m: &mut Matrix, bias: &[f32]) {
    for r in 0..m.rows {
        for (v, &b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}
