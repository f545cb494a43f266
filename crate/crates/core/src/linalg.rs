//! Small dense helpers for the hand-differentiated models.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Below this L2 norm a vector is treated as degenerate by [`normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

/// Row-major dense matrix. Weight matrices are stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn uniform<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ · g`
    pub fn t_matvec(&self, g: &[f64]) -> Vec<f64> {
        debug_assert_eq!(g.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &gi) in g.iter().enumerate() {
            if gi != 0.0 {
                axpy(gi, self.row(i), &mut out);
            }
        }
        out
    }

    /// `self += scale · g xᵀ`
    pub fn add_outer(&mut self, scale: f64, g: &[f64], x: &[f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (i, &gi) in g.iter().enumerate() {
            let s = scale * gi;
            if s != 0.0 {
                axpy(s, x, self.row_mut(i));
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// L2-normalizes `u`, returning the unit vector and the input norm.
///
/// A vector whose norm is under [`NORM_FLOOR`] maps to the first basis
/// direction, with a reported norm of zero so [`normalize_backward`] passes no
/// gradient through it.
pub fn normalize(u: &[f64]) -> (Vec<f64>, f64) {
    let n = l2_norm(u);
    if n < NORM_FLOOR {
        let mut e = vec![0.0; u.len()];
        if let Some(first) = e.first_mut() {
            *first = 1.0;
        }
        return (e, 0.0);
    }
    (u.iter().map(|x| x / n).collect(), n)
}

/// Gradient of `normalize` w.r.t. its input: `(g − e (e·g)) / n`.
pub fn normalize_backward(e: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; e.len()];
    }
    let proj = dot(e, g);
    e.iter()
        .zip(g)
        .map(|(ei, gi)| (gi - ei * proj) / norm)
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}
