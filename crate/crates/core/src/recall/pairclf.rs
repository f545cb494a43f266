//! Logistic pair classifiers over exercise embeddings and token overlap.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

use crate::linalg::{dot, sigmoid};
use crate::snapshot::{SnapshotReader, SnapshotWriter};

const MAGIC: [u8; 8] = *b"FSEPAIR\0";
const VERSION: u32 = 1;

/// `Symmetric` shares the weights of the two embeddings, so swapping the pair
/// leaves every feature, and therefore the output, bit-identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    Symmetric,
    Directional,
}

/// What the classifier sees of one exercise.
#[derive(Debug, Clone, Copy)]
pub struct PairSide<'a> {
    pub embedding: &'a [f64],
    pub tokens: &'a [u32],
    pub formula: &'a [u32],
}

/// `1 - levenshtein(a, b) / max(|a|, |b|)`; two empty sequences are identical.
pub fn edit_similarity(a: &[u32], b: &[u32]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - strsim::generic_levenshtein(&a.to_vec(), &b.to_vec()) as f64 / longest as f64
}

pub fn pair_features(mode: PairMode, a: PairSide, b: PairSide) -> Vec<f64> {
    let (u, v) = (a.embedding, b.embedding);
    let mut f = Vec::with_capacity(4 * u.len() + 2);
    match mode {
        PairMode::Symmetric => f.extend(u.iter().zip(v).map(|(x, y)| x + y)),
        PairMode::Directional => {
            f.extend_from_slice(u);
            f.extend_from_slice(v);
        }
    }
    f.extend(u.iter().zip(v).map(|(x, y)| (x - y).abs()));
    f.extend(u.iter().zip(v).map(|(x, y)| x * y));
    f.push(edit_similarity(a.tokens, b.tokens));
    f.push(edit_similarity(a.formula, b.formula));
    f
}

pub fn feature_len(mode: PairMode, dim: usize) -> usize {
    match mode {
        PairMode::Symmetric => 3 * dim + 2,
        PairMode::Directional => 4 * dim + 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticConfig {
    /// Newton iterations at most.
    pub max_iter: usize,
    /// Stop once the largest gradient entry falls below this.
    pub tol: f64,
    /// L2 penalty on the weights (not the bias).
    pub l2: f64,
    pub threshold: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-9,
            l2: 1e-5,
            threshold: 0.5,
        }
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean log-loss plus `l2 / 2 * |w|^2`; the last entry of `theta` is the bias.
fn objective(x: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>, l2: f64) -> f64 {
    let z = x * theta;
    let n = x.nrows() as f64;
    let loss: f64 = z.iter().zip(y.iter()).map(|(z, y)| softplus(*z) - y * z).sum::<f64>() / n;
    let w = theta.rows(0, theta.len() - 1);
    loss + 0.5 * l2 * w.norm_squared()
}

/// Trained logistic head. Only obtainable by training or loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairClassifier {
    mode: PairMode,
    dim: usize,
    weights: Vec<f64>,
    bias: f64,
    threshold: f64,
}

impl PairClassifier {
    /// Damped Newton steps on mean log-loss plus an L2 penalty.
    pub fn train(
        mode: PairMode,
        dim: usize,
        examples: &[(Vec<f64>, bool)],
        cfg: &LogisticConfig,
    ) -> Result<Self> {
        let width = feature_len(mode, dim);
        if examples.is_empty() {
            return Err(Error::InvalidArgument("no training examples".into()));
        }
        if !examples.iter().any(|e| e.1) || examples.iter().all(|e| e.1) {
            return Err(Error::InvalidArgument(
                "pair classifier needs both classes".into(),
            ));
        }
        if examples.iter().any(|e| e.0.len() != width) {
            return Err(Error::InvalidArgument("feature width mismatch".into()));
        }
        if !(cfg.l2 > 0.0) {
            return Err(Error::InvalidArgument("l2 must be positive".into()));
        }
        let n = examples.len();
        let p = width + 1;
        let x = DMatrix::from_fn(n, p, |i, j| if j < width { examples[i].0[j] } else { 1.0 });
        let y = DVector::from_fn(n, |i, _| if examples[i].1 { 1.0 } else { 0.0 });
        let mut theta = DVector::zeros(p);
        let mut f = objective(&x, &y, &theta, cfg.l2);
        let inv_n = 1.0 / n as f64;
        for _ in 0..cfg.max_iter {
            let prob = (&x * &theta).map(sigmoid);
            let mut grad = x.tr_mul(&(&prob - &y)) * inv_n;
            let mut hess = x.tr_mul(&DMatrix::from_fn(n, p, |i, j| x[(i, j)] * prob[i] * (1.0 - prob[i]))) * inv_n;
            for j in 0..width {
                grad[j] += cfg.l2 * theta[j];
                hess[(j, j)] += cfg.l2;
            }
            // The bias is unpenalized; a tiny ridge keeps the solve defined
            // when every probability saturates.
            hess[(width, width)] += 1e-12;
            if grad.amax() < cfg.tol {
                break;
            }
            let step = hess
                .cholesky()
                .ok_or_else(|| Error::Divergence("singular pair classifier Hessian".into()))?
                .solve(&grad);
            let mut t = 1.0;
            loop {
                let cand = &theta - &step * t;
                let fc = objective(&x, &y, &cand, cfg.l2);
                if fc <= f || t < 1e-10 {
                    theta = cand;
                    f = fc;
                    break;
                }
                t *= 0.5;
            }
        }
        let w: Vec<f64> = theta.rows(0, width).iter().copied().collect();
        let bias = theta[width];
        if !w.iter().all(|x| x.is_finite()) || !bias.is_finite() {
            return Err(Error::Divergence("pair classifier weights diverged".into()));
        }
        Ok(Self {
            mode,
            dim,
            weights: w,
            bias,
            threshold: cfg.threshold,
        })
    }

    pub fn mode(&self) -> PairMode {
        self.mode
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn set_threshold(&mut self, t: f64) {
        self.threshold = t;
    }

    pub fn probability(&self, a: PairSide, b: PairSide) -> Result<f64> {
        if a.embedding.len() != self.dim || b.embedding.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "pair classifier expects dimension {}",
                self.dim
            )));
        }
        Ok(self.probability_of(&pair_features(self.mode, a, b)))
    }

    pub fn probability_of(&self, features: &[f64]) -> f64 {
        sigmoid(dot(&self.weights, features) + self.bias)
    }

    pub fn predict(&self, a: PairSide, b: PairSide) -> Result<bool> {
        Ok(self.probability(a, b)? >= self.threshold)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = SnapshotWriter::new(MAGIC, VERSION);
        w.push_json(&(self.mode, self.dim, self.bias, self.threshold));
        w.push_f64s(&self.weights);
        w.write_to(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = SnapshotReader::open(path, MAGIC, VERSION)?;
        let (mode, dim, bias, threshold): (PairMode, usize, f64, f64) = r.next_json()?;
        let weights = r.next_f64s(feature_len(mode, dim))?;
        if r.remaining() != 0 {
            return Err(Error::Corrupt("trailing records in pair classifier".into()));
        }
        Ok(Self {
            mode,
            dim,
            weights,
            bias,
            threshold,
        })
    }
}
