use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::esrm::{EncodeCache, EncoderParams, ModelShape, Pooling};
use crate::linalg::{axpy, log_sum_exp, softmax, Matrix};
use crate::params::Parameters;
use crate::snapshot::{SnapshotReader, SnapshotWriter};

use super::tasks::{Task, TaskInstance};

const RANK_POOLING: Pooling = Pooling::Sum;
const MAGIC: [u8; 8] = *b"FSERANK\0";
const VERSION: u32 = 1;

/// Per-task feature layer, classification head and gate expert.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskParams {
    /// `d × 2d`
    pub feature: Matrix,
    pub feature_bias: Vec<f64>,
    /// `2 × d`
    pub head: Matrix,
    pub head_bias: Vec<f64>,
    /// Gate expert: `d × d`, `d × d`, `1 × d`.
    pub gate1: Matrix,
    pub gate1_bias: Vec<f64>,
    pub gate2: Matrix,
    pub gate2_bias: Vec<f64>,
    pub gate3: Matrix,
    pub gate3_bias: Vec<f64>,
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
}

impl TaskParams {
    fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            feature: glorot(d, 2 * d, rng),
            feature_bias: vec![0.0; d],
            head: glorot(2, d, rng),
            head_bias: vec![0.0; 2],
            gate1: glorot(d, d, rng),
            gate1_bias: vec![0.0; d],
            gate2: glorot(d, d, rng),
            gate2_bias: vec![0.0; d],
            gate3: Matrix::zeros(1, d),
            gate3_bias: vec![0.0],
        }
    }

    fn tensors(&self) -> [&[f64]; 10] {
        [
            &self.feature.data,
            &self.feature_bias,
            &self.head.data,
            &self.head_bias,
            &self.gate1.data,
            &self.gate1_bias,
            &self.gate2.data,
            &self.gate2_bias,
            &self.gate3.data,
            &self.gate3_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 10] {
        [
            &mut self.feature.data,
            &mut self.feature_bias,
            &mut self.head.data,
            &mut self.head_bias,
            &mut self.gate1.data,
            &mut self.gate1_bias,
            &mut self.gate2.data,
            &mut self.gate2_bias,
            &mut self.gate3.data,
            &mut self.gate3_bias,
        ]
    }
}

/// Shared text encoder plus one [`TaskParams`] per task.
#[derive(Debug, Clone, PartialEq)]
pub struct RankerParams {
    pub encoder: EncoderParams,
    pub tasks: [TaskParams; 3],
}

impl Parameters for RankerParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.encoder.tensors();
        for task in &self.tasks {
            t.extend(task.tensors());
        }
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.encoder.tensors_mut();
        for task in &mut self.tasks {
            t.extend(task.tensors_mut());
        }
        t
    }
}

/// How task losses are combined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    /// Gate-produced coefficients.
    Moe,
    /// Fixed coefficients, renormalized over the tasks present in a batch.
    Fixed([f64; 3]),
}

/// Forward state of one pair through one task.
#[derive(Debug, Clone)]
pub struct PairCache {
    left: EncodeCache,
    right: EncodeCache,
    x: Vec<f64>,
    /// Task feature `Fe_T`.
    pub feature: Vec<f64>,
    pub logits: [f64; 2],
}

/// Forward state of one gate expert.
#[derive(Debug, Clone)]
struct GateCache {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

fn affine(w: &Matrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut z = w.matvec(x);
    z.iter_mut().zip(b).for_each(|(z, b)| *z += b);
    z
}

fn tanh_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

/// `dz = g ⊙ (1 - y²)` for `y = tanh(z)`.
fn tanh_backward(g: &[f64], y: &[f64]) -> Vec<f64> {
    g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()
}

/// `[u ⊙ v, (u - v)²]` of `u` and `v` rescaled from unit norm to norm `√d`,
/// which keeps the entries O(1) at any width.
pub fn interaction(u: &[f64], v: &[f64]) -> Vec<f64> {
    let d = u.len() as f64;
    let mut x: Vec<f64> = u.iter().zip(v).map(|(a, b)| d * a * b).collect();
    x.extend(u.iter().zip(v).map(|(a, b)| d * (a - b) * (a - b)));
    x
}

/// Per-task output of [`RankerParams::multitask_loss`].
#[derive(Debug, Clone)]
pub struct MultitaskOutput {
    pub loss: f64,
    /// Mean cross-entropy per task; `None` when the task is absent.
    pub task_losses: [Option<f64>; 3],
    pub alpha: [f64; 3],
    pub grads: RankerParams,
}

impl RankerParams {
    /// Wraps a (pretrained) encoder with freshly initialized task layers.
    pub fn init(encoder: EncoderParams, seed: u64) -> Self {
        let d = encoder.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tasks = [
            TaskParams::init(d, &mut rng),
            TaskParams::init(d, &mut rng),
            TaskParams::init(d, &mut rng),
        ];
        Self { encoder, tasks }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn pair_forward(&self, task: Task, left: &[u32], right: &[u32]) -> Result<PairCache> {
        let left = self.encoder.encode(left, RANK_POOLING)?;
        let right = self.encoder.encode(right, RANK_POOLING)?;
        let x = interaction(&left.output, &right.output);
        let p = &self.tasks[task.index()];
        let mut feature = affine(&p.feature, &p.feature_bias, &x);
        tanh_in_place(&mut feature);
        let z = affine(&p.head, &p.head_bias, &feature);
        Ok(PairCache {
            left,
            right,
            x,
            feature,
            logits: [z[0], z[1]],
        })
    }

    /// Accumulates gradients for `dL/dFe` and `dL/dlogits` of one pair.
    fn pair_backward(
        &self,
        task: Task,
        cache: &PairCache,
        grad_feature: &[f64],
        grad_logits: &[f64; 2],
        grads: &mut RankerParams,
    ) {
        let p = &self.tasks[task.index()];
        let g = &mut grads.tasks[task.index()];
        g.head.add_outer(1.0, grad_logits, &cache.feature);
        axpy(1.0, grad_logits, &mut g.head_bias);
        let mut d_fe = p.head.t_matvec(grad_logits);
        axpy(1.0, grad_feature, &mut d_fe);
        let dz = tanh_backward(&d_fe, &cache.feature);
        g.feature.add_outer(1.0, &dz, &cache.x);
        axpy(1.0, &dz, &mut g.feature_bias);
        let dx = p.feature.t_matvec(&dz);
        let d = self.dim();
        let scale = d as f64;
        let (u, v) = (&cache.left.output, &cache.right.output);
        let mut du = vec![0.0; d];
        let mut dv = vec![0.0; d];
        for k in 0..d {
            let diff = 2.0 * scale * (u[k] - v[k]) * dx[d + k];
            du[k] = scale * dx[k] * v[k] + diff;
            dv[k] = scale * dx[k] * u[k] - diff;
        }
        self.encoder.encode_backward(&cache.left, &du, &mut grads.encoder);
        self.encoder.encode_backward(&cache.right, &dv, &mut grads.encoder);
    }

    fn gate_forward(&self, task: Task, input: &[f64]) -> (f64, GateCache) {
        let p = &self.tasks[task.index()];
        let mut h1 = affine(&p.gate1, &p.gate1_bias, input);
        tanh_in_place(&mut h1);
        let mut h2 = affine(&p.gate2, &p.gate2_bias, &h1);
        tanh_in_place(&mut h2);
        let logit = affine(&p.gate3, &p.gate3_bias, &h2)[0];
        (
            logit,
            GateCache {
                input: input.to_vec(),
                h1,
                h2,
            },
        )
    }

    /// Returns `dL/dinput` for `dL/dlogit = g`.
    fn gate_backward(&self, task: Task, cache: &GateCache, g: f64, grads: &mut RankerParams) -> Vec<f64> {
        let p = &self.tasks[task.index()];
        let gp = &mut grads.tasks[task.index()];
        gp.gate3.add_outer(1.0, &[g], &cache.h2);
        gp.gate3_bias[0] += g;
        let dh2 = p.gate3.t_matvec(&[g]);
        let dz2 = tanh_backward(&dh2, &cache.h2);
        gp.gate2.add_outer(1.0, &dz2, &cache.h1);
        axpy(1.0, &dz2, &mut gp.gate2_bias);
        let dh1 = p.gate2.t_matvec(&dz2);
        let dz1 = tanh_backward(&dh1, &cache.h1);
        gp.gate1.add_outer(1.0, &dz1, &cache.input);
        axpy(1.0, &dz1, &mut gp.gate1_bias);
        p.gate1.t_matvec(&dz1)
    }

    /// Softmax over the gate logits of the tasks with features present.
    pub fn moe_coefficients(&self, features: [Option<&[f64]>; 3]) -> Result<[f64; 3]> {
        let mut logits = Vec::new();
        for (i, f) in features.iter().enumerate() {
            if let Some(f) = f {
                if f.len() != self.dim() {
                    return Err(Error::InvalidArgument(format!(
                        "task feature has dimension {} (expected {})",
                        f.len(),
                        self.dim()
                    )));
                }
                logits.push(self.gate_forward(Task::ALL[i], f).0);
            }
        }
        if logits.is_empty() {
            return Err(Error::InvalidArgument("no task features".into()));
        }
        let probs = softmax(&logits);
        let mut alpha = [0.0; 3];
        let mut k = 0;
        for (i, f) in features.iter().enumerate() {
            if f.is_some() {
                alpha[i] = probs[k];
                k += 1;
            }
        }
        Ok(alpha)
    }

    /// `L = Σ α_i L_i` over the tasks present in `batch`, with gradients
    /// through both the per-task losses and the coefficients.
    pub fn multitask_loss(&self, batch: &[TaskInstance], weighting: Weighting) -> Result<MultitaskOutput> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty ranking batch".into()));
        }
        let caches = batch
            .iter()
            .map(|inst| self.pair_forward(inst.task, &inst.left, &inst.right))
            .collect::<Result<Vec<_>>>()?;
        let d = self.dim();
        let mut counts = [0usize; 3];
        let mut sums = [0.0f64; 3];
        let mut means = vec![vec![0.0; d]; 3];
        for (inst, c) in batch.iter().zip(&caches) {
            let t = inst.task.index();
            counts[t] += 1;
            sums[t] += log_sum_exp(&c.logits) - c.logits[inst.label as usize];
            axpy(1.0, &c.feature, &mut means[t]);
        }
        for t in 0..3 {
            if counts[t] > 0 {
                let inv = 1.0 / counts[t] as f64;
                means[t].iter_mut().for_each(|m| *m *= inv);
            }
        }
        let present: Vec<usize> = (0..3).filter(|&t| counts[t] > 0).collect();
        for t in 0..3 {
            if counts[t] == 0 {
                log::trace!("task {} absent from batch; masked", Task::ALL[t]);
            }
        }
        let task_losses: [Option<f64>; 3] =
            std::array::from_fn(|t| (counts[t] > 0).then(|| sums[t] / counts[t] as f64));

        let mut grads = self.zeros_like();
        let mut grad_means = vec![vec![0.0; d]; 3];
        let alpha = match weighting {
            Weighting::Moe => {
                let gates: Vec<(f64, GateCache)> = present
                    .iter()
                    .map(|&t| self.gate_forward(Task::ALL[t], &means[t]))
                    .collect();
                let logits: Vec<f64> = gates.iter().map(|g| g.0).collect();
                let probs = softmax(&logits);
                let mut alpha = [0.0; 3];
                for (k, &t) in present.iter().enumerate() {
                    alpha[t] = probs[k];
                }
                let total: f64 = present.iter().map(|&t| alpha[t] * task_losses[t].unwrap_or(0.0)).sum();
                for (k, &t) in present.iter().enumerate() {
                    let g = alpha[t] * (task_losses[t].unwrap_or(0.0) - total);
                    grad_means[t] = self.gate_backward(Task::ALL[t], &gates[k].1, g, &mut grads);
                }
                alpha
            }
            Weighting::Fixed(w) => {
                let mass: f64 = present.iter().map(|&t| w[t]).sum();
                if !(mass > 0.0) {
                    return Err(Error::InvalidArgument(
                        "fixed task weights are zero for every task in the batch".into(),
                    ));
                }
                std::array::from_fn(|t| if counts[t] > 0 { w[t] / mass } else { 0.0 })
            }
        };
        let loss: f64 = present.iter().map(|&t| alpha[t] * task_losses[t].unwrap_or(0.0)).sum();

        for (inst, c) in batch.iter().zip(&caches) {
            let t = inst.task.index();
            let inv = 1.0 / counts[t] as f64;
            let p = softmax(&c.logits);
            let scale = alpha[t] * inv;
            let mut gl = [p[0] * scale, p[1] * scale];
            gl[inst.label as usize] -= scale;
            let gf: Vec<f64> = grad_means[t].iter().map(|g| g * inv).collect();
            self.pair_backward(inst.task, c, &gf, &gl, &mut grads);
        }
        Ok(MultitaskOutput {
            loss,
            task_losses,
            alpha,
            grads,
        })
    }

    /// Probability that the pair is similar, from the primary task's head.
    pub fn score_pair(&self, left: &[u32], right: &[u32]) -> Result<f64> {
        let c = self.pair_forward(Task::T1, left, right)?;
        Ok(softmax(&c.logits)[1])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = SnapshotWriter::new(MAGIC, VERSION);
        w.push_json(&(self.encoder.shape, self.encoder.seed));
        for t in self.tensors() {
            w.push_f64s(t);
        }
        w.write_to(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = SnapshotReader::open(path, MAGIC, VERSION)?;
        let (shape, seed): (ModelShape, u64) = r.next_json()?;
        let mut params = Self::init(EncoderParams::init(shape, seed)?, seed);
        for t in params.tensors_mut() {
            let values = r.next_f64s(t.len())?;
            t.copy_from_slice(&values);
        }
        if r.remaining() != 0 {
            return Err(Error::Corrupt("trailing records in ranker snapshot".into()));
        }
        if !params.all_finite() {
            return Err(Error::Corrupt("non-finite ranker weights".into()));
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, DEFAULT_REL_TOL, DEFAULT_STEP};
    use rand::Rng;

    pub(crate) fn toy(seed: u64) -> RankerParams {
        let enc = EncoderParams::init(
            ModelShape {
                dim: 4,
                vocab_size: 10,
                image_dim: 1,
                n_types: 1,
                n_difficulty: 1,
                n_concepts: 1,
            },
            seed,
        )
        .unwrap();
        let mut p = RankerParams::init(enc, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in p.tensors_mut() {
            for x in t.iter_mut() {
                *x += rng.random_range(-0.5..0.5);
            }
        }
        p
    }

    pub(crate) fn toy_batch(seed: u64, tasks: &[Task]) -> Vec<TaskInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..9)
            .map(|i| {
                let mut seq = |n| (0..n).map(|_| rng.random_range(3..10)).collect::<Vec<u32>>();
                TaskInstance {
                    task: tasks[i % tasks.len()],
                    left: seq(3),
                    right: seq(2),
                    label: (i % 2) as u8,
                }
            })
            .collect()
    }

    #[test]
    fn zero_gate_gives_uniform_coefficients() {
        let mut p = toy(1);
        for t in &mut p.tasks {
            t.gate3.data.fill(0.0);
            t.gate3_bias[0] = 0.0;
        }
        let f = [0.1, 0.2, -0.3, 0.4];
        let a = p.moe_coefficients([Some(&f), Some(&f), Some(&f)]).unwrap();
        for x in a {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = p.moe_coefficients([Some(&f), None, Some(&f)]).unwrap();
        assert_eq!(a[1], 0.0);
        assert!((a[0] + a[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_one_hot_equals_primary_loss() {
        let p = toy(2);
        let batch = toy_batch(3, &Task::ALL);
        let out = p.multitask_loss(&batch, Weighting::Fixed([1.0, 0.0, 0.0])).unwrap();
        assert_eq!(out.loss, out.task_losses[0].unwrap());
        let only_t1: Vec<TaskInstance> = batch.iter().filter(|i| i.task == Task::T1).cloned().collect();
        let direct = p.multitask_loss(&only_t1, Weighting::Moe).unwrap();
        assert!((direct.loss - out.loss).abs() < 1e-12);
        assert_eq!(direct.alpha, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn multitask_gradients_match_finite_differences() {
        for seed in 0..3 {
            let p = toy(seed);
            for (tasks, w) in [
                (&Task::ALL[..], Weighting::Moe),
                (&Task::ALL[..2], Weighting::Moe),
                (&Task::ALL[..], Weighting::Fixed([0.2, 0.3, 0.5])),
            ] {
                let batch = toy_batch(seed + 10, tasks);
                let out = p.multitask_loss(&batch, w).unwrap();
                let report = gradcheck::check(&p, &out.grads, DEFAULT_STEP, DEFAULT_REL_TOL, |q| {
                    q.multitask_loss(&batch, w).unwrap().loss
                });
                assert!(report.passed(), "seed {seed} {w:?}: {report:?}");
            }
        }
    }

    #[test]
    fn scores_are_probabilities_and_snapshot_round_trips() {
        let p = toy(4);
        let s = p.score_pair(&[3, 4], &[5]).unwrap();
        assert!((0.0..=1.0).contains(&s));
        assert_eq!(s, p.score_pair(&[3, 4], &[5]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.bin");
        p.save(&path).unwrap();
        assert_eq!(RankerParams::load(&path).unwrap(), p);
    }
}
