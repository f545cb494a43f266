use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::MetaSchema;
use crate::error::{Error, Result};
use crate::linalg::{normalize, normalize_backward, Matrix};
use crate::params::Parameters;
use crate::snapshot::{SnapshotReader, SnapshotWriter};

/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.05;

const MAGIC: [u8; 8] = *b"FSEESRM\0";
const VERSION: u32 = 1;

/// Dimensions of an encoder, stored in snapshot headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub dim: usize,
    pub vocab_size: usize,
    pub image_dim: usize,
    pub n_types: usize,
    pub n_difficulty: usize,
    pub n_concepts: usize,
}

impl ModelShape {
    pub fn for_schema(schema: &MetaSchema, vocab_size: usize, dim: usize) -> Self {
        Self {
            dim,
            vocab_size,
            image_dim: schema.image_dim,
            n_types: schema.exercise_types.len(),
            n_difficulty: schema.difficulty_levels as usize,
            n_concepts: schema.concept_count as usize,
        }
    }
}

/// How token embeddings are pooled before the transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub shape: ModelShape,
    pub seed: u64,
    /// `vocab_size × d`
    pub embeddings: Matrix,
    /// `d × d`
    pub transform: Matrix,
    pub transform_bias: Vec<f64>,
    /// `d × d_img`
    pub image_proj: Matrix,
    pub image_bias: Vec<f64>,
    pub type_head: Matrix,
    pub type_bias: Vec<f64>,
    pub difficulty_head: Matrix,
    pub difficulty_bias: Vec<f64>,
    pub concept_head: Matrix,
    pub concept_bias: Vec<f64>,
}

impl EncoderParams {
    /// Weights uniform in `[-INIT_SCALE, INIT_SCALE]`, biases zero.
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        if shape.dim == 0 || shape.vocab_size == 0 {
            return Err(Error::InvalidArgument(
                "encoder needs a positive dimension and vocabulary".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = shape.dim;
        Ok(Self {
            shape,
            seed,
            embeddings: Matrix::uniform(shape.vocab_size, d, INIT_SCALE, &mut rng),
            transform: Matrix::uniform(d, d, INIT_SCALE, &mut rng),
            transform_bias: vec![0.0; d],
            image_proj: Matrix::uniform(d, shape.image_dim, INIT_SCALE, &mut rng),
            image_bias: vec![0.0; d],
            type_head: Matrix::uniform(shape.n_types, d, INIT_SCALE, &mut rng),
            type_bias: vec![0.0; shape.n_types],
            difficulty_head: Matrix::uniform(shape.n_difficulty, d, INIT_SCALE, &mut rng),
            difficulty_bias: vec![0.0; shape.n_difficulty],
            concept_head: Matrix::uniform(shape.n_concepts, d, INIT_SCALE, &mut rng),
            concept_bias: vec![0.0; shape.n_concepts],
        })
    }

    /// Same shape, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    pub fn dim(&self) -> usize {
        self.shape.dim
    }

    /// Pools, transforms and normalizes `tokens`, keeping what backprop needs.
    pub fn encode(&self, tokens: &[u32], pooling: Pooling) -> Result<EncodeCache> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        let d = self.dim();
        let scale = match pooling {
            Pooling::Sum => 1.0,
            Pooling::Mean => 1.0 / tokens.len() as f64,
        };
        let mut pooled = vec![0.0; d];
        for &t in tokens {
            if t as usize >= self.shape.vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "token id {t} outside vocabulary of {}",
                    self.shape.vocab_size
                )));
            }
            for (p, x) in pooled.iter_mut().zip(self.embeddings.row(t as usize)) {
                *p += x;
            }
        }
        pooled.iter_mut().for_each(|p| *p *= scale);
        let mut hidden = self.transform.matvec(&pooled);
        for (h, b) in hidden.iter_mut().zip(&self.transform_bias) {
            *h = (*h + b).tanh();
        }
        let (output, norm) = normalize(&hidden);
        Ok(EncodeCache {
            tokens: tokens.to_vec(),
            scale,
            pooled,
            hidden,
            output,
            norm,
        })
    }

    /// Accumulates parameter gradients for `dL/d output` into `grads`.
    pub fn encode_backward(
        &self,
        cache: &EncodeCache,
        grad_out: &[f64],
        grads: &mut EncoderParams,
    ) {
        let dh = normalize_backward(&cache.output, cache.norm, grad_out);
        let dz: Vec<f64> = dh
            .iter()
            .zip(&cache.hidden)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        grads.transform.add_outer(1.0, &dz, &cache.pooled);
        for (b, g) in grads.transform_bias.iter_mut().zip(&dz) {
            *b += g;
        }
        let dp = self.transform.t_matvec(&dz);
        for &t in &cache.tokens {
            for (e, g) in grads.embeddings.row_mut(t as usize).iter_mut().zip(&dp) {
                *e += cache.scale * g;
            }
        }
    }

    pub fn project(&self, feat: &[f64]) -> Result<ImageCache> {
        if feat.len() != self.shape.image_dim {
            return Err(Error::InvalidArgument(format!(
                "image feature has dimension {} (expected {})",
                feat.len(),
                self.shape.image_dim
            )));
        }
        let mut z = self.image_proj.matvec(feat);
        for (x, b) in z.iter_mut().zip(&self.image_bias) {
            *x += b;
        }
        let (output, norm) = normalize(&z);
        Ok(ImageCache {
            input: feat.to_vec(),
            output,
            norm,
        })
    }

    pub fn project_backward(
        &self,
        cache: &ImageCache,
        grad_out: &[f64],
        grads: &mut EncoderParams,
    ) {
        let dz = normalize_backward(&cache.output, cache.norm, grad_out);
        grads.image_proj.add_outer(1.0, &dz, &cache.input);
        for (b, g) in grads.image_bias.iter_mut().zip(&dz) {
            *b += g;
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = SnapshotWriter::new(MAGIC, VERSION);
        w.push_json(&(self.shape, self.seed));
        for t in self.tensors() {
            w.push_f64s(t);
        }
        w.write_to(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = SnapshotReader::open(path, MAGIC, VERSION)?;
        let (shape, seed): (ModelShape, u64) = r.next_json()?;
        let mut params = Self::init(shape, seed)?;
        for t in params.tensors_mut() {
            let values = r.next_f64s(t.len())?;
            t.copy_from_slice(&values);
        }
        if r.remaining() != 0 {
            return Err(Error::Corrupt(
                "trailing records in encoder snapshot".into(),
            ));
        }
        if !params.all_finite() {
            return Err(Error::Corrupt("non-finite encoder weights".into()));
        }
        Ok(params)
    }
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            &self.embeddings.data,
            &self.transform.data,
            &self.transform_bias,
            &self.image_proj.data,
            &self.image_bias,
            &self.type_head.data,
            &self.type_bias,
            &self.difficulty_head.data,
            &self.difficulty_bias,
            &self.concept_head.data,
            &self.concept_bias,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.embeddings.data,
            &mut self.transform.data,
            &mut self.transform_bias,
            &mut self.image_proj.data,
            &mut self.image_bias,
            &mut self.type_head.data,
            &mut self.type_bias,
            &mut self.difficulty_head.data,
            &mut self.difficulty_bias,
            &mut self.concept_head.data,
            &mut self.concept_bias,
        ]
    }
}

/// Forward state of one text encoding.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    tokens: Vec<u32>,
    scale: f64,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    pub output: Vec<f64>,
    norm: f64,
}

/// Forward state of one image projection.
#[derive(Debug, Clone)]
pub struct ImageCache {
    input: Vec<f64>,
    pub output: Vec<f64>,
    norm: f64,
}

/// A unit-norm embedding. Degenerate inputs map to the first basis vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Sum-pooled text embedding.
pub fn embed_text(tokens: &[u32], params: &EncoderParams) -> Result<Embedding> {
    Ok(Embedding(params.encode(tokens, Pooling::Sum)?.output))
}

pub fn project_image(feat: &[f64], params: &EncoderParams) -> Result<Embedding> {
    Ok(Embedding(params.project(feat)?.output))
}
