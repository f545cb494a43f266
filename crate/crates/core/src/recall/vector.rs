use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esrm::Embedding;
use crate::exec;
use crate::linalg::{dot, l2_norm};

use super::{sort_candidates, Candidate, Source};

/// Exact-scan cosine index over unit-norm rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorIndex {
    ids: Vec<String>,
    dim: usize,
    /// Row-major, one embedding per row.
    data: Vec<f64>,
}

impl VectorIndex {
    pub fn build(ids: Vec<String>, embeddings: &[Embedding]) -> Result<Self> {
        if ids.len() != embeddings.len() || ids.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} ids for {} embeddings",
                ids.len(),
                embeddings.len()
            )));
        }
        let dim = embeddings[0].dim();
        let mut data = Vec::with_capacity(dim * ids.len());
        for e in embeddings {
            if e.dim() != dim {
                return Err(Error::InvalidArgument("mixed embedding dimensions".into()));
            }
            data.extend_from_slice(e.as_slice());
        }
        Self::from_parts(ids, dim, data)
    }

    pub(crate) fn from_parts(ids: Vec<String>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != dim * ids.len() {
            return Err(Error::Corrupt("vector index shape mismatch".into()));
        }
        let idx = Self { ids, dim, data };
        if (0..idx.len()).any(|i| (l2_norm(idx.row(i)) - 1.0).abs() > 1e-6) {
            return Err(Error::Validation(
                "vector index rows must be unit norm".into(),
            ));
        }
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn data(&self) -> &[f64] {
        &self.data
    }

    /// Top `k` rows by cosine similarity to `query`.
    pub fn search(
        &self,
        query: &[f64],
        exclude: Option<usize>,
        k: usize,
    ) -> Result<Vec<Candidate>> {
        if query.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "query has dimension {} (index has {})",
                query.len(),
                self.dim
            )));
        }
        let scores = exec::map_range(self.len(), |i| dot(self.row(i), query));
        let mut out: Vec<Candidate> = scores
            .into_iter()
            .enumerate()
            .filter(|&(i, _)| Some(i) != exclude)
            .map(|(i, score)| Candidate {
                id: self.ids[i].clone(),
                index: i,
                score,
                source: Source::Embed,
            })
            .collect();
        sort_candidates(&mut out);
        out.truncate(k);
        Ok(out)
    }
}
