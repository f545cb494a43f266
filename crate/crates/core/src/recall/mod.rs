//! Candidate retrieval: a BM25 channel and an embedding channel, merged and
//! stripped of duplicates of the query.

mod dedup;
mod lexical;
mod merge;
mod pairclf;
mod vector;

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esrm::{Embedding, EncodedExercise};
use crate::snapshot::{SnapshotReader, SnapshotWriter};

pub use dedup::{add_year_distractor, dedup_training_set, raise_degree, Featurized};
pub use lexical::{
    bm25_idf, bm25_term, concept_overlap, query_terms, Bm25Params, LexicalIndex, Posting,
};
pub use merge::{merge_candidates, split_slots};
pub use pairclf::{
    edit_similarity, feature_len, pair_features, LogisticConfig, PairClassifier, PairMode, PairSide,
};
pub use vector::VectorIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Exact,
    Embed,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    /// Position in the bank.
    pub index: usize,
    pub score: f64,
    pub source: Source,
}

/// Score descending, then id ascending.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.id.cmp(&b.id))
        .then_with(|| a.index.cmp(&b.index))
}

pub(crate) fn sort_candidates(c: &mut [Candidate]) {
    c.sort_by(candidate_order);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecallConfig {
    pub k_exact: usize,
    pub k_embed: usize,
    pub n: usize,
    pub dedup_threshold: f64,
    pub k1: f64,
    pub b: f64,
    pub concept_weight: f64,
}

impl Default for RecallConfig {
    fn default() -> Self {
        let bm25 = Bm25Params::default();
        Self {
            k_exact: 200,
            k_embed: 200,
            n: 100,
            dedup_threshold: 0.5,
            k1: bm25.k1,
            b: bm25.b,
            concept_weight: bm25.concept_weight,
        }
    }
}

impl RecallConfig {
    pub fn bm25(&self) -> Bm25Params {
        Bm25Params {
            k1: self.k1,
            b: self.b,
            concept_weight: self.concept_weight,
        }
    }
}

const MAGIC: [u8; 8] = *b"FSEINDX\0";
const VERSION: u32 = 1;

/// Both retrieval indexes over the same bank, in bank order.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallIndexes {
    pub lexical: LexicalIndex,
    pub vector: VectorIndex,
}

impl RecallIndexes {
    pub fn build(
        bank: &[EncodedExercise],
        embeddings: &[Embedding],
        bm25: Bm25Params,
    ) -> Result<Self> {
        let ids = bank.iter().map(|e| e.id.clone()).collect();
        Ok(Self {
            lexical: LexicalIndex::build(bank, bm25)?,
            vector: VectorIndex::build(ids, embeddings)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = SnapshotWriter::new(MAGIC, VERSION);
        w.push_json(&self.lexical);
        w.push_json(&(self.vector.ids(), self.vector.dim()));
        w.push_f64s(self.vector.data());
        w.write_to(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = SnapshotReader::open(path, MAGIC, VERSION)?;
        let lexical: LexicalIndex = r.next_json()?;
        let (ids, dim): (Vec<String>, usize) = r.next_json()?;
        let data = r.next_f64s(ids.len() * dim)?;
        if r.remaining() != 0 {
            return Err(Error::Corrupt("trailing records in index snapshot".into()));
        }
        let vector = VectorIndex::from_parts(ids, dim, data)?;
        if vector.len() != lexical.len() {
            return Err(Error::Corrupt("index sizes disagree".into()));
        }
        Ok(Self { lexical, vector })
    }
}

/// The query side of a recall call.
#[derive(Debug, Clone, Copy)]
pub struct RecallQuery<'a> {
    pub exercise: &'a EncodedExercise,
    pub embedding: &'a [f64],
    /// Bank position of the query when it is itself a bank exercise.
    pub position: Option<usize>,
}

impl RecallQuery<'_> {
    fn side(&self) -> PairSide<'_> {
        PairSide {
            embedding: self.embedding,
            tokens: &self.exercise.stem,
            formula: &self.exercise.formula,
        }
    }
}

/// Both channels, merged, with candidates flagged as duplicates of the query
/// removed when a duplicate detector is supplied.
pub fn recall(
    query: &RecallQuery,
    indexes: &RecallIndexes,
    bank: &[EncodedExercise],
    dedup: Option<&PairClassifier>,
    cfg: &RecallConfig,
) -> Result<Vec<Candidate>> {
    let exact = indexes.lexical.search(
        &query.exercise.stem,
        &query.exercise.concepts,
        query.position,
        cfg.k_exact,
    );
    let embed = indexes
        .vector
        .search(query.embedding, query.position, cfg.k_embed)?;
    let mut merged = merge_candidates(&exact, &embed, cfg.n);
    merged.retain(|c| c.id != query.exercise.id);
    if let Some(clf) = dedup {
        let mut keep = Vec::with_capacity(merged.len());
        for c in merged {
            let other = &bank[c.index];
            let side = PairSide {
                embedding: indexes.vector.row(c.index),
                tokens: &other.stem,
                formula: &other.formula,
            };
            if clf.probability(query.side(), side)? < cfg.dedup_threshold {
                keep.push(c);
            }
        }
        merged = keep;
    }
    Ok(merged)
}

/// Duplicate verdict and probability for a pair.
pub fn detect_duplicate(
    a: PairSide,
    b: PairSide,
    clf: Option<&PairClassifier>,
) -> Result<(bool, f64)> {
    let clf = clf.ok_or_else(|| Error::Untrained("duplicate detector".into()))?;
    let p = clf.probability(a, b)?;
    Ok((p >= clf.threshold(), p))
}
