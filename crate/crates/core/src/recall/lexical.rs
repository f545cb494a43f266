use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esrm::EncodedExercise;
use crate::textnorm::Vocab;

use super::{sort_candidates, Candidate, Source};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    /// Added as `concept_weight × (shared concepts / query concepts)` to
    /// documents that also match on text.
    pub concept_weight: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: 1.2,
            b: 0.75,
            concept_weight: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// BM25 inverted index over stem and options, with a concept field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexicalIndex {
    params: Bm25Params,
    ids: Vec<String>,
    /// Indexed by token id; postings sorted by doc.
    postings: Vec<Vec<Posting>>,
    doc_lens: Vec<u32>,
    avg_len: f64,
    /// Indexed by doc; sorted concept ids.
    doc_concepts: Vec<Vec<u32>>,
}

/// Reserved ids (padding, unknown, separator) never match.
pub(crate) fn indexable(t: u32) -> bool {
    t as usize >= Vocab::RESERVED
}

/// `ln(1 + (N - df + 0.5) / (df + 0.5))`
pub fn bm25_idf(n_docs: usize, df: usize) -> f64 {
    (1.0 + (n_docs as f64 - df as f64 + 0.5) / (df as f64 + 0.5)).ln()
}

/// One term's contribution for a document.
pub fn bm25_term(idf: f64, tf: u32, doc_len: u32, avg_len: f64, p: &Bm25Params) -> f64 {
    let tf = tf as f64;
    let norm = 1.0 - p.b + p.b * doc_len as f64 / avg_len;
    idf * tf * (p.k1 + 1.0) / (tf + p.k1 * norm)
}

/// Unique indexable query terms in ascending id order. Scores accumulate in
/// this order everywhere so independent evaluations agree bit-for-bit.
pub fn query_terms(tokens: &[u32]) -> Vec<u32> {
    let mut t: Vec<u32> = tokens.iter().copied().filter(|&t| indexable(t)).collect();
    t.sort_unstable();
    t.dedup();
    t
}

/// Fraction of `query` concepts present in `doc`; both sorted.
pub fn concept_overlap(query: &[u32], doc: &[u32]) -> f64 {
    if query.is_empty() {
        return 0.0;
    }
    let shared = query
        .iter()
        .filter(|c| doc.binary_search(c).is_ok())
        .count();
    shared as f64 / query.len() as f64
}

impl LexicalIndex {
    pub fn build(bank: &[EncodedExercise], params: Bm25Params) -> Result<Self> {
        if bank.is_empty() {
            return Err(Error::InvalidArgument("cannot index an empty bank".into()));
        }
        let mut postings: Vec<Vec<Posting>> = Vec::new();
        let mut doc_lens = Vec::with_capacity(bank.len());
        for (doc, ex) in bank.iter().enumerate() {
            let terms: Vec<u32> = ex.stem.iter().copied().filter(|&t| indexable(t)).collect();
            doc_lens.push(terms.len() as u32);
            let mut sorted = terms;
            sorted.sort_unstable();
            for run in sorted.chunk_by(|a, b| a == b) {
                let t = run[0] as usize;
                if postings.len() <= t {
                    postings.resize(t + 1, Vec::new());
                }
                postings[t].push(Posting {
                    doc: doc as u32,
                    tf: run.len() as u32,
                });
            }
        }
        let total: u64 = doc_lens.iter().map(|&l| l as u64).sum();
        let avg_len = (total as f64 / bank.len() as f64).max(1.0);
        Ok(Self {
            params,
            ids: bank.iter().map(|e| e.id.clone()).collect(),
            postings,
            doc_lens,
            avg_len,
            doc_concepts: bank.iter().map(|e| e.concepts.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn params(&self) -> &Bm25Params {
        &self.params
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_len(&self, doc: usize) -> u32 {
        self.doc_lens[doc]
    }

    pub fn postings(&self, token: u32) -> &[Posting] {
        self.postings.get(token as usize).map_or(&[], Vec::as_slice)
    }

    /// Top `k` documents by BM25 plus concept bonus. `exclude` (the query's own
    /// position, if it is in the bank) never appears.
    pub fn search(
        &self,
        tokens: &[u32],
        concepts: &[u32],
        exclude: Option<usize>,
        k: usize,
    ) -> Vec<Candidate> {
        let n = self.len();
        let mut scores = vec![0.0; n];
        let mut hit = vec![false; n];
        for t in query_terms(tokens) {
            let list = self.postings(t);
            if list.is_empty() {
                continue;
            }
            let idf = bm25_idf(n, list.len());
            for p in list {
                let d = p.doc as usize;
                scores[d] += bm25_term(idf, p.tf, self.doc_lens[d], self.avg_len, &self.params);
                hit[d] = true;
            }
        }
        let mut concepts = concepts.to_vec();
        concepts.sort_unstable();
        concepts.dedup();
        let mut out: Vec<Candidate> = (0..n)
            .filter(|&d| hit[d] && Some(d) != exclude)
            .map(|d| Candidate {
                id: self.ids[d].clone(),
                index: d,
                score: scores[d]
                    + self.params.concept_weight
                        * concept_overlap(&concepts, &self.doc_concepts[d]),
                source: Source::Exact,
            })
            .collect();
        sort_candidates(&mut out);
        out.truncate(k);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textnorm::MetadataTargets;

    pub(crate) fn doc(id: &str, stem: &[u32], concepts: &[u32]) -> EncodedExercise {
        EncodedExercise {
            id: id.into(),
            stem: stem.to_vec(),
            analysis: vec![3],
            formula: Vec::new(),
            concepts: concepts.to_vec(),
            targets: MetadataTargets {
                exercise_type: vec![1.0],
                difficulty: vec![1.0],
                concepts: vec![1.0],
            },
            image: None,
        }
    }

    #[test]
    fn postings_and_statistics() {
        let bank = vec![doc("a", &[3, 3, 4], &[0]), doc("b", &[4, 5, 1], &[1])];
        let idx = LexicalIndex::build(&bank, Bm25Params::default()).unwrap();
        assert_eq!(idx.postings(3), &[Posting { doc: 0, tf: 2 }]);
        assert_eq!(idx.postings(4).len(), 2);
        assert_eq!(idx.postings(1), &[]);
        assert_eq!(idx.doc_len(1), 2);
        assert_eq!(idx.avg_len(), 2.5);
    }

    #[test]
    fn verbatim_copy_ranks_first_and_self_is_excluded() {
        let bank = vec![
            doc("a", &[3, 4, 5, 6], &[0]),
            doc("b", &[3, 7, 8, 9], &[0]),
            doc("c", &[3, 4, 5, 6], &[0]),
        ];
        let idx = LexicalIndex::build(&bank, Bm25Params::default()).unwrap();
        let hits = idx.search(&bank[0].stem, &[0], Some(0), 10);
        assert_eq!(hits[0].id, "c");
        assert!(hits.iter().all(|h| h.id != "a"));
        assert!(idx.search(&[10, 11], &[0], None, 10).is_empty());
        assert!(idx.search(&[], &[0], None, 10).is_empty());
    }

    #[test]
    fn single_term_score_by_hand() {
        let bank = vec![doc("a", &[3, 3, 4], &[]), doc("b", &[4, 5], &[])];
        let p = Bm25Params::default();
        let idx = LexicalIndex::build(&bank, p).unwrap();
        let hits = idx.search(&[3], &[], None, 5);
        let idf = (1.0f64 + (2.0 - 1.0 + 0.5) / 1.5).ln();
        let norm = 1.0 - 0.75 + 0.75 * 3.0 / 2.5;
        let expected = idf * 2.0 * 2.2 / (2.0 + 1.2 * norm);
        assert_eq!(hits.len(), 1);
        assert!((hits[0].score - expected).abs() < 1e-12);
    }

    #[test]
    fn concept_bonus_breaks_text_ties() {
        let bank = vec![
            doc("q", &[3], &[1, 2]),
            doc("x", &[3, 4], &[1]),
            doc("y", &[3, 5], &[7]),
        ];
        let idx = LexicalIndex::build(&bank, Bm25Params::default()).unwrap();
        let hits = idx.search(&[3], &[1, 2], Some(0), 5);
        assert_eq!(hits[0].id, "x");
        assert!((hits[0].score - hits[1].score - 0.25).abs() < 1e-12);
    }
}
