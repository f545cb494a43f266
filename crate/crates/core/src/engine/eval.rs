//! Recall@K and Precision@K with a versioned, hash-stamped report.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_RECALL_K: usize = 100;
pub const DEFAULT_PRECISION_KS: [usize; 3] = [1, 3, 5];

/// One query with its relevant set and the system's ordered output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Judged {
    pub id: String,
    pub relevant: HashSet<String>,
    pub retrieved: Vec<String>,
}

impl Judged {
    pub fn new(
        id: impl Into<String>,
        relevant: impl IntoIterator<Item = impl Into<String>>,
        retrieved: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        Self {
            id: id.into(),
            relevant: relevant.into_iter().map(Into::into).collect(),
            retrieved: retrieved.into_iter().map(Into::into).collect(),
        }
    }

    /// Distinct relevant ids among the first `k` retrieved.
    pub fn hits_at(&self, k: usize) -> usize {
        let mut seen = HashSet::new();
        self.retrieved
            .iter()
            .take(k)
            .filter(|id| self.relevant.contains(*id) && seen.insert(id.as_str()))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecall {
    pub id: String,
    /// `T_i`: annotated similar count.
    pub annotated: usize,
    /// `TP_i@K`.
    pub hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub k: usize,
    /// `N`.
    pub n: usize,
    pub seeds: Vec<SeedRecall>,
    /// Seeds without annotations, left out of `N`.
    pub excluded: Vec<String>,
    pub recall_at_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPrecision {
    pub id: String,
    /// Result list length.
    pub returned: usize,
    /// Relevant in the top `k`, one entry per reported `k`.
    pub relevant_in_top: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub ks: Vec<usize>,
    pub queries: Vec<QueryPrecision>,
    /// Mean precision, one entry per reported `k`.
    pub precision_at_k: Vec<f64>,
}

impl PrecisionReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.precision_at_k[i])
    }
}

/// Mean over annotated seeds of `TP_i@K / T_i`. Seeds with `T_i = 0` are
/// excluded with a warning; no annotated seed at all is an error.
pub fn eval_recall_at_k(seeds: &[Judged], k: usize) -> Result<RecallReport> {
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for s in seeds {
        if s.relevant.is_empty() {
            log::warn!("seed {:?} has no annotated similars; excluded", s.id);
            excluded.push(s.id.clone());
            continue;
        }
        rows.push(SeedRecall {
            id: s.id.clone(),
            annotated: s.relevant.len(),
            hits: s.hits_at(k),
        });
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no seed has annotated similars".into()));
    }
    let sum: f64 = rows.iter().map(|r| r.hits as f64 / r.annotated as f64).sum();
    Ok(RecallReport {
        k,
        n: rows.len(),
        recall_at_k: sum / rows.len() as f64,
        seeds: rows,
        excluded,
    })
}

/// Mean over queries of (relevant in top `k`) / `k` for each `k`. Short lists
/// keep the denominator at `k`.
pub fn eval_precision_at_k(queries: &[Judged], ks: &[usize]) -> Result<PrecisionReport> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no queries to evaluate".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("precision cut-offs must be positive".into()));
    }
    let max_k = *ks.iter().max().unwrap_or(&0);
    let rows: Vec<QueryPrecision> = queries
        .iter()
        .map(|q| {
            if q.retrieved.len() < max_k {
                log::debug!("query {:?} returned {} < {max_k} results", q.id, q.retrieved.len());
            }
            QueryPrecision {
                id: q.id.clone(),
                returned: q.retrieved.len(),
                relevant_in_top: ks.iter().map(|&k| q.hits_at(k)).collect(),
            }
        })
        .collect();
    let short = rows.iter().filter(|r| r.returned < max_k).count();
    if short > 0 {
        log::info!("{short} queries returned fewer than {max_k} results; missing slots count as misses");
    }
    let precision_at_k = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            rows.iter().map(|r| r.relevant_in_top[i] as f64 / k as f64).sum::<f64>() / rows.len() as f64
        })
        .collect();
    Ok(PrecisionReport {
        ks: ks.to_vec(),
        queries: rows,
        precision_at_k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    /// SHA-256 of the configuration that produced the report.
    pub config_hash: String,
    pub recall: Option<RecallReport>,
    pub precision: Option<PrecisionReport>,
}

impl EvalReport {
    pub fn new(
        config_hash: String,
        recall: Option<RecallReport>,
        precision: Option<PrecisionReport>,
    ) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            config_hash,
            recall,
            precision,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and checks the schema version and metric ranges.
    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "report schema {} (expected {REPORT_SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        let in_range = |x: f64| (0.0..=1.0).contains(&x);
        if let Some(rec) = &r.recall {
            if rec.n == 0 || !in_range(rec.recall_at_k) {
                return Err(Error::Validation("recall section out of range".into()));
            }
        }
        if let Some(p) = &r.precision {
            if p.ks.len() != p.precision_at_k.len() || !p.precision_at_k.iter().all(|&x| in_range(x)) {
                return Err(Error::Validation("precision section out of range".into()));
            }
        }
        Ok(r)
    }

    /// Aligned two-column summary.
    pub fn table(&self) -> String {
        let mut rows: Vec<(String, String)> = Vec::new();
        if let Some(r) = &self.recall {
            rows.push((format!("R@{}", r.k), format!("{:.4}", r.recall_at_k)));
            rows.push(("seeds (N)".into(), r.n.to_string()));
            if !r.excluded.is_empty() {
                rows.push(("seeds excluded".into(), r.excluded.len().to_string()));
            }
        }
        if let Some(p) = &self.precision {
            for (k, v) in p.ks.iter().zip(&p.precision_at_k) {
                rows.push((format!("P@{k}"), format!("{v:.4}")));
            }
            rows.push(("queries".into(), p.queries.len().to_string()));
        }
        rows.push(("config".into(), self.config_hash.chars().take(16).collect()));
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("metric".len());
        let mut out = format!("{:<w$}  value\n", "metric");
        for (name, value) in rows {
            let _ = writeln!(out, "{name:<w$}  {value}");
        }
        out
    }
}

/// Hex SHA-256 of the JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
