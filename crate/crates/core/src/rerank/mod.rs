//! Education-specific post-processing of a ranked list: learning-stage and
//! difficulty filters for a student, then a split into variant and plain
//! similar exercises.

use serde::{Deserialize, Serialize};

use crate::corpus::{Exercise, LabeledPair, LearningStage, VariantKind};
use crate::error::{Error, Result};
use crate::esrm::EncodedExercise;
use crate::recall::{
    pair_features, Candidate, LogisticConfig, PairClassifier, PairMode, PairSide, VectorIndex,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ability {
    Weak,
    Average,
    Excellent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageMode {
    /// Nothing beyond the current learning stage.
    Synchronous,
    /// Nothing beyond the current semester index.
    Review,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentProfile {
    pub ability: Ability,
    pub stage_mode: StageMode,
    pub current_stage: LearningStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankConfig {
    pub enable_variant: bool,
    pub variant_threshold: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            enable_variant: true,
            variant_threshold: 0.5,
        }
    }
}

/// Which filters an item went through; `false` means the filter was inactive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: bool,
    pub difficulty: bool,
    pub variant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankItem {
    pub candidate: Candidate,
    pub difficulty: u8,
    pub stage: LearningStage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant_probability: Option<f64>,
    pub passed: Provenance,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RerankedResult {
    /// Presented first.
    pub variants: Vec<RerankItem>,
    pub similar: Vec<RerankItem>,
}

impl RerankedResult {
    pub fn len(&self) -> usize {
        self.variants.len() + self.similar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ids in presentation order.
    pub fn ids(&self) -> Vec<&str> {
        self.variants
            .iter()
            .chain(&self.similar)
            .map(|i| i.candidate.id.as_str())
            .collect()
    }
}

/// Synchronous: stage ≤ current. Review: semester ≤ current semester. Order
/// preserved; no profile keeps everything.
pub fn stage_filter(items: Vec<RerankItem>, profile: Option<&StudentProfile>) -> Vec<RerankItem> {
    let Some(p) = profile else { return items };
    items
        .into_iter()
        .filter(|i| match p.stage_mode {
            StageMode::Synchronous => i.stage <= p.current_stage,
            StageMode::Review => i.stage.semester <= p.current_stage.semester,
        })
        .map(|mut i| {
            i.passed.stage = true;
            i
        })
        .collect()
}

/// Excellent: difficulty ≥ query. Weak: ≤ query. Average: within one level.
pub fn personalize_filter(
    items: Vec<RerankItem>,
    query_difficulty: u8,
    profile: Option<&StudentProfile>,
) -> Vec<RerankItem> {
    let Some(p) = profile else { return items };
    items
        .into_iter()
        .filter(|i| match p.ability {
            Ability::Excellent => i.difficulty >= query_difficulty,
            Ability::Weak => i.difficulty <= query_difficulty,
            Ability::Average => i.difficulty.abs_diff(query_difficulty) <= 1,
        })
        .map(|mut i| {
            i.passed.difficulty = true;
            i
        })
        .collect()
}

/// Bank views the re-rank stage reads.
#[derive(Debug, Clone, Copy)]
pub struct RerankContext<'a> {
    pub exercises: &'a [Exercise],
    pub encoded: &'a [EncodedExercise],
    pub embeddings: &'a VectorIndex,
}

impl<'a> RerankContext<'a> {
    pub fn side(&self, index: usize) -> PairSide<'a> {
        PairSide {
            embedding: self.embeddings.row(index),
            tokens: &self.encoded[index].stem,
            formula: &self.encoded[index].formula,
        }
    }

    fn check(&self) -> Result<()> {
        if self.exercises.len() != self.encoded.len() || self.encoded.len() != self.embeddings.len() {
            return Err(Error::InvalidArgument("re-rank context views differ in size".into()));
        }
        Ok(())
    }
}

/// The query side of a re-rank call.
#[derive(Debug, Clone, Copy)]
pub struct RerankQuery<'a> {
    pub side: PairSide<'a>,
    pub difficulty: u8,
}

/// Directional classifier over variant-flagged similar pairs, each used in both
/// orders: "is the second exercise a variant of the first".
pub fn train_variant_classifier(
    pairs: &[LabeledPair],
    ctx: &RerankContext,
    cfg: &LogisticConfig,
) -> Result<PairClassifier> {
    ctx.check()?;
    let position = |id: &str| {
        ctx.exercises
            .iter()
            .position(|e| e.id == id)
            .ok_or_else(|| Error::NotFound(format!("exercise {id:?}")))
    };
    let mut examples = Vec::new();
    for p in pairs.iter().filter(|p| p.label.is_similar()) {
        let Some(kind) = p.variant else { continue };
        let (a, b) = (position(&p.a_id)?, position(&p.b_id)?);
        let y = kind == VariantKind::Variant;
        examples.push((pair_features(PairMode::Directional, ctx.side(a), ctx.side(b)), y));
        examples.push((pair_features(PairMode::Directional, ctx.side(b), ctx.side(a)), y));
    }
    PairClassifier::train(PairMode::Directional, ctx.embeddings.dim(), &examples, cfg)
}

/// Whether `candidate` varies `query`, with its probability.
pub fn classify_variant(
    query: PairSide,
    candidate: PairSide,
    clf: &PairClassifier,
) -> Result<(bool, f64)> {
    if clf.mode() != PairMode::Directional {
        return Err(Error::InvalidArgument("variant classifier must be directional".into()));
    }
    let p = clf.probability(query, candidate)?;
    Ok((p >= clf.threshold(), p))
}

/// Stage filter, then difficulty filter, then the variant split. Both lists keep
/// the ranking order.
pub fn rerank(
    query: &RerankQuery,
    ranked: &[Candidate],
    ctx: &RerankContext,
    profile: Option<&StudentProfile>,
    variant: Option<&PairClassifier>,
    cfg: &RerankConfig,
) -> Result<RerankedResult> {
    ctx.check()?;
    let items = ranked
        .iter()
        .map(|c| {
            let ex = ctx.exercises.get(c.index).ok_or_else(|| {
                Error::InvalidArgument(format!("candidate {:?} is outside the bank", c.id))
            })?;
            Ok(RerankItem {
                candidate: c.clone(),
                difficulty: ex.metadata.difficulty,
                stage: ex.learning_stage,
                variant_probability: None,
                passed: Provenance::default(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let items = personalize_filter(stage_filter(items, profile), query.difficulty, profile);
    if !cfg.enable_variant {
        return Ok(RerankedResult {
            variants: Vec::new(),
            similar: items,
        });
    }
    let clf = variant.ok_or_else(|| Error::Untrained("variant classifier".into()))?;
    let mut out = RerankedResult::default();
    for mut item in items {
        let p = clf.probability(query.side, ctx.side(item.candidate.index))?;
        item.variant_probability = Some(p);
        item.passed.variant = true;
        if p >= cfg.variant_threshold {
            out.variants.push(item);
        } else {
            out.similar.push(item);
        }
    }
    Ok(out)
}
