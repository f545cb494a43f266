//! Exercise data model, JSONL ingestion and labeled pairs.

mod synth;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snapshot::{SnapshotReader, SnapshotWriter};

pub use synth::{generate_synthetic, SyntheticData, SyntheticSpec};

/// Default image feature dimension when a corpus carries no images.
pub const DEFAULT_IMAGE_DIM: usize = 32;
/// Default number of difficulty levels.
pub const DEFAULT_DIFFICULTY_LEVELS: u8 = 5;

/// Position in the curriculum. Ordered by grade, then semester.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LearningStage {
    pub grade: u8,
    pub semester: u8,
}

impl LearningStage {
    pub fn new(grade: u8, semester: u8) -> Self {
        Self { grade, semester }
    }
}

impl std::fmt::Display for LearningStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.grade, self.semester)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub exercise_type: String,
    /// 1-based level in `1..=L`.
    pub difficulty: u8,
    pub knowledge_concepts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exercise {
    pub id: String,
    pub stem: String,
    #[serde(default)]
    pub options: Vec<String>,
    #[serde(default)]
    pub answer: String,
    #[serde(default)]
    pub analysis: String,
    #[serde(default)]
    pub image_features: Vec<Vec<f64>>,
    #[serde(flatten)]
    pub metadata: Metadata,
    pub learning_stage: LearningStage,
}

impl Exercise {
    /// Stem followed by the options, the text the exercise is asked with.
    pub fn stem_text(&self) -> String {
        let mut s = self.stem.clone();
        for opt in &self.options {
            s.push(' ');
            s.push_str(opt);
        }
        s
    }

    /// Answer followed by the analysis.
    pub fn analysis_text(&self) -> String {
        if self.answer.is_empty() {
            self.analysis.clone()
        } else {
            format!("{} {}", self.answer, self.analysis)
        }
    }
}

/// Closed dictionaries the metadata of a corpus is validated against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSchema {
    pub exercise_types: Vec<String>,
    pub difficulty_levels: u8,
    pub concept_count: u32,
    pub image_dim: usize,
}

impl MetaSchema {
    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.exercise_types.iter().position(|t| t == name)
    }

    fn validate(&self, ex: &Exercise) -> std::result::Result<(), String> {
        if ex.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if ex.stem.trim().is_empty() {
            return Err(format!("exercise {:?} has an empty stem", ex.id));
        }
        if self.type_index(&ex.metadata.exercise_type).is_none() {
            return Err(format!(
                "exercise {:?} has unknown type {:?}",
                ex.id, ex.metadata.exercise_type
            ));
        }
        let d = ex.metadata.difficulty;
        if d == 0 || d > self.difficulty_levels {
            return Err(format!(
                "exercise {:?} difficulty {d} outside 1..={}",
                ex.id, self.difficulty_levels
            ));
        }
        if ex.metadata.knowledge_concepts.is_empty() {
            return Err(format!("exercise {:?} has no knowledge concepts", ex.id));
        }
        if let Some(c) = ex
            .metadata
            .knowledge_concepts
            .iter()
            .find(|&&c| c >= self.concept_count)
        {
            return Err(format!("exercise {:?} has unknown concept {c}", ex.id));
        }
        if let Some(f) = ex.image_features.iter().find(|f| f.len() != self.image_dim) {
            return Err(format!(
                "exercise {:?} image feature has dimension {} (expected {})",
                ex.id,
                f.len(),
                self.image_dim
            ));
        }
        Ok(())
    }

    /// Smallest schema that admits every exercise in `exercises`.
    pub fn infer(exercises: &[Exercise]) -> Self {
        let mut types: Vec<String> = exercises
            .iter()
            .map(|e| e.metadata.exercise_type.clone())
            .collect();
        types.sort();
        types.dedup();
        let max_difficulty = exercises
            .iter()
            .map(|e| e.metadata.difficulty)
            .max()
            .unwrap_or(0);
        let concept_count = exercises
            .iter()
            .flat_map(|e| e.metadata.knowledge_concepts.iter().copied())
            .max()
            .map_or(0, |c| c + 1);
        let image_dim = exercises
            .iter()
            .flat_map(|e| e.image_features.first())
            .map(Vec::len)
            .next()
            .unwrap_or(DEFAULT_IMAGE_DIM);
        Self {
            exercise_types: types,
            difficulty_levels: max_difficulty.max(DEFAULT_DIFFICULTY_LEVELS),
            concept_count,
            image_dim,
        }
    }
}

/// Validated, immutable exercise bank.
#[derive(Debug, Clone)]
pub struct Corpus {
    schema: MetaSchema,
    exercises: Vec<Exercise>,
    index: HashMap<String, usize>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema && self.exercises == other.exercises
    }
}

impl Corpus {
    pub fn new(schema: MetaSchema, exercises: Vec<Exercise>) -> Result<Self> {
        let mut index = HashMap::with_capacity(exercises.len());
        for (i, ex) in exercises.iter().enumerate() {
            schema.validate(ex).map_err(Error::Validation)?;
            if index.insert(ex.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate id {:?}", ex.id)));
            }
        }
        Ok(Self {
            schema,
            exercises,
            index,
        })
    }

    pub fn schema(&self) -> &MetaSchema {
        &self.schema
    }

    pub fn exercises(&self) -> &[Exercise] {
        &self.exercises
    }

    pub fn len(&self) -> usize {
        self.exercises.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exercises.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Exercise> {
        self.position(id).map(|i| &self.exercises[i])
    }

    pub fn require(&self, id: &str) -> Result<usize> {
        self.position(id)
            .ok_or_else(|| Error::NotFound(format!("exercise {id:?}")))
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Exercise> {
        self.exercises.iter()
    }
}

impl std::ops::Index<usize> for Corpus {
    type Output = Exercise;

    fn index(&self, i: usize) -> &Exercise {
        &self.exercises[i]
    }
}

/// Reads a JSONL exercise file, inferring the metadata schema from its content.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    load_corpus_impl(path.as_ref(), None)
}

/// Reads a JSONL exercise file and validates it against `schema`.
pub fn load_corpus_with_schema(path: impl AsRef<Path>, schema: MetaSchema) -> Result<Corpus> {
    load_corpus_impl(path.as_ref(), Some(schema))
}

fn load_corpus_impl(path: &Path, schema: Option<MetaSchema>) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut exercises = Vec::new();
    let mut lines = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Exercise = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(first) = seen.insert(ex.id.clone(), line_no) {
            return Err(Error::Validation(format!(
                "line {line_no}: duplicate id {:?} (first defined on line {first})",
                ex.id
            )));
        }
        exercises.push(ex);
        lines.push(line_no);
    }
    let schema = schema.unwrap_or_else(|| MetaSchema::infer(&exercises));
    for (ex, line_no) in exercises.iter().zip(&lines) {
        schema
            .validate(ex)
            .map_err(|m| Error::Validation(format!("line {line_no}: {m}")))?;
    }
    Corpus::new(schema, exercises)
}

pub fn save_corpus_jsonl(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), corpus.exercises())
}

const SNAPSHOT_MAGIC: crate::snapshot::Magic = *b"FSECORP\0";
const SNAPSHOT_VERSION: u32 = 1;

/// Writes the corpus as a versioned snapshot: schema record, then one record per exercise.
pub fn save_snapshot(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let mut w = SnapshotWriter::new(SNAPSHOT_MAGIC, SNAPSHOT_VERSION);
    w.push_json(corpus.schema());
    for ex in corpus.exercises() {
        w.push_json(ex);
    }
    w.write_to(path)
}

pub fn load_snapshot(path: impl AsRef<Path>) -> Result<Corpus> {
    let mut r = SnapshotReader::open(path, SNAPSHOT_MAGIC, SNAPSHOT_VERSION)?;
    let schema: MetaSchema = r.next_json()?;
    let mut exercises = Vec::with_capacity(r.remaining());
    while r.remaining() > 0 {
        exercises.push(r.next_json()?);
    }
    Corpus::new(schema, exercises)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Similar,
    Dissimilar,
}

impl Label {
    pub fn from_bool(similar: bool) -> Self {
        if similar {
            Label::Similar
        } else {
            Label::Dissimilar
        }
    }

    pub fn is_similar(self) -> bool {
        self == Label::Similar
    }

    pub fn flipped(self) -> Self {
        Self::from_bool(!self.is_similar())
    }

    /// 1 for similar, 0 for dissimilar.
    pub fn as_class(self) -> usize {
        usize::from(self.is_similar())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    Variant,
    PlainSimilar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub a_id: String,
    pub b_id: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<VariantKind>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub votes: Vec<Label>,
}

impl LabeledPair {
    pub fn new(a_id: impl Into<String>, b_id: impl Into<String>, label: Label) -> Self {
        Self {
            a_id: a_id.into(),
            b_id: b_id.into(),
            label,
            variant: None,
            votes: Vec::new(),
        }
    }

    /// Label implied by the annotator votes, or `None` when there are none.
    pub fn majority(&self) -> std::result::Result<Option<Label>, String> {
        if self.votes.is_empty() {
            return Ok(None);
        }
        let similar = self.votes.iter().filter(|v| v.is_similar()).count();
        let dissimilar = self.votes.len() - similar;
        match similar.cmp(&dissimilar) {
            std::cmp::Ordering::Greater => Ok(Some(Label::Similar)),
            std::cmp::Ordering::Less => Ok(Some(Label::Dissimilar)),
            std::cmp::Ordering::Equal => Err(format!(
                "pair ({}, {}) has tied votes {similar}:{dissimilar}",
                self.a_id, self.b_id
            )),
        }
    }

    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        if self.a_id == self.b_id {
            return Err(Error::Validation(format!(
                "pair references {:?} twice",
                self.a_id
            )));
        }
        for id in [&self.a_id, &self.b_id] {
            if corpus.position(id).is_none() {
                return Err(Error::Validation(format!(
                    "pair references unknown id {id:?}"
                )));
            }
        }
        if let Some(m) = self.majority().map_err(Error::Validation)? {
            if m != self.label {
                return Err(Error::Validation(format!(
                    "pair ({}, {}) label {:?} disagrees with vote majority {m:?}",
                    self.a_id, self.b_id, self.label
                )));
            }
        }
        Ok(())
    }
}

pub fn load_pairs(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Vec<LabeledPair>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: LabeledPair = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        pair.validate(corpus).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("line {}: {m}", i + 1)),
            other => other,
        })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn save_pairs(pairs: &[LabeledPair], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), pairs)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
