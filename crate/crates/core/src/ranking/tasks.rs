use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, LabeledPair};
use crate::error::{Error, Result};
use crate::esrm::EncodedExercise;

/// `T1`: stem vs stem (the primary task). `T2`: analysis vs analysis.
/// `T3`: stem vs analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    T1,
    T2,
    T3,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::T1, Task::T2, Task::T3];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.index() + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub task: Task,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    /// 1 = similar / matching.
    pub label: u8,
}

/// Expands labeled pairs into per-task training instances.
#[derive(Debug, Clone)]
pub struct TaskBuilder<'a> {
    bank: &'a [EncodedExercise],
    positions: HashMap<&'a str, usize>,
    by_concept: HashMap<u32, Vec<usize>>,
}

impl<'a> TaskBuilder<'a> {
    pub fn new(bank: &'a [EncodedExercise]) -> Self {
        let mut by_concept: HashMap<u32, Vec<usize>> = HashMap::new();
        for (i, e) in bank.iter().enumerate() {
            for &c in &e.concepts {
                by_concept.entry(c).or_default().push(i);
            }
        }
        Self {
            bank,
            positions: bank.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect(),
            by_concept,
        }
    }

    pub fn position(&self, id: &str) -> Result<usize> {
        self.positions
            .get(id)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("exercise {id:?}")))
    }

    /// Exercises sharing a concept with `a`, excluding `a` and `b`, ascending.
    pub fn concept_mates(&self, a: usize, b: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.bank[a]
            .concepts
            .iter()
            .flat_map(|c| self.by_concept.get(c).into_iter().flatten().copied())
            .filter(|&j| j != a && j != b)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// T1 and T2 carry the pair label; T3 gets both exercises' own
    /// stem/analysis as positives and one negative: the partner's analysis for
    /// a dissimilar pair, or a concept-sharing third exercise's analysis for a
    /// similar pair.
    pub fn instances(&self, pair: &LabeledPair, rng: &mut ChaCha8Rng) -> Result<Vec<TaskInstance>> {
        let a = self.position(&pair.a_id)?;
        let b = self.position(&pair.b_id)?;
        let (ea, eb) = (&self.bank[a], &self.bank[b]);
        let label = u8::from(pair.label == Label::Similar);
        let inst = |task, left: &Vec<u32>, right: &Vec<u32>, label| TaskInstance {
            task,
            left: left.clone(),
            right: right.clone(),
            label,
        };
        let negative = if label == 0 {
            b
        } else {
            let mates = self.concept_mates(a, b);
            if mates.is_empty() {
                log::warn!("no concept-sharing exercise for {:?}; drawing uniformly", ea.id);
                let others: Vec<usize> = (0..self.bank.len()).filter(|&j| j != a && j != b).collect();
                if others.is_empty() {
                    return Err(Error::InvalidArgument(
                        "bank too small for a stem/analysis negative".into(),
                    ));
                }
                others[rng.random_range(0..others.len())]
            } else {
                mates[rng.random_range(0..mates.len())]
            }
        };
        Ok(vec![
            inst(Task::T1, &ea.stem, &eb.stem, label),
            inst(Task::T2, &ea.analysis, &eb.analysis, label),
            inst(Task::T3, &ea.stem, &ea.analysis, 1),
            inst(Task::T3, &eb.stem, &eb.analysis, 1),
            inst(Task::T3, &ea.stem, &self.bank[negative].analysis, 0),
        ])
    }
}

/// Convenience wrapper over [`TaskBuilder::instances`].
pub fn build_task_instances(
    pair: &LabeledPair,
    bank: &[EncodedExercise],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TaskInstance>> {
    TaskBuilder::new(bank).instances(pair, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textnorm::MetadataTargets;
    use rand::SeedableRng;

    fn ex(id: &str, stem: u32, analysis: u32, concepts: &[u32]) -> EncodedExercise {
        EncodedExercise {
            id: id.into(),
            stem: vec![stem],
            analysis: vec![analysis],
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

    fn bank() -> Vec<EncodedExercise> {
        vec![
            ex("a", 10, 20, &[1]),
            ex("b", 11, 21, &[1]),
            ex("c", 12, 22, &[1, 2]),
            ex("d", 13, 23, &[3]),
        ]
    }

    #[test]
    fn dissimilar_pair_uses_partner_analysis() {
        let bank = bank();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = LabeledPair::new("a", "d", Label::Dissimilar);
        let inst = build_task_instances(&pair, &bank, &mut rng).unwrap();
        assert_eq!(inst.len(), 5);
        assert_eq!((inst[0].task, inst[0].label), (Task::T1, 0));
        assert_eq!(inst[1].left, vec![20]);
        assert_eq!(inst[4], TaskInstance { task: Task::T3, left: vec![10], right: vec![23], label: 0 });
    }

    #[test]
    fn similar_pair_draws_concept_mate() {
        let bank = bank();
        let pair = LabeledPair::new("a", "b", Label::Similar);
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = build_task_instances(&pair, &bank, &mut rng).unwrap();
            assert_eq!(inst[4].right, vec![22]);
            assert_eq!(inst[0].label, 1);
        }
    }

    #[test]
    fn falls_back_to_uniform_draw() {
        let bank = bank();
        let pair = LabeledPair::new("d", "a", Label::Similar);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = build_task_instances(&pair, &bank, &mut rng).unwrap();
        assert!([21, 22].contains(&inst[4].right[0]));
    }

    #[test]
    fn deterministic_for_seed() {
        let bank = bank();
        let pair = LabeledPair::new("a", "c", Label::Similar);
        let run = |s| build_task_instances(&pair, &bank, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        assert_eq!(run(5), run(5));
    }
}
