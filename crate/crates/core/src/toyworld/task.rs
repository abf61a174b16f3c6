//! Synthetic grounded lookup tasks.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{self, number_tokens, render, slot_token, DOC, N_SLOTS, Q};
use crate::datamodel::{Document, RagSample};

pub const MAX_VALUE: u32 = 999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Difficulty {
    pub n_facts: usize,
    pub n_distractors: usize,
}

impl Difficulty {
    /// One fact, no distractors.
    pub const MICRO: Difficulty = Difficulty {
        n_facts: 1,
        n_distractors: 0,
    };
}

impl Default for Difficulty {
    fn default() -> Self {
        Difficulty::MICRO
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyTask {
    pub facts: BTreeMap<u8, u32>,
    pub distractors: Vec<(u8, u32)>,
    pub query_slot: u8,
    /// Document blocks in presentation order, each `<DOC> slot digits`.
    pub docs: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OracleAnswer {
    Value(u32),
    CannotAnswer,
}

fn doc_block(slot: u8, value: u32) -> Vec<usize> {
    let mut block = vec![DOC, slot_token(slot)];
    block.extend(number_tokens(value));
    block
}

impl ToyTask {
    /// Builds a task with documents in the given order: facts first, then
    /// distractors.
    pub fn new(facts: BTreeMap<u8, u32>, distractors: Vec<(u8, u32)>, query_slot: u8) -> ToyTask {
        assert!(facts.contains_key(&query_slot), "query slot must be a fact");
        let docs = facts
            .iter()
            .map(|(&s, &v)| doc_block(s, v))
            .chain(distractors.iter().map(|&(s, v)| doc_block(s, v)))
            .collect();
        ToyTask {
            facts,
            distractors,
            query_slot,
            docs,
        }
    }

    pub fn serialized_docs(&self) -> Vec<usize> {
        self.docs.concat()
    }

    pub fn answer(&self) -> u32 {
        self.facts[&self.query_slot]
    }

    pub fn to_rag_sample(&self, id: impl Into<String>) -> RagSample {
        let n_facts = self.facts.len();
        let relevance = self
            .docs
            .iter()
            .map(|block| {
                let slot = vocab::slot_of(block[1]).expect("doc block slot");
                let value: u32 = render(&block[2..]).replace(' ', "").parse().expect("digits");
                self.facts.get(&slot) == Some(&value)
            })
            .collect::<Vec<_>>();
        debug_assert_eq!(relevance.iter().filter(|&&r| r).count(), n_facts);
        let mut sample = RagSample::new(
            id,
            render(&[Q, slot_token(self.query_slot)]),
            self.docs.iter().map(|b| Document::new(render(b))).collect(),
        );
        sample.gold_answer = Some(self.answer().to_string());
        sample.relevance_labels = Some(relevance);
        sample
    }
}

/// Deterministic under `seed`. Fact slots are distinct; a distractor may
/// reuse a fact slot but then carries a different value.
pub fn sample_task(seed: u64, difficulty: Difficulty) -> ToyTask {
    assert!(difficulty.n_facts >= 1, "need at least one fact");
    assert!(difficulty.n_facts <= N_SLOTS, "at most {N_SLOTS} facts");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots: Vec<u8> = (0..N_SLOTS as u8).collect();
    slots.shuffle(&mut rng);
    let facts: BTreeMap<u8, u32> = slots[..difficulty.n_facts]
        .iter()
        .map(|&s| (s, rng.random_range(0..=MAX_VALUE)))
        .collect();
    let distractors: Vec<(u8, u32)> = (0..difficulty.n_distractors)
        .map(|_| {
            let slot = rng.random_range(0..N_SLOTS as u8);
            let value = loop {
                let v = rng.random_range(0..=MAX_VALUE);
                if facts.get(&slot) != Some(&v) {
                    break v;
                }
            };
            (slot, value)
        })
        .collect();
    let fact_slots: Vec<u8> = facts.keys().copied().collect();
    let query_slot = *fact_slots.choose(&mut rng).expect("non-empty");
    let mut task = ToyTask::new(facts, distractors, query_slot);
    task.docs.shuffle(&mut rng);
    task
}

/// Facts win over distractors on the same slot.
pub fn exact_oracle(task: &ToyTask, slot: u8) -> OracleAnswer {
    match task.facts.get(&slot) {
        Some(&v) => OracleAnswer::Value(v),
        None => OracleAnswer::CannotAnswer,
    }
}

/// `n` tasks as a dataset, ids `toy-0 .. toy-{n-1}`.
pub fn toy_dataset(seed: u64, difficulty: Difficulty, n: usize) -> Vec<(ToyTask, RagSample)> {
    (0..n)
        .map(|i| {
            let task = sample_task(crate::seeds::mix(seed, &[i as u64]), difficulty);
            let sample = task.to_rag_sample(format!("toy-{i}"));
            (task, sample)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::vocab::{token_id, tokenize};

    #[test]
    fn single_fact_serialization() {
        let task = ToyTask::new(BTreeMap::from([(3, 42)]), vec![], 3);
        assert_eq!(render(&task.serialized_docs()), "<DOC> s3 4 2");
        let sample = task.to_rag_sample("x");
        assert_eq!(sample.query, "<Q> s3");
        assert_eq!(sample.documents[0].body, "<DOC> s3 4 2");
        assert_eq!(sample.gold_answer.as_deref(), Some("42"));
        assert_eq!(sample.relevance_labels, Some(vec![true]));
    }

    #[test]
    fn block_counts_and_determinism() {
        let d = Difficulty {
            n_facts: 2,
            n_distractors: 2,
        };
        let a = sample_task(7, d);
        assert_eq!(a.docs.len(), 4);
        assert_eq!(a.serialized_docs().iter().filter(|&&t| t == DOC).count(), 4);
        assert_eq!(a, sample_task(7, d));
        assert_ne!(a, sample_task(8, d));
        assert!(a.facts.contains_key(&a.query_slot));
    }

    #[test]
    fn distractors_never_repeat_a_fact() {
        let d = Difficulty {
            n_facts: 8,
            n_distractors: 12,
        };
        for seed in 0..200 {
            let t = sample_task(seed, d);
            for &(s, v) in &t.distractors {
                assert_ne!(t.facts.get(&s), Some(&v));
            }
            let tokens = tokenize(&render(&t.serialized_docs())).unwrap();
            assert_eq!(tokens, t.serialized_docs());
        }
    }

    #[test]
    fn oracle_lookup() {
        let t = ToyTask::new(BTreeMap::from([(3, 42)]), vec![(3, 77)], 3);
        assert_eq!(exact_oracle(&t, 3), OracleAnswer::Value(42));
        assert_eq!(exact_oracle(&t, 9), OracleAnswer::CannotAnswer);
        assert_eq!(
            t.to_rag_sample("x").relevance_labels,
            Some(vec![true, false])
        );
        assert_eq!(token_id("s3").unwrap(), slot_token(3));
    }
}
