//! Synthetic grounded numeric QA and a tiny trainable policy that plays all
//! three roles.

pub mod base;
pub mod grammar;
pub mod policy;
pub mod task;
pub mod vocab;

pub use base::{warm_start, BaseConfig};
pub use grammar::{
    format_micro_answers, format_micro_claims, parse_micro_answers, parse_micro_claims,
    question_for_slot, slot_from_question, ToyDialect,
};
pub use policy::{PolicyConfig, PolicyError, ToyFinish, ToyGeneration, ToyPolicy, ToySampling};
pub use task::{exact_oracle, sample_task, toy_dataset, Difficulty, OracleAnswer, ToyTask};
