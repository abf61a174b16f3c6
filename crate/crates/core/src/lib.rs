//! Multi-agent factuality checking for retrieval-augmented answers.
//!
//! A Solver answers from documents, a Proposer turns the answer into atomic
//! numeric question/answer claims, and a Checker answers those questions
//! from the documents alone, without seeing the Solver's response. Claims
//! that fail to match the Checker produce a zero-tolerance reward shared by
//! the Solver and Checker trajectories, which the [`trainer`] optimizes with
//! a clipped surrogate on a toy synthetic task ([`toyworld`]).

pub mod datamodel;
pub mod evalharness;
pub mod llmgateway;
pub mod pipeline;
pub mod prompting;
pub mod reward;
pub mod seeds;
pub mod textparse;
pub mod toyworld;
pub mod trainer;

pub use datamodel::{load_dataset, DataError, DatasetStats, Document, RagSample};
pub use evalharness::{evaluate, EvalConfig, EvalReport, GoldMatchJudge, Judge, JudgeVerdict, LlmJudge};
pub use llmgateway::{Backend, BackendSpec, GatewayError, Generation, SamplingConfig};
pub use pipeline::{Dialect, Pipeline, PipelineConfig, PipelineError, RolloutRecord, TextDialect, Trajectory};
pub use prompting::{PromptConfig, Role, RolePrompt, TemplateSet};
pub use reward::{MatchPolicy, RewardConfig, RewardFunction, RewardRecord, ScalarVariant};
pub use textparse::{ClaimQA, NumericAnswer, ProposedQa};
pub use trainer::{TrainConfig, TrainError, Trainer};
