//! Solver → Proposer → Checker orchestration for one sample.
//!
//! The Checker prompt is built from the proposed questions and the sample's
//! documents only; the Solver response and the asserted answers never reach
//! it. Consensus over the `m` audit samples is by strict majority.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{Document, RagSample};
use crate::llmgateway::{fingerprint, Backend, FinishReason, GatewayError, SamplingConfig};
use crate::prompting::{PromptConfig, PromptError, Role, RolePrompt, TemplateSet};
use crate::reward::{score_rollout, RewardConfig, RewardError, RewardRecord};
use crate::seeds::{mix, mix_str};
use crate::textparse::{
    parse_checker_answers, parse_proposed_qa, CheckedAnswer, CheckerParse, ClaimQA,
    NumericAnswer, ProposedQa, Verdict,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Solve,
    Propose,
    Check,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Solve => "solve",
            Stage::Propose => "propose",
            Stage::Check => "check",
        })
    }
}

#[derive(Debug, Error)]
#[error("{0}")]
pub struct DialectError(pub String);

impl From<PromptError> for DialectError {
    fn from(e: PromptError) -> Self {
        DialectError(e.to_string())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("sample {sample_id}: {stage} stage: {source}")]
    Backend {
        sample_id: String,
        stage: Stage,
        #[source]
        source: GatewayError,
    },
    #[error("sample {sample_id}: {stage} prompt: {source}")]
    Prompt {
        sample_id: String,
        stage: Stage,
        #[source]
        source: DialectError,
    },
    #[error("sample {sample_id}: backend returned {got} generations, expected {expected}")]
    ShortReply {
        sample_id: String,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("rollout sink: {0}")]
    Sink(#[from] std::io::Error),
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Backend { stage, .. } | PipelineError::Prompt { stage, .. } => {
                Some(*stage)
            }
            _ => None,
        }
    }
}

/// How prompts are rendered and outputs parsed for a family of backends.
pub trait Dialect: Send + Sync {
    fn name(&self) -> &str;
    fn solver_prompt(&self, sample: &RagSample) -> Result<RolePrompt, DialectError>;
    fn proposer_prompt(
        &self,
        response: &str,
        config: &PromptConfig,
    ) -> Result<RolePrompt, DialectError>;
    fn parse_claims(&self, output: &str) -> ProposedQa;
    fn checker_prompt(
        &self,
        questions: &[String],
        documents: &[Document],
    ) -> Result<RolePrompt, DialectError>;
    fn parse_answers(&self, output: &str, n_questions: usize) -> CheckerParse;
    fn template_versions(&self) -> Vec<(String, String)>;
}

/// Natural-language templates and the text grammars.
#[derive(Debug, Clone, Default)]
pub struct TextDialect {
    pub templates: TemplateSet,
}

impl TextDialect {
    pub fn new(templates: TemplateSet) -> Self {
        TextDialect { templates }
    }
}

impl Dialect for TextDialect {
    fn name(&self) -> &str {
        "text"
    }

    fn solver_prompt(&self, sample: &RagSample) -> Result<RolePrompt, DialectError> {
        Ok(self.templates.render_solver_prompt(sample)?)
    }

    fn proposer_prompt(
        &self,
        response: &str,
        config: &PromptConfig,
    ) -> Result<RolePrompt, DialectError> {
        Ok(self.templates.render_proposer_prompt(response, config)?)
    }

    fn parse_claims(&self, output: &str) -> ProposedQa {
        parse_proposed_qa(output)
    }

    fn checker_prompt(
        &self,
        questions: &[String],
        documents: &[Document],
    ) -> Result<RolePrompt, DialectError> {
        Ok(self.templates.render_checker_prompt(questions, documents)?)
    }

    fn parse_answers(&self, output: &str, n_questions: usize) -> CheckerParse {
        parse_checker_answers(output, n_questions)
    }

    fn template_versions(&self) -> Vec<(String, String)> {
        self.templates.versions()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub role: Role,
    pub prompt_fingerprint: String,
    pub prompt: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    pub finish_reason: FinishReason,
    #[serde(default)]
    pub terminal_reward: Option<f64>,
}

impl Trajectory {
    fn from_generation(prompt: &RolePrompt, text: String, logprobs: Option<Vec<f64>>, finish: FinishReason) -> Self {
        Trajectory {
            role: prompt.role,
            prompt_fingerprint: fingerprint(prompt),
            prompt: prompt.text.clone(),
            text,
            token_logprobs: logprobs,
            finish_reason: finish,
            terminal_reward: None,
        }
    }

    /// Sets the terminal reward.
    ///
    /// # Panics
    /// If the trajectory was already labeled.
    pub fn label(&mut self, reward: f64) {
        assert!(
            self.terminal_reward.is_none(),
            "trajectory labeled twice"
        );
        self.terminal_reward = Some(reward);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Vote {
    Number(NumericAnswer),
    CannotAnswer,
    /// The audit sample had no parseable answer for this question.
    Absent,
}

impl Vote {
    pub fn from_answer(answer: Option<&CheckedAnswer>) -> Vote {
        match answer.map(|a| &a.verdict) {
            Some(Verdict::Number(n)) => Vote::Number(n.clone()),
            Some(Verdict::CannotAnswer) => Vote::CannotAnswer,
            None => Vote::Absent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ConsensusAnswer {
    Number(NumericAnswer),
    CannotAnswer,
    NoConsensus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditConsensus {
    /// 1-based.
    pub question_index: usize,
    pub votes: Vec<Vote>,
    pub evidence: Vec<Option<String>>,
    pub consensus: ConsensusAnswer,
}

/// Strict majority over all votes (absent ones included in the count);
/// numbers are compared by canonical form.
pub fn majority(votes: &[Vote]) -> ConsensusAnswer {
    let mut counts: BTreeMap<Option<&str>, (usize, &Vote)> = BTreeMap::new();
    for v in votes {
        let key = match v {
            Vote::Number(n) => Some(n.canonical.as_str()),
            Vote::CannotAnswer => None,
            Vote::Absent => continue,
        };
        counts.entry(key).or_insert((0, v)).0 += 1;
    }
    for (count, vote) in counts.values() {
        if 2 * count > votes.len() {
            return match vote {
                Vote::Number(n) => ConsensusAnswer::Number(n.clone()),
                _ => ConsensusAnswer::CannotAnswer,
            };
        }
    }
    ConsensusAnswer::NoConsensus
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    /// Number of independent Checker audit samples (`m`).
    pub checker_samples: usize,
    pub solver_sampling: SamplingConfig,
    pub proposer_sampling: SamplingConfig,
    pub checker_sampling: SamplingConfig,
    /// Base seed; each call derives its own from stage and sample id.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            prompt: PromptConfig::default(),
            reward: RewardConfig::default(),
            checker_samples: 3,
            solver_sampling: SamplingConfig::for_role(Role::Solver),
            proposer_sampling: SamplingConfig::for_role(Role::Proposer),
            checker_sampling: SamplingConfig::for_role(Role::Checker),
            seed: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.checker_samples == 0 {
            return Err(PipelineError::Config("checker_samples must be >= 1".into()));
        }
        if self.prompt.min_questions == Some(0) {
            return Err(PipelineError::Config("min_questions must be >= 1".into()));
        }
        for s in [&self.solver_sampling, &self.proposer_sampling, &self.checker_sampling] {
            s.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        self.reward.validate()?;
        Ok(())
    }

    fn call_seed(&self, stage: Stage, sample_id: &str) -> Option<u64> {
        self.seed
            .map(|s| mix_str(mix(s, &[stage as u64]), sample_id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckerOutcome {
    /// The first audit sample, kept for training.
    pub trajectory: Trajectory,
    pub audit_texts: Vec<String>,
    pub audit_samples: Vec<Vec<CheckedAnswer>>,
    pub consensus: Vec<AuditConsensus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub sample_id: String,
    pub solver: Trajectory,
    pub proposer: Trajectory,
    pub claims: Vec<ClaimQA>,
    pub malformed_claims: usize,
    /// Absent when no claims were proposed.
    pub checker: Option<Trajectory>,
    pub audit_texts: Vec<String>,
    pub audit_samples: Vec<Vec<CheckedAnswer>>,
    pub consensus: Vec<AuditConsensus>,
    pub reward: RewardRecord,
}

pub struct Pipeline<'a> {
    pub backend: &'a dyn Backend,
    pub dialect: &'a dyn Dialect,
    pub config: &'a PipelineConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(backend: &'a dyn Backend, dialect: &'a dyn Dialect, config: &'a PipelineConfig) -> Self {
        Pipeline {
            backend,
            dialect,
            config,
        }
    }

    fn generate(
        &self,
        sample_id: &str,
        stage: Stage,
        prompt: &RolePrompt,
        sampling: &SamplingConfig,
        n: usize,
    ) -> Result<Vec<Trajectory>, PipelineError> {
        let cfg = sampling
            .with_samples(n)
            .with_seed(self.config.call_seed(stage, sample_id).or(sampling.seed));
        let gens = self
            .backend
            .generate(prompt, &cfg)
            .map_err(|source| PipelineError::Backend {
                sample_id: sample_id.to_string(),
                stage,
                source,
            })?;
        if gens.len() != n {
            return Err(PipelineError::ShortReply {
                sample_id: sample_id.to_string(),
                got: gens.len(),
                expected: n,
            });
        }
        Ok(gens
            .into_iter()
            .map(|g| Trajectory::from_generation(prompt, g.text, g.token_logprobs, g.finish_reason))
            .collect())
    }

    fn prompt_err(sample_id: &str, stage: Stage) -> impl FnOnce(DialectError) -> PipelineError + '_ {
        move |source| PipelineError::Prompt {
            sample_id: sample_id.to_string(),
            stage,
            source,
        }
    }

    pub fn run_solver(&self, sample: &RagSample) -> Result<Trajectory, PipelineError> {
        let prompt = self
            .dialect
            .solver_prompt(sample)
            .map_err(Self::prompt_err(&sample.id, Stage::Solve))?;
        let mut out = self.generate(&sample.id, Stage::Solve, &prompt, &self.config.solver_sampling, 1)?;
        Ok(out.remove(0))
    }

    pub fn run_proposer(
        &self,
        sample_id: &str,
        solver: &Trajectory,
    ) -> Result<(Trajectory, ProposedQa), PipelineError> {
        let prompt = self
            .dialect
            .proposer_prompt(&solver.text, &self.config.prompt)
            .map_err(Self::prompt_err(sample_id, Stage::Propose))?;
        let mut out = self.generate(sample_id, Stage::Propose, &prompt, &self.config.proposer_sampling, 1)?;
        let traj = out.remove(0);
        let parsed = self.dialect.parse_claims(&traj.text);
        Ok((traj, parsed))
    }

    /// Requires at least one claim.
    pub fn run_checker(
        &self,
        claims: &[ClaimQA],
        sample: &RagSample,
    ) -> Result<CheckerOutcome, PipelineError> {
        let m = self.config.checker_samples;
        if claims.is_empty() {
            return Err(PipelineError::Config("checker needs at least one claim".into()));
        }
        let questions: Vec<String> = claims.iter().map(|c| c.question.clone()).collect();
        let prompt = self
            .dialect
            .checker_prompt(&questions, &sample.documents)
            .map_err(Self::prompt_err(&sample.id, Stage::Check))?;
        let trajs = self.generate(&sample.id, Stage::Check, &prompt, &self.config.checker_sampling, m)?;
        let parses: Vec<CheckerParse> = trajs
            .iter()
            .map(|t| self.dialect.parse_answers(&t.text, claims.len()))
            .collect();
        let consensus = (1..=claims.len())
            .map(|q| {
                let answers: Vec<Option<&CheckedAnswer>> = parses.iter().map(|p| p.get(q)).collect();
                let votes: Vec<Vote> = answers.iter().map(|a| Vote::from_answer(*a)).collect();
                AuditConsensus {
                    question_index: q,
                    evidence: answers.iter().map(|a| a.and_then(|a| a.evidence.clone())).collect(),
                    consensus: majority(&votes),
                    votes,
                }
            })
            .collect();
        let audit_texts = trajs.iter().map(|t| t.text.clone()).collect();
        Ok(CheckerOutcome {
            trajectory: trajs.into_iter().next().expect("m >= 1"),
            audit_texts,
            audit_samples: parses.into_iter().map(|p| p.answers).collect(),
            consensus,
        })
    }

    /// Full rollout; the reward is written to both the Solver and the
    /// Checker trajectory.
    pub fn run_rollout(&self, sample: &RagSample) -> Result<RolloutRecord, PipelineError> {
        let mut solver = self.run_solver(sample)?;
        let (proposer, proposed) = self.run_proposer(&sample.id, &solver)?;
        let claims = proposed.claims;
        let (mut checker, audit_texts, audit_samples, consensus) = if claims.is_empty() {
            (None, Vec::new(), Vec::new(), Vec::new())
        } else {
            let out = self.run_checker(&claims, sample)?;
            (Some(out.trajectory), out.audit_texts, out.audit_samples, out.consensus)
        };
        let reward = score_rollout(
            &claims,
            &consensus,
            &self.config.reward,
            self.config.prompt.min_questions,
        )?;
        solver.label(reward.value);
        if let Some(c) = checker.as_mut() {
            c.label(reward.value);
        }
        Ok(RolloutRecord {
            sample_id: sample.id.clone(),
            solver,
            proposer,
            claims,
            malformed_claims: proposed.malformed,
            checker,
            audit_texts,
            audit_samples,
            consensus,
            reward,
        })
    }

    /// Runs every sample on the current rayon pool; one failure never
    /// affects the others. Results keep input order.
    pub fn run_batch(
        &self,
        samples: &[RagSample],
        sink: Option<&RolloutSink>,
    ) -> Vec<Result<RolloutRecord, PipelineError>> {
        samples
            .par_iter()
            .map(|s| {
                let record = self.run_rollout(s)?;
                if let Some(sink) = sink {
                    sink.append(&record, self.config)?;
                }
                Ok(record)
            })
            .collect()
    }
}

#[derive(Serialize)]
struct SinkLine<'a> {
    #[serde(flatten)]
    record: &'a RolloutRecord,
    config: &'a PipelineConfig,
}

/// JSON-lines writer; each record is written and flushed under one lock.
pub struct RolloutSink {
    out: Mutex<BufWriter<File>>,
}

impl RolloutSink {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(RolloutSink {
            out: Mutex::new(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn append(&self, record: &RolloutRecord, config: &PipelineConfig) -> std::io::Result<()> {
        let line = serde_json::to_string(&SinkLine { record, config })?;
        let mut out = self.out.lock().expect("sink lock");
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
        out.flush()
    }
}

/// Reads back records written by [`RolloutSink`].
pub fn read_rollouts(path: &Path) -> std::io::Result<Vec<RolloutRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}
