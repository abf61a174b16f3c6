//! Dual-trajectory PPO on the toy policy.
//!
//! Each step samples a batch of toy tasks, runs the full pipeline against a
//! frozen snapshot of the current policy, labels the Solver and Checker
//! trajectories with the shared reward and takes one clipped-surrogate step
//! for the actor and one regression step for the value head. Proposer
//! trajectories receive no gradient.

pub mod checkpoint;
pub mod gae;
pub mod optim;
pub mod ppo;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::llmgateway::{SamplingConfig, ToyBackend};
use crate::pipeline::{ConsensusAnswer, Pipeline, PipelineConfig, RolloutRecord, Trajectory};
use crate::prompting::Role;
use crate::seeds::mix;
use crate::toyworld::vocab::tokenize;
use crate::toyworld::{
    exact_oracle, sample_task, slot_from_question, Difficulty, OracleAnswer, PolicyError,
    ToyDialect, ToyPolicy, ToyTask,
};

pub use checkpoint::Checkpoint;
pub use gae::{compute_gae, terminal_rewards, whiten};
pub use optim::{Adam, ParamGroup};
pub use ppo::{kl_penalty_per_token, ppo_loss_and_grad, vanilla_pg_grad, LossParts, TrainBatch, TrainTrajectory};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("malformed batch: {0}")]
    Batch(String),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}; parameters left unchanged")]
    NonFinite { step: usize, what: &'static str },
    #[error("every rollout in step {0} failed")]
    NoRollouts(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("trajectory does not match the toy vocabulary: {0}")]
    Tokens(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("metrics: {0}")]
    Metrics(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub kl_beta: f64,
    pub clip_epsilon: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub actor_warmup_steps: usize,
    pub critic_warmup_steps: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Number of updates in a run.
    pub steps: usize,
    /// Normalize advantages jointly over the batch.
    pub whiten: bool,
    /// Rollout temperature; the policy being optimized is the tempered one.
    pub temperature: f64,
    /// Generation budget per role call.
    pub max_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.998,
            gae_lambda: 0.95,
            kl_beta: 1e-3,
            clip_epsilon: 0.2,
            actor_lr: 1e-3,
            critic_lr: 1e-2,
            batch_size: 32,
            epochs: 1,
            actor_warmup_steps: 5,
            critic_warmup_steps: 10,
            checkpoint_every: 20,
            seed: 1,
            steps: 500,
            whiten: true,
            temperature: 0.6,
            max_tokens: 40,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must be in [0, 1]");
        }
        if !(self.kl_beta >= 0.0) {
            return bad("kl_beta must be >= 0");
        }
        if !(self.clip_epsilon > 0.0) {
            return bad("clip_epsilon must be > 0");
        }
        if !(self.actor_lr >= 0.0 && self.critic_lr >= 0.0) {
            return bad("learning rates must be >= 0");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be >= 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0 for training");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be >= 1");
        }
        Ok(())
    }

    /// Rollout sampling: the training temperature with no top-p/top-k
    /// truncation, so that sampled tokens follow the policy being optimized.
    pub fn rollout_sampling(&self) -> SamplingConfig {
        SamplingConfig {
            temperature: self.temperature,
            top_p: 1.0,
            top_k: 0,
            n_samples: 1,
            max_tokens: self.max_tokens,
            seed: None,
        }
    }

    pub fn groups(&self, policy: &ToyPolicy) -> [ParamGroup; 2] {
        let layout = policy.layout();
        [
            ParamGroup {
                range: 0..layout.critic,
                lr: self.actor_lr,
                warmup_steps: self.actor_warmup_steps,
            },
            ParamGroup {
                range: layout.critic..layout.total,
                lr: self.critic_lr,
                warmup_steps: self.critic_warmup_steps,
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub mean_questions_proposed: f64,
    pub checker_accuracy_vs_oracle: f64,
}

/// Rollouts of one step, before the update.
#[derive(Debug, Clone)]
pub struct Collected {
    pub tasks: Vec<ToyTask>,
    /// Surviving records with the index of their task.
    pub records: Vec<(usize, RolloutRecord)>,
    pub failures: usize,
}

fn traj_tokens(t: &Trajectory, role: Role, sample: usize) -> Result<TrainTrajectory, TrainError> {
    let prompt = tokenize(&t.prompt).map_err(|e| TrainError::Tokens(e.to_string()))?;
    let gen = tokenize(&t.text).map_err(|e| TrainError::Tokens(e.to_string()))?;
    let old = t
        .token_logprobs
        .clone()
        .ok_or_else(|| TrainError::Tokens("trajectory without log-probs".into()))?;
    if old.len() != gen.len() {
        return Err(TrainError::LengthMismatch {
            what: "generation log-probs",
            expected: gen.len(),
            got: old.len(),
        });
    }
    let reward = t
        .terminal_reward
        .ok_or_else(|| TrainError::Batch("unlabeled trajectory".into()))?;
    let prompt_len = prompt.len();
    let mut tokens = prompt;
    tokens.extend(gen);
    Ok(TrainTrajectory {
        role,
        sample,
        tokens,
        prompt_len,
        old_logprobs: old,
        reward,
    })
}

/// Solver and Checker trajectories of each record, numbered by position in
/// `records`. A record without claims contributes only its Solver path.
pub fn batch_trajectories(records: &[&RolloutRecord]) -> Result<Vec<TrainTrajectory>, TrainError> {
    let mut out = Vec::with_capacity(2 * records.len());
    for (i, r) in records.iter().enumerate() {
        out.push(traj_tokens(&r.solver, Role::Solver, i)?);
        if let Some(c) = &r.checker {
            out.push(traj_tokens(c, Role::Checker, i)?);
        }
    }
    Ok(out)
}

fn oracle_agrees(task: &ToyTask, question: &str, consensus: &ConsensusAnswer) -> bool {
    let truth = slot_from_question(question)
        .map(|s| exact_oracle(task, s))
        .unwrap_or(OracleAnswer::CannotAnswer);
    match (truth, consensus) {
        (OracleAnswer::Value(v), ConsensusAnswer::Number(n)) => n.canonical.as_str() == v.to_string(),
        (OracleAnswer::CannotAnswer, ConsensusAnswer::CannotAnswer) => true,
        _ => false,
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub pipeline: PipelineConfig,
    pub difficulty: Difficulty,
    policy: ToyPolicy,
    reference: Arc<ToyPolicy>,
    adam: Adam,
    step: usize,
}

impl Trainer {
    /// The reference policy is a frozen copy of `initial`. Sampling settings
    /// in `pipeline` are replaced by [`TrainConfig::rollout_sampling`].
    pub fn new(
        initial: ToyPolicy,
        config: TrainConfig,
        mut pipeline: PipelineConfig,
        difficulty: Difficulty,
    ) -> Result<Trainer, TrainError> {
        config.validate()?;
        let sampling = config.rollout_sampling();
        pipeline.solver_sampling = sampling;
        pipeline.proposer_sampling = sampling;
        pipeline.checker_sampling = sampling;
        pipeline.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(Trainer {
            adam: Adam::new(initial.n_params()),
            reference: Arc::new(initial.clone()),
            policy: initial,
            config,
            pipeline,
            difficulty,
            step: 0,
        })
    }

    pub fn policy(&self) -> &ToyPolicy {
        &self.policy
    }

    pub fn reference(&self) -> &ToyPolicy {
        &self.reference
    }

    /// Number of completed updates.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Phase 1 for the next step: rollouts under the current parameters.
    pub fn collect(&self) -> Collected {
        let step = self.step + 1;
        let tasks: Vec<ToyTask> = (0..self.config.batch_size)
            .map(|i| sample_task(mix(self.config.seed, &[step as u64, i as u64, 0x7a5c]), self.difficulty))
            .collect();
        let samples: Vec<_> = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| t.to_rag_sample(format!("{step}-{i}")))
            .collect();
        let backend = ToyBackend::new(Arc::new(self.policy.clone()));
        let pcfg = PipelineConfig {
            seed: Some(mix(self.config.seed, &[step as u64, 0x5eed])),
            ..self.pipeline.clone()
        };
        let results = Pipeline::new(&backend, &ToyDialect, &pcfg).run_batch(&samples, None);
        let mut records = Vec::with_capacity(results.len());
        let mut failures = 0;
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(rec) => records.push((i, rec)),
                Err(e) => {
                    failures += 1;
                    log::warn!("step {step}: rollout skipped: {e}");
                }
            }
        }
        Collected {
            tasks,
            records,
            failures,
        }
    }

    /// Phase 1 and Phase 2 for one batch.
    pub fn step(&mut self) -> Result<TrainMetrics, TrainError> {
        let collected = self.collect();
        self.update(&collected)
    }

    pub fn update(&mut self, collected: &Collected) -> Result<TrainMetrics, TrainError> {
        let step = self.step + 1;
        if collected.records.is_empty() {
            return Err(TrainError::NoRollouts(step));
        }
        let records: Vec<&RolloutRecord> = collected.records.iter().map(|(_, r)| r).collect();
        let trajectories = batch_trajectories(&records)?;
        let batch = TrainBatch::build(
            &self.policy,
            &self.reference,
            trajectories,
            records.len(),
            &self.config,
        )?;

        let mut kl_sum = 0.0;
        let mut kl_n = 0usize;
        for (t, r) in batch.trajectories.iter().zip(&batch.ref_logprobs) {
            kl_sum += kl_penalty_per_token(&t.old_logprobs, r)?.iter().sum::<f64>();
            kl_n += t.len();
        }

        let groups = self.config.groups(&self.policy);
        let mut first: Option<LossParts> = None;
        for _ in 0..self.config.epochs {
            let (loss, grad) = ppo_loss_and_grad(&self.policy, &batch, &self.config)?;
            if !loss.total().is_finite() {
                return Err(TrainError::NonFinite { step, what: "loss" });
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite { step, what: "gradient" });
            }
            self.adam.step(self.policy.params_mut(), &grad, &groups);
            first.get_or_insert(loss);
        }
        let loss = first.expect("epochs >= 1");
        self.step = step;

        let n = records.len() as f64;
        let mut checked = 0usize;
        let mut agree = 0usize;
        for (i, r) in &collected.records {
            for (c, q) in r.consensus.iter().zip(&r.claims) {
                checked += 1;
                agree += usize::from(oracle_agrees(&collected.tasks[*i], &q.question, &c.consensus));
            }
        }
        let metrics = TrainMetrics {
            step,
            mean_reward: records.iter().map(|r| r.reward.value).sum::<f64>() / n,
            mean_kl: if kl_n == 0 { 0.0 } else { kl_sum / kl_n as f64 },
            policy_loss: loss.policy_loss,
            value_loss: loss.value_loss,
            mean_questions_proposed: records.iter().map(|r| r.claims.len() as f64).sum::<f64>() / n,
            checker_accuracy_vs_oracle: if checked == 0 {
                f64::NAN
            } else {
                agree as f64 / checked as f64
            },
        };
        log::info!(
            "step {step}: reward {:.3} questions {:.2} checker {:.3} kl {:.4} ({} rollouts failed)",
            metrics.mean_reward,
            metrics.mean_questions_proposed,
            metrics.checker_accuracy_vs_oracle,
            metrics.mean_kl,
            collected.failures
        );
        Ok(metrics)
    }

    pub fn checkpoint(&self, config: Value) -> Checkpoint {
        Checkpoint {
            step: self.step,
            policy: self.policy.clone(),
            config,
        }
    }
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub metrics_csv: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stored in every checkpoint.
    pub config_snapshot: Value,
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step-{step:05}.ckpt"))
}

/// Runs `trainer.config.steps` updates, streaming metrics to CSV after every
/// step and checkpointing every `checkpoint_every` steps and at the end.
pub fn train(
    trainer: &mut Trainer,
    outputs: &TrainOutputs,
    mut observer: impl FnMut(&TrainMetrics),
) -> Result<Vec<TrainMetrics>, TrainError> {
    let mut writer = match &outputs.metrics_csv {
        Some(p) => Some(csv::Writer::from_path(p)?),
        None => None,
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| TrainError::Io {
            path: dir.clone(),
            source: e,
        })?;
    }
    let total = trainer.config.steps;
    let mut all = Vec::with_capacity(total);
    for _ in 0..total {
        let m = trainer.step()?;
        if let Some(w) = writer.as_mut() {
            w.serialize(&m)?;
            w.flush().map_err(|e| TrainError::Metrics(e.into()))?;
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            if m.step % trainer.config.checkpoint_every == 0 || m.step == total {
                trainer
                    .checkpoint(outputs.config_snapshot.clone())
                    .save(&checkpoint_path(dir, m.step))?;
            }
        }
        observer(&m);
        all.push(m);
    }
    Ok(all)
}
