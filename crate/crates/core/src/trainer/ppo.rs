//! Clipped-surrogate loss over the paired Solver/Checker trajectories.
//!
//! For a batch of `|B|` samples, with `N = 2|B|`:
//!
//! ```text
//! L = -(1/N) sum_traj sum_t min(r_t A_t, clip(r_t, 1-eps, 1+eps) A_t)
//!     + beta (1/N) sum_traj sum_t (log pi(t) - log pi_ref(t))
//!     + (1/N) sum_traj sum_t (V_t - R_t)^2 / 2
//! ```
//!
//! where `r_t = exp(log pi(t) - log pi_old(t))`. The KL term uses the
//! per-token estimator `log pi - log pi_ref`, whose gradient with respect
//! to `log pi` is 1.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gae::{compute_gae, terminal_rewards, whiten};
use super::{TrainConfig, TrainError};
use crate::prompting::Role;
use crate::toyworld::ToyPolicy;

/// Per-token KL estimator `log pi_theta - log pi_ref`.
pub fn kl_penalty_per_token(policy_logprobs: &[f64], ref_logprobs: &[f64]) -> Result<Vec<f64>, TrainError> {
    if policy_logprobs.len() != ref_logprobs.len() {
        return Err(TrainError::LengthMismatch {
            what: "reference log-probs",
            expected: policy_logprobs.len(),
            got: ref_logprobs.len(),
        });
    }
    Ok(policy_logprobs.iter().zip(ref_logprobs).map(|(p, r)| p - r).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrajectory {
    pub role: Role,
    /// Index of the sample this trajectory came from.
    pub sample: usize,
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
    /// Log-probs under the policy that generated the trajectory.
    pub old_logprobs: Vec<f64>,
    pub reward: f64,
}

impl TrainTrajectory {
    pub fn len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub n_samples: usize,
    pub trajectories: Vec<TrainTrajectory>,
    pub advantages: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
    pub ref_logprobs: Vec<Vec<f64>>,
}

impl TrainBatch {
    /// Runs the value head and the reference policy, then GAE (and
    /// whitening when configured).
    pub fn build(
        policy: &ToyPolicy,
        reference: &ToyPolicy,
        trajectories: Vec<TrainTrajectory>,
        n_samples: usize,
        cfg: &TrainConfig,
    ) -> Result<TrainBatch, TrainError> {
        let temp = cfg.temperature;
        let evals: Vec<Result<(Vec<f64>, Vec<f64>, Vec<f64>), TrainError>> = trajectories
            .par_iter()
            .map(|t| {
                if t.is_empty() {
                    return Err(TrainError::EmptyTrajectory);
                }
                let cur = policy.forward(&t.tokens, t.prompt_len, temp)?;
                let refp = reference.forward(&t.tokens, t.prompt_len, temp)?;
                let (adv, ret) = compute_gae(
                    &terminal_rewards(t.len(), t.reward),
                    &cur.values,
                    cfg.gamma,
                    cfg.gae_lambda,
                )?;
                Ok((adv, ret, refp.logprobs))
            })
            .collect();
        let mut advantages = Vec::with_capacity(evals.len());
        let mut returns = Vec::with_capacity(evals.len());
        let mut ref_logprobs = Vec::with_capacity(evals.len());
        for e in evals {
            let (a, r, l) = e?;
            advantages.push(a);
            returns.push(r);
            ref_logprobs.push(l);
        }
        if cfg.whiten {
            whiten(&mut advantages);
        }
        let batch = TrainBatch {
            n_samples,
            trajectories,
            advantages,
            returns,
            ref_logprobs,
        };
        batch.validate()?;
        Ok(batch)
    }

    /// At most one Solver and one Checker trajectory per sample, paired
    /// trajectories share their reward, and per-token arrays line up.
    pub fn validate(&self) -> Result<(), TrainError> {
        let mut seen: std::collections::BTreeMap<usize, (usize, f64)> = Default::default();
        for (i, t) in self.trajectories.iter().enumerate() {
            if t.sample >= self.n_samples {
                return Err(TrainError::Batch(format!("trajectory {i} names sample {}", t.sample)));
            }
            if !matches!(t.role, Role::Solver | Role::Checker) {
                return Err(TrainError::Batch(format!("trajectory {i} has role {}", t.role)));
            }
            let n = t.len();
            for (what, arr) in [
                ("old log-probs", t.old_logprobs.len()),
                ("advantages", self.advantages[i].len()),
                ("returns", self.returns[i].len()),
                ("reference log-probs", self.ref_logprobs[i].len()),
            ] {
                if arr != n {
                    return Err(TrainError::LengthMismatch {
                        what,
                        expected: n,
                        got: arr,
                    });
                }
            }
            let entry = seen.entry(t.sample).or_insert((0, t.reward));
            entry.0 += 1;
            if entry.0 > 2 || entry.1 != t.reward {
                return Err(TrainError::Batch(format!("sample {} is not a reward-sharing pair", t.sample)));
            }
        }
        Ok(())
    }

    /// The `2|B|` normalizer.
    pub fn normalizer(&self) -> f64 {
        (2 * self.n_samples) as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Negated clipped surrogate.
    pub policy_loss: f64,
    /// `beta * (1/N) * sum (log pi - log pi_ref)`.
    pub kl_loss: f64,
    pub value_loss: f64,
    /// Surrogate before negation, `(1/N) sum min(...)`.
    pub surrogate: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.policy_loss + self.kl_loss + self.value_loss
    }

    fn add(&mut self, o: &LossParts) {
        self.policy_loss += o.policy_loss;
        self.kl_loss += o.kl_loss;
        self.value_loss += o.value_loss;
        self.surrogate += o.surrogate;
    }
}

/// Loss and its gradient under `policy`. The advantages, returns and old
/// log-probs in `batch` are constants.
pub fn ppo_loss_and_grad(
    policy: &ToyPolicy,
    batch: &TrainBatch,
    cfg: &TrainConfig,
) -> Result<(LossParts, Vec<f64>), TrainError> {
    let n = batch.normalizer();
    let eps = cfg.clip_epsilon;
    let temp = cfg.temperature;
    let parts: Vec<Result<(LossParts, Vec<f64>), TrainError>> = (0..batch.trajectories.len())
        .into_par_iter()
        .map(|i| {
            let t = &batch.trajectories[i];
            let f = policy.forward(&t.tokens, t.prompt_len, temp)?;
            let mut loss = LossParts::default();
            let mut dlogp = vec![0.0; t.len()];
            let mut dv = vec![0.0; t.len()];
            for k in 0..t.len() {
                let a = batch.advantages[i][k];
                let ratio = (f.logprobs[k] - t.old_logprobs[k]).exp();
                let unclipped = ratio * a;
                let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * a;
                let sur = unclipped.min(clipped);
                loss.surrogate += sur / n;
                loss.policy_loss -= sur / n;
                // d sur / d logp = ratio * a when the unclipped branch is active
                if unclipped <= clipped {
                    dlogp[k] -= ratio * a / n;
                }
                let kl = f.logprobs[k] - batch.ref_logprobs[i][k];
                loss.kl_loss += cfg.kl_beta * kl / n;
                dlogp[k] += cfg.kl_beta / n;
                let err = f.values[k] - batch.returns[i][k];
                loss.value_loss += 0.5 * err * err / n;
                dv[k] = err / n;
            }
            let mut g = vec![0.0; policy.n_params()];
            policy.backward(&t.tokens, t.prompt_len, temp, &f, &dlogp, &dv, &mut g);
            Ok((loss, g))
        })
        .collect();
    let mut total = LossParts::default();
    let mut grad = vec![0.0; policy.n_params()];
    for p in parts {
        let (l, g) = p?;
        total.add(&l);
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total, grad))
}

/// Actor gradient of `-(1/N) sum A_t log pi(t)`, computed independently of
/// [`ppo_loss_and_grad`] as a cross-check.
pub fn vanilla_pg_grad(policy: &ToyPolicy, batch: &TrainBatch, temperature: f64) -> Result<Vec<f64>, TrainError> {
    let n = batch.normalizer();
    let mut grad = vec![0.0; policy.n_params()];
    for (t, adv) in batch.trajectories.iter().zip(&batch.advantages) {
        let f = policy.forward(&t.tokens, t.prompt_len, temperature)?;
        let w: Vec<f64> = adv.iter().map(|a| -a / n).collect();
        policy.backward(&t.tokens, t.prompt_len, temperature, &f, &w, &vec![0.0; w.len()], &mut grad);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_estimator_values() {
        assert_eq!(kl_penalty_per_token(&[-1.0, -2.0], &[-1.0, -2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(kl_penalty_per_token(&[-1.0], &[-1.5]).unwrap(), vec![0.5]);
        assert!(kl_penalty_per_token(&[-1.0], &[]).is_err());
    }
}
