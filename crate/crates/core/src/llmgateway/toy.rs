//! Backend over the toy policy.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Backend, FinishReason, GatewayError, GatewayMetrics, Generation, SamplingConfig};
use crate::prompting::{Role, RolePrompt};
use crate::seeds::mix;
use crate::toyworld::vocab::{self, render, tokenize};
use crate::toyworld::{PolicyError, ToyFinish, ToyPolicy, ToySampling};

/// Samples from a shared, immutable policy snapshot. Sample `i` of a call
/// with seed `s` uses an RNG seeded from `(s, i)`; without a seed the RNG is
/// seeded from the operating system.
pub struct ToyBackend {
    policy: Arc<ToyPolicy>,
    metrics: Arc<GatewayMetrics>,
}

impl ToyBackend {
    pub fn new(policy: Arc<ToyPolicy>) -> Self {
        ToyBackend {
            policy,
            metrics: Arc::new(GatewayMetrics::default()),
        }
    }

    pub fn with_metrics(mut self, metrics: Arc<GatewayMetrics>) -> Self {
        self.metrics = metrics;
        self
    }

    pub fn policy(&self) -> &Arc<ToyPolicy> {
        &self.policy
    }
}

fn role_marker(role: Role) -> Option<usize> {
    match role {
        Role::Solver => Some(vocab::SOLVE),
        Role::Proposer => Some(vocab::PROPOSE),
        Role::Checker => Some(vocab::CHECK),
        Role::Judge => None,
    }
}

impl Backend for ToyBackend {
    fn name(&self) -> &str {
        "toy"
    }

    fn generate(
        &self,
        prompt: &RolePrompt,
        config: &SamplingConfig,
    ) -> Result<Vec<Generation>, GatewayError> {
        config.validate()?;
        GatewayMetrics::bump(&self.metrics.requests, 1);
        let tokens = tokenize(&prompt.text).map_err(|e| GatewayError::Protocol(e.to_string()))?;
        let marker = role_marker(prompt.role).ok_or_else(|| GatewayError::Refused {
            status: 0,
            message: format!("toy policy cannot play the {} role", prompt.role),
        })?;
        if tokens.first() != Some(&marker) {
            return Err(GatewayError::Protocol(format!(
                "{} prompt must start with {}",
                prompt.role,
                vocab::token_name(marker)
            )));
        }
        let cap = self.policy.config.max_context;
        if tokens.len() >= cap {
            return Err(GatewayError::ContextOverflow {
                prompt_tokens: tokens.len(),
                max_tokens: config.max_tokens,
                limit: cap,
            });
        }
        let sampling = ToySampling {
            temperature: config.temperature,
            top_p: config.top_p,
            top_k: config.top_k,
            max_tokens: config.max_tokens,
        };
        let out = (0..config.n_samples)
            .map(|i| {
                let mut rng = match config.seed {
                    Some(s) => ChaCha8Rng::seed_from_u64(mix(s, &[i as u64])),
                    None => ChaCha8Rng::from_os_rng(),
                };
                let g = self
                    .policy
                    .generate(&tokens, &sampling, &mut rng)
                    .map_err(|e: PolicyError| GatewayError::Protocol(e.to_string()))?;
                Ok(Generation {
                    text: render(&g.tokens),
                    token_logprobs: Some(g.logprobs),
                    finish_reason: match g.finish {
                        ToyFinish::Eos => FinishReason::Stop,
                        ToyFinish::Length => FinishReason::Length,
                    },
                })
            })
            .collect::<Result<Vec<_>, GatewayError>>()?;
        GatewayMetrics::bump(&self.metrics.generations, out.len() as u64);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::PolicyConfig;

    fn backend() -> ToyBackend {
        ToyBackend::new(Arc::new(ToyPolicy::new(PolicyConfig::default(), 3)))
    }

    fn prompt(role: Role, text: &str) -> RolePrompt {
        RolePrompt {
            role,
            text: text.into(),
            template_version: "toy@1".into(),
        }
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let b = backend();
        let p = prompt(Role::Solver, "<SOLVE> <DOC> s3 4 2 <Q> s3 <SEP>");
        let cfg = SamplingConfig {
            max_tokens: 20,
            seed: Some(5),
            ..SamplingConfig::default().with_samples(8)
        };
        let a = b.generate(&p, &cfg).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, b.generate(&p, &cfg).unwrap());
        for g in &a {
            let lp = g.token_logprobs.as_ref().unwrap();
            assert_eq!(lp.len(), tokenize(&g.text).unwrap().len());
            assert!(lp.iter().all(|&x| x <= 0.0));
        }
    }

    #[test]
    fn role_marker_must_match() {
        let b = backend();
        let cfg = SamplingConfig::default();
        assert!(matches!(
            b.generate(&prompt(Role::Checker, "<SOLVE> <SEP>"), &cfg),
            Err(GatewayError::Protocol(_))
        ));
        assert!(matches!(
            b.generate(&prompt(Role::Judge, "<SOLVE> <SEP>"), &cfg),
            Err(GatewayError::Refused { .. })
        ));
        assert!(matches!(
            b.generate(&prompt(Role::Solver, "<SOLVE> hello"), &cfg),
            Err(GatewayError::Protocol(_))
        ));
        let long = format!("<SOLVE>{}", " 1".repeat(300));
        assert!(matches!(
            b.generate(&prompt(Role::Solver, &long), &cfg),
            Err(GatewayError::ContextOverflow { .. })
        ));
    }
}
