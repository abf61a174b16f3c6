//! Supervised warm start that produces the shared base policy.
//!
//! A randomly initialised policy emits no parseable claims at all, which
//! scores as a vacuous success and leaves nothing to learn. The base policy
//! is instead fitted to demonstrations of each role that follow the
//! grammars but are only partly grounded: the Solver usually invents its
//! value and sometimes adds claims about slots absent from the documents,
//! while the Checker reads the documents correctly most of the time. The
//! Proposer copies claims faithfully and, when asked for at least `k`
//! questions, cycles through the claims until it has `k`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grammar::ToyDialect;
use super::policy::{PolicyConfig, ToyPolicy};
use super::task::{sample_task, Difficulty, ToyTask, MAX_VALUE};
use super::vocab::{is_digit, is_slot, number_tokens, slot_token, A, EOS, NUL, N_SLOTS, Q, SEP};
use crate::seeds::mix;
use crate::trainer::optim::{Adam, ParamGroup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseConfig {
    pub policy: PolicyConfig,
    pub difficulty: Difficulty,
    pub seed: u64,
    pub steps: usize,
    /// Demonstrations per role per step.
    pub batch: usize,
    pub lr: f64,
    /// Temperature at which the demonstrations are fitted.
    pub temperature: f64,
    /// Chance that a Solver claim about a documented slot has the right value.
    pub solver_grounding: f64,
    /// Chance that a Checker answer is read off the documents.
    pub checker_grounding: f64,
    /// Probabilities of one, two and three Solver claims.
    pub claim_count_probs: [f64; 3],
    /// Largest `k` shown to the Proposer during the warm start.
    pub max_min_questions: usize,
    /// Chance that a Proposer demonstration starts from a damaged response.
    pub degenerate_response_prob: f64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        BaseConfig {
            policy: PolicyConfig::default(),
            difficulty: Difficulty::MICRO,
            seed: 2024,
            steps: 1500,
            batch: 16,
            lr: 1e-2,
            temperature: 0.6,
            solver_grounding: 0.25,
            checker_grounding: 0.8,
            claim_count_probs: [0.7, 0.25, 0.05],
            max_min_questions: 4,
            degenerate_response_prob: 0.35,
        }
    }
}

/// A demonstration: full token sequence and where the prompt ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
}

fn random_value(rng: &mut impl Rng) -> u32 {
    rng.random_range(0..=MAX_VALUE)
}

fn pick_count(probs: &[f64; 3], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    if u < probs[0] {
        1
    } else if u < probs[0] + probs[1] {
        2
    } else {
        3
    }
}

/// Solver claims as (slot, value): the query slot first, then extras.
fn solver_claims(task: &ToyTask, cfg: &BaseConfig, rng: &mut impl Rng) -> Vec<(u8, u32)> {
    let n = pick_count(&cfg.claim_count_probs, rng);
    let mut slots = vec![task.query_slot];
    while slots.len() < n {
        let s = rng.random_range(0..N_SLOTS as u8);
        if !slots.contains(&s) {
            slots.push(s);
        }
    }
    slots
        .into_iter()
        .map(|s| {
            let value = match task.facts.get(&s) {
                Some(&v) if rng.random_bool(cfg.solver_grounding) => v,
                _ => random_value(rng),
            };
            (s, value)
        })
        .collect()
}

fn response_tokens(claims: &[(u8, u32)]) -> Vec<usize> {
    let mut out = Vec::new();
    for &(s, v) in claims {
        out.push(slot_token(s));
        out.extend(number_tokens(v));
        out.push(SEP);
    }
    out
}

pub fn solver_demo(task: &ToyTask, cfg: &BaseConfig, rng: &mut impl Rng) -> Demo {
    let prompt = ToyDialect::solver_tokens(&task.to_rag_sample("demo")).expect("toy sample");
    let mut tokens = prompt.clone();
    tokens.extend(response_tokens(&solver_claims(task, cfg, rng)));
    tokens.push(EOS);
    Demo {
        prompt_len: prompt.len(),
        tokens,
    }
}

/// Damages a Solver response the way a drifting Solver might: nothing at
/// all, claims without their slot, slots without their value, a cut-off
/// response, a runaway digit loop, or noise.
fn degrade(response: &[usize], rng: &mut impl Rng) -> Vec<usize> {
    match rng.random_range(0..6) {
        0 => Vec::new(),
        1 => response.iter().copied().filter(|&t| !is_slot(t)).collect(),
        2 => response.iter().copied().filter(|&t| !is_digit(t)).collect(),
        3 => response[..rng.random_range(0..response.len())].to_vec(),
        4 => {
            let mut out = response[..1].to_vec();
            let a = rng.random_range(0..10);
            let b = rng.random_range(0..10);
            let n = rng.random_range(4..=36);
            out.extend((0..n).map(|i| if rng.random_bool(0.8) || i % 2 == 0 { a } else { b }));
            out
        }
        _ => (0..rng.random_range(1..=8))
            .map(|_| match rng.random_range(0..3) {
                0 => rng.random_range(0..10),
                1 => slot_token(rng.random_range(0..N_SLOTS as u8)),
                _ => SEP,
            })
            .collect(),
    }
}

/// Well-formed `slot digit+ <SEP>` claims of a response.
fn response_claims(response: &[usize]) -> Vec<(usize, &[usize])> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < response.len() {
        if is_slot(response[i]) {
            let n = response[i + 1..].iter().take_while(|&&t| is_digit(t)).count();
            if n > 0 && response.get(i + 1 + n) == Some(&SEP) {
                out.push((response[i], &response[i + 1..i + 1 + n]));
                i += n + 2;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// The Proposer restates every well-formed claim. When asked for at least
/// `k` questions it cycles through them until it has `k`; if the response
/// has none it still writes `k` claims, built from whatever slot and digits
/// it can find and invented otherwise.
pub fn proposer_demo(task: &ToyTask, cfg: &BaseConfig, rng: &mut impl Rng) -> Demo {
    let mut response = response_tokens(&solver_claims(task, cfg, rng));
    if rng.random_bool(cfg.degenerate_response_prob) {
        response = degrade(&response, rng);
    }
    let k = if rng.random_bool(0.5) {
        None
    } else {
        Some(rng.random_range(1..=cfg.max_min_questions))
    };
    let prompt = ToyDialect::proposer_tokens(&response, k);
    let mut claims: Vec<(usize, Vec<usize>)> = response_claims(&response)
        .into_iter()
        .map(|(s, d)| (s, d.to_vec()))
        .collect();
    if claims.is_empty() && k.is_some() {
        let slot = response
            .iter()
            .copied()
            .find(|&t| is_slot(t))
            .unwrap_or_else(|| slot_token(rng.random_range(0..N_SLOTS as u8)));
        let digits: Vec<usize> = response
            .iter()
            .skip_while(|&&t| !is_digit(t))
            .take_while(|&&t| is_digit(t))
            .take(3)
            .copied()
            .collect();
        let digits = if digits.is_empty() {
            number_tokens(random_value(rng))
        } else {
            digits
        };
        claims.push((slot, digits));
    }
    let mut tokens = prompt.clone();
    let n_out = if claims.is_empty() {
        0
    } else {
        claims.len().max(k.unwrap_or(0))
    };
    for i in 0..n_out {
        let (s, d) = &claims[i % claims.len()];
        tokens.extend([Q, *s, A]);
        tokens.extend(d);
        tokens.push(SEP);
    }
    tokens.push(EOS);
    Demo {
        prompt_len: prompt.len(),
        tokens,
    }
}

pub fn checker_demo(task: &ToyTask, cfg: &BaseConfig, rng: &mut impl Rng) -> Demo {
    let claims = solver_claims(task, cfg, rng);
    // the question list as a Proposer under a minimum-count constraint
    // would write it: the claims, cycled up to `k`
    let k = if rng.random_bool(0.5) {
        0
    } else {
        rng.random_range(1..=cfg.max_min_questions)
    };
    let slots: Vec<u8> = (0..claims.len().max(k))
        .map(|i| claims[i % claims.len()].0)
        .collect();
    let prompt = ToyDialect::checker_tokens(
        &slots.iter().map(|&s| Some(s)).collect::<Vec<_>>(),
        &task.serialized_docs(),
    );
    let mut tokens = prompt.clone();
    for &s in &slots {
        tokens.push(A);
        let grounded = rng.random_bool(cfg.checker_grounding);
        match (task.facts.get(&s), grounded) {
            (Some(&v), true) => tokens.extend(number_tokens(v)),
            (None, true) => tokens.push(NUL),
            (_, false) => tokens.extend(number_tokens(random_value(rng))),
        }
        tokens.push(SEP);
    }
    tokens.push(EOS);
    Demo {
        prompt_len: prompt.len(),
        tokens,
    }
}

/// One batch: `cfg.batch` demonstrations of each role.
pub fn demo_batch(cfg: &BaseConfig, step: usize) -> Vec<Demo> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, &[step as u64, 0xba5e]));
    let mut out = Vec::with_capacity(3 * cfg.batch);
    for _ in 0..cfg.batch {
        let task = sample_task(rng.random(), cfg.difficulty);
        out.push(solver_demo(&task, cfg, &mut rng));
        out.push(proposer_demo(&task, cfg, &mut rng));
        out.push(checker_demo(&task, cfg, &mut rng));
    }
    out
}

/// Mean per-token negative log-likelihood and its gradient.
pub fn nll_grad(policy: &ToyPolicy, demos: &[Demo], temperature: f64) -> (f64, Vec<f64>) {
    let n_tokens: usize = demos.iter().map(|d| d.tokens.len() - d.prompt_len).sum();
    let w = -1.0 / n_tokens as f64;
    let parts: Vec<(f64, Vec<f64>)> = demos
        .par_chunks(4)
        .map(|chunk| {
            let mut g = vec![0.0; policy.n_params()];
            let mut loss = 0.0;
            for d in chunk {
                let f = policy
                    .forward(&d.tokens, d.prompt_len, temperature)
                    .expect("demonstrations are well formed");
                loss += w * f.logprobs.iter().sum::<f64>();
                let n = f.logprobs.len();
                policy.backward(&d.tokens, d.prompt_len, temperature, &f, &vec![w; n], &vec![0.0; n], &mut g);
            }
            (loss, g)
        })
        .collect();
    let mut grad = vec![0.0; policy.n_params()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss, grad)
}

/// Fits a fresh policy to the demonstrations. The value head is left at
/// its initialisation. Deterministic in `cfg`.
pub fn warm_start(cfg: &BaseConfig) -> ToyPolicy {
    let mut policy = ToyPolicy::new(cfg.policy, mix(cfg.seed, &[0x1417]));
    let layout = policy.layout();
    let mut adam = Adam::new(policy.n_params());
    let groups = [ParamGroup {
        range: 0..layout.critic,
        lr: cfg.lr,
        warmup_steps: 0,
    }];
    for step in 0..cfg.steps {
        let demos = demo_batch(cfg, step);
        let (loss, grad) = nll_grad(&policy, &demos, cfg.temperature);
        adam.step(policy.params_mut(), &grad, &groups);
        if step % 100 == 0 {
            log::debug!("warm start step {step}: nll {loss:.4}");
        }
    }
    policy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::grammar::{parse_micro_answers, parse_micro_claims};
    use std::collections::BTreeMap;

    #[test]
    fn demos_follow_the_grammars() {
        let cfg = BaseConfig::default();
        let task = ToyTask::new(BTreeMap::from([(3, 42)]), vec![], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = proposer_demo(&task, &cfg, &mut rng);
            let parsed = parse_micro_claims(&p.tokens[p.prompt_len..]);
            assert_eq!(parsed.malformed, 0);
            let k = p.tokens[1..p.prompt_len].iter().take_while(|&&t| t == Q).count();
            assert!(parsed.claims.len() >= k);

            let c = checker_demo(&task, &cfg, &mut rng);
            let n_q = c.tokens[..c.prompt_len].iter().filter(|&&t| t == Q).count();
            let answers = parse_micro_answers(&c.tokens[c.prompt_len..], n_q);
            assert!(answers.missing.is_empty());

            let s = solver_demo(&task, &cfg, &mut rng);
            assert_eq!(s.tokens[s.prompt_len], slot_token(3));
            assert_eq!(*s.tokens.last().unwrap(), EOS);
        }
    }

    #[test]
    fn constrained_proposer_invents_claims_for_vague_responses() {
        let cfg = BaseConfig {
            degenerate_response_prob: 1.0,
            ..Default::default()
        };
        let task = ToyTask::new(BTreeMap::from([(3, 42)]), vec![], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut with_k, mut without) = (0, 0);
        for _ in 0..300 {
            let p = proposer_demo(&task, &cfg, &mut rng);
            let k = p.tokens[1..p.prompt_len].iter().take_while(|&&t| t == Q).count();
            let response = &p.tokens[k + 2..p.prompt_len];
            let n = parse_micro_claims(&p.tokens[p.prompt_len..]).claims.len();
            if response_claims(response).is_empty() {
                if k > 0 {
                    assert!(n >= k);
                    with_k += 1;
                } else {
                    assert_eq!(n, 0);
                    without += 1;
                }
            }
        }
        assert!(with_k > 20 && without > 20);
    }

    #[test]
    fn response_claim_scan() {
        let t = |s: &str| crate::toyworld::vocab::tokenize(s).unwrap();
        let r = t("s3 4 2 <SEP> s5 <SEP> 7 <SEP> s1 9 <SEP>");
        let c = response_claims(&r);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0], (slot_token(3), &[4usize, 2][..]));
        assert_eq!(c[1], (slot_token(1), &[9usize][..]));
    }

    #[test]
    fn batches_are_deterministic() {
        let cfg = BaseConfig::default();
        assert_eq!(demo_batch(&cfg, 3), demo_batch(&cfg, 3));
        assert_ne!(demo_batch(&cfg, 3), demo_batch(&cfg, 4));
    }

    #[test]
    fn short_fit_reduces_nll() {
        let cfg = BaseConfig {
            steps: 40,
            batch: 4,
            policy: PolicyConfig {
                embed_dim: 4,
                hidden: 8,
                critic_hidden: 2,
                max_context: 256,
            },
            ..Default::default()
        };
        let probe = demo_batch(&cfg, 10_000);
        let before = nll_grad(&ToyPolicy::new(cfg.policy, mix(cfg.seed, &[0x1417])), &probe, 0.6).0;
        let after = nll_grad(&warm_start(&cfg), &probe, 0.6).0;
        assert!(after < before, "{after} !< {before}");
    }
}
