//! Benchmark fixtures.

use march_core::prompting::Role;
use march_core::textparse::{canonicalize_number, format_proposed_qa, ClaimQA};
use march_core::toyworld::{sample_task, Difficulty, PolicyConfig, ToyDialect, ToyPolicy, ToySampling};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A policy and one sampled sequence per role.
pub struct PolicyFixture {
    pub policy: ToyPolicy,
    pub sequences: Vec<(Role, Vec<usize>, usize)>,
}

pub fn policy_fixture(config: PolicyConfig, seed: u64) -> PolicyFixture {
    let policy = ToyPolicy::new(config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampling = ToySampling {
        temperature: 1.0,
        top_p: 1.0,
        top_k: 0,
        max_tokens: 40,
    };
    let task = sample_task(seed, Difficulty::MICRO);
    let prompts = [
        (Role::Solver, ToyDialect::solver_tokens(&task.to_rag_sample("b")).expect("solver prompt")),
        (Role::Checker, ToyDialect::checker_tokens(&[Some(task.query_slot)], &task.serialized_docs())),
    ];
    let sequences = prompts
        .into_iter()
        .map(|(role, prompt)| {
            let g = policy.generate(&prompt, &sampling, &mut rng).expect("generate");
            let prompt_len = prompt.len();
            let mut tokens = prompt;
            tokens.extend(g.tokens);
            (role, tokens, prompt_len)
        })
        .collect();
    PolicyFixture { policy, sequences }
}

/// Proposer output with `n` well-formed claims.
pub fn proposer_text(n: usize) -> String {
    let claims: Vec<ClaimQA> = (0..n)
        .map(|i| {
            let q = format!("What share of households in district {i} had broadband access in 2019?");
            ClaimQA::new(q, canonicalize_number(&format!("{}.{}", 40 + i, i % 10)).expect("number"))
        })
        .collect();
    format_proposed_qa(&claims)
}

/// Checker output answering `n` questions, every third one unanswerable.
pub fn checker_text(n: usize) -> String {
    (1..=n)
        .map(|i| {
            let answer = if i % 3 == 0 { "Cannot answer".to_string() } else { format!("{}", 40 + i) };
            format!("{i}. Evidence: Document {i} gives the figure for the district.\n[Answer: {answer}]\n")
        })
        .collect()
}
