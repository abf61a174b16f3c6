//! Consistency-rate evaluation: `n` generations per query, one judge verdict
//! per generation, strict-majority final verdict per sample.
//!
//! An even split (e.g. 4 of 8) counts as inconsistent.

use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::datamodel::RagSample;
use crate::llmgateway::{Backend, GatewayError, SamplingConfig};
use crate::pipeline::Dialect;
use crate::prompting::{Role, TemplateSet};
use crate::reward::MatchPolicy;
use crate::seeds::mix_str;
use crate::textparse::{canonicalize_number, numbers_match, NumericAnswer};
use crate::toyworld::vocab::{self, is_digit, slot_of, tokenize};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("n must be >= 1")]
    ZeroGenerations,
    #[error("subject backend: {0}")]
    Subject(GatewayError),
    #[error("judge backend: {0}")]
    Judge(GatewayError),
    #[error("prompt: {0}")]
    Prompt(String),
    #[error("subject returned {got} generations, expected {expected}")]
    ShortReply { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub sample_id: String,
    pub per_generation: Vec<bool>,
    #[serde(rename = "final")]
    pub final_verdict: bool,
    pub n_generations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub sample_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Fraction of evaluated samples whose final verdict is consistent; 0
    /// when nothing was evaluated.
    pub consistency_rate: f64,
    pub n_samples: usize,
    pub n_failed: usize,
    pub per_sample: Vec<JudgeVerdict>,
    pub failures: Vec<SampleFailure>,
    pub config: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Generations per query.
    pub n: usize,
    /// Evaluate only the first `first` samples.
    #[serde(default)]
    pub first: Option<usize>,
    pub sampling: SamplingConfig,
    pub judge_sampling: SamplingConfig,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n: 8,
            first: None,
            sampling: SamplingConfig::for_role(Role::Solver),
            judge_sampling: SamplingConfig {
                temperature: 0.0,
                ..SamplingConfig::for_role(Role::Judge)
            },
            seed: None,
        }
    }
}

/// Strict majority; ties are inconsistent.
pub fn majority_verdict(votes: &[bool]) -> bool {
    2 * votes.iter().filter(|&&v| v).count() > votes.len()
}

pub trait Judge: Send + Sync {
    fn name(&self) -> &str;
    fn judge(&self, sample: &RagSample, response: &str) -> Result<bool, EvalError>;
}

/// Parses `[Verdict: CONSISTENT]` / `[Verdict: INCONSISTENT]`; the last
/// occurrence wins. `None` when absent.
pub fn parse_verdict(text: &str) -> Option<bool> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"(?i)\[\s*Verdict\s*:\s*(CONSISTENT|INCONSISTENT)\s*\]").expect("static regex")
    });
    re.captures_iter(text)
        .last()
        .map(|c| c[1].eq_ignore_ascii_case("consistent"))
}

/// A judge model behind any backend, prompted with the judge template.
pub struct LlmJudge<'a> {
    pub backend: &'a dyn Backend,
    pub templates: &'a TemplateSet,
    pub sampling: SamplingConfig,
}

impl Judge for LlmJudge<'_> {
    fn name(&self) -> &str {
        self.backend.name()
    }

    fn judge(&self, sample: &RagSample, response: &str) -> Result<bool, EvalError> {
        let prompt = self
            .templates
            .render_judge_prompt(response, &sample.documents, sample.gold_answer.as_deref());
        let out = self
            .backend
            .generate(&prompt, &self.sampling.with_samples(1))
            .map_err(EvalError::Judge)?;
        let text = out.first().map(|g| g.text.as_str()).unwrap_or("");
        Ok(parse_verdict(text).unwrap_or_else(|| {
            log::warn!("sample {}: judge output has no verdict token; counting as inconsistent", sample.id);
            false
        }))
    }
}

/// Offline judge: compares asserted numbers with the sample's gold answer.
///
/// For toy responses (`slot digits <SEP> ...`) the response is consistent
/// when it makes at least one claim about the queried slot and every such
/// claim carries the gold value. For text, it is consistent when any number
/// in the response matches the gold answer. Samples without a gold answer
/// are inconsistent.
#[derive(Debug, Clone, Copy, Default)]
pub struct GoldMatchJudge {
    pub policy: MatchPolicy,
}

fn text_numbers(text: &str) -> Vec<NumericAnswer> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"[+-]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?").expect("static regex")
    });
    re.find_iter(text)
        .filter_map(|m| canonicalize_number(m.as_str()).ok())
        .collect()
}

/// `(slot, digits)` claims of a toy Solver response.
fn toy_claims(tokens: &[usize]) -> Vec<(u8, String)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if let Some(slot) = slot_of(tokens[i]) {
            let digits: String = tokens[i + 1..]
                .iter()
                .take_while(|&&t| is_digit(t))
                .map(|&t| char::from(b'0' + t as u8))
                .collect();
            i += 1 + digits.len();
            if !digits.is_empty() {
                out.push((slot, digits));
            }
        } else {
            i += 1;
        }
    }
    out
}

impl Judge for GoldMatchJudge {
    fn name(&self) -> &str {
        "gold-match"
    }

    fn judge(&self, sample: &RagSample, response: &str) -> Result<bool, EvalError> {
        let Some(gold) = sample
            .gold_answer
            .as_deref()
            .and_then(|g| canonicalize_number(g).ok())
        else {
            return Ok(false);
        };
        let toy_query = tokenize(&sample.query).ok().and_then(|q| match q.as_slice() {
            [vocab::Q, s] => slot_of(*s),
            _ => None,
        });
        if let (Some(slot), Ok(tokens)) = (toy_query, tokenize(response)) {
            let about: Vec<String> = toy_claims(&tokens)
                .into_iter()
                .filter(|(s, _)| *s == slot)
                .map(|(_, d)| d)
                .collect();
            return Ok(!about.is_empty()
                && about.iter().all(|d| {
                    canonicalize_number(d).is_ok_and(|n| numbers_match(&n, &gold, self.policy))
                }));
        }
        Ok(text_numbers(response)
            .iter()
            .any(|n| numbers_match(n, &gold, self.policy)))
    }
}

pub fn judge_one(sample: &RagSample, generation: &str, judge: &dyn Judge) -> Result<bool, EvalError> {
    judge.judge(sample, generation)
}

fn evaluate_sample(
    sample: &RagSample,
    subject: &dyn Backend,
    dialect: &dyn Dialect,
    judge: &dyn Judge,
    cfg: &EvalConfig,
) -> Result<JudgeVerdict, EvalError> {
    let prompt = dialect
        .solver_prompt(sample)
        .map_err(|e| EvalError::Prompt(e.to_string()))?;
    let sampling = cfg
        .sampling
        .with_samples(cfg.n)
        .with_seed(cfg.seed.map(|s| mix_str(s, &sample.id)).or(cfg.sampling.seed));
    let gens = subject.generate(&prompt, &sampling).map_err(EvalError::Subject)?;
    if gens.len() != cfg.n {
        return Err(EvalError::ShortReply {
            got: gens.len(),
            expected: cfg.n,
        });
    }
    let per_generation = gens
        .iter()
        .map(|g| judge.judge(sample, &g.text))
        .collect::<Result<Vec<bool>, _>>()?;
    Ok(JudgeVerdict {
        sample_id: sample.id.clone(),
        final_verdict: majority_verdict(&per_generation),
        n_generations: per_generation.len(),
        per_generation,
    })
}

/// Evaluates samples in parallel; a failing sample is excluded from the
/// rate and listed in `failures`.
pub fn evaluate(
    dataset: &[RagSample],
    subject: &dyn Backend,
    dialect: &dyn Dialect,
    judge: &dyn Judge,
    cfg: &EvalConfig,
    config_snapshot: Value,
) -> Result<EvalReport, EvalError> {
    if cfg.n == 0 {
        return Err(EvalError::ZeroGenerations);
    }
    let take = cfg.first.unwrap_or(dataset.len()).min(dataset.len());
    let results: Vec<Result<JudgeVerdict, EvalError>> = dataset[..take]
        .par_iter()
        .map(|s| evaluate_sample(s, subject, dialect, judge, cfg))
        .collect();
    let mut per_sample = Vec::new();
    let mut failures = Vec::new();
    for (s, r) in dataset[..take].iter().zip(results) {
        match r {
            Ok(v) => per_sample.push(v),
            Err(e) => {
                log::warn!("sample {} excluded: {e}", s.id);
                failures.push(SampleFailure {
                    sample_id: s.id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    let n_samples = per_sample.len();
    let consistent = per_sample.iter().filter(|v| v.final_verdict).count();
    Ok(EvalReport {
        consistency_rate: if n_samples == 0 {
            0.0
        } else {
            consistent as f64 / n_samples as f64
        },
        n_samples,
        n_failed: failures.len(),
        per_sample,
        failures,
        config: config_snapshot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Document;
    use crate::llmgateway::ScriptedBackend;
    use crate::pipeline::TextDialect;

    fn sample(id: &str, gold: Option<&str>) -> RagSample {
        let mut s = RagSample::new(id, "How many?", vec![Document::new("There were 12 cats.")]);
        s.gold_answer = gold.map(String::from);
        s
    }

    #[test]
    fn majority_and_ties() {
        assert!(majority_verdict(&[true; 8]));
        assert!(!majority_verdict(&[true, false, true, false, true, false, true, false]));
        assert!(majority_verdict(&[true, true, false]));
        assert!(!majority_verdict(&[]));
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict("ok [Verdict: CONSISTENT]"), Some(true));
        assert_eq!(parse_verdict("[verdict: inconsistent]"), Some(false));
        assert_eq!(parse_verdict("[Verdict: CONSISTENT] then [Verdict: INCONSISTENT]"), Some(false));
        assert_eq!(parse_verdict("CONSISTENT"), None);
    }

    #[test]
    fn llm_judge_paths() {
        let templates = TemplateSet::builtin();
        let mut b = ScriptedBackend::new();
        b.insert_role(Role::Judge, vec!["[Verdict: CONSISTENT]".into()]);
        let j = LlmJudge {
            backend: &b,
            templates: &templates,
            sampling: SamplingConfig::default(),
        };
        assert!(judge_one(&sample("a", None), "whatever", &j).unwrap());
        let mut b = ScriptedBackend::new();
        b.insert_role(Role::Judge, vec!["Looks fine to me.".into()]);
        let j = LlmJudge {
            backend: &b,
            templates: &templates,
            sampling: SamplingConfig::default(),
        };
        assert!(!judge_one(&sample("a", None), "whatever", &j).unwrap());
    }

    #[test]
    fn gold_match_judge() {
        let j = GoldMatchJudge::default();
        assert!(j.judge(&sample("a", Some("12")), "There were 12 cats.").unwrap());
        assert!(!j.judge(&sample("a", Some("12")), "There were 13 cats.").unwrap());
        assert!(!j.judge(&sample("a", None), "12").unwrap());
        let toy = crate::toyworld::ToyTask::new([(3, 42)].into(), vec![], 3).to_rag_sample("t");
        assert!(j.judge(&toy, "s3 4 2 <SEP> <EOS>").unwrap());
        assert!(j.judge(&toy, "s3 4 2 <SEP> s5 1 <SEP> <EOS>").unwrap());
        assert!(!j.judge(&toy, "s3 4 1 <SEP> <EOS>").unwrap());
        assert!(!j.judge(&toy, "s3 4 2 <SEP> s3 7 <SEP> <EOS>").unwrap());
        assert!(!j.judge(&toy, "s5 4 2 <SEP> <EOS>").unwrap());
    }

    #[test]
    fn failures_are_excluded_and_counted() {
        let mut subject = ScriptedBackend::new();
        let dialect = TextDialect::new(TemplateSet::builtin());
        let good = sample("good", Some("12"));
        subject.insert_prompt(&dialect.solver_prompt(&good).unwrap(), "12 cats");
        let mut bad = sample("bad", Some("12"));
        bad.query = "Other?".into();
        let cfg = EvalConfig::default();
        let r = evaluate(&[good, bad], &subject, &dialect, &GoldMatchJudge::default(), &cfg, Value::Null).unwrap();
        assert_eq!((r.n_samples, r.n_failed), (1, 1));
        assert_eq!(r.consistency_rate, 1.0);
        assert_eq!(r.per_sample[0].per_generation, vec![true; 8]);
        assert_eq!(r.failures[0].sample_id, "bad");
    }
}
