//! n-sample generation, per-generation judging and majority voting against
//! scripted subjects and judges.

use march_core::datamodel::{Document, RagSample};
use march_core::evalharness::{evaluate, EvalConfig, GoldMatchJudge, LlmJudge};
use march_core::llmgateway::{fingerprint, ScriptedBackend};
use march_core::pipeline::{Dialect, TextDialect};
use march_core::prompting::{Role, TemplateSet};
use serde_json::Value;

fn sample(i: usize) -> RagSample {
    let mut s = RagSample::new(format!("q{i}"), format!("How many boats in harbour {i}?"), vec![Document::new(format!("Harbour {i} holds {} boats.", 10 + i))]);
    s.gold_answer = Some((10 + i).to_string());
    s
}

/// Subject gives every sample `n` distinct responses; the judge marks the
/// first `trues[i]` of them consistent.
fn scripted(samples: &[RagSample], trues: &[usize], n: usize) -> (ScriptedBackend, ScriptedBackend) {
    let templates = TemplateSet::builtin();
    let dialect = TextDialect::new(templates.clone());
    let mut subject = ScriptedBackend::new();
    let mut judge = ScriptedBackend::new();
    for (s, &t) in samples.iter().zip(trues) {
        let responses: Vec<String> = (0..n).map(|j| format!("Answer {j} for {}", s.id)).collect();
        subject.insert(fingerprint(&dialect.solver_prompt(s).unwrap()), responses.clone());
        for (j, r) in responses.iter().enumerate() {
            let verdict = if j < t { "CONSISTENT" } else { "INCONSISTENT" };
            let p = templates.render_judge_prompt(r, &s.documents, s.gold_answer.as_deref());
            judge.insert(fingerprint(&p), vec![format!("Reasoning.\n[Verdict: {verdict}]")]);
        }
    }
    (subject, judge)
}

fn run(samples: &[RagSample], subject: &ScriptedBackend, judge: &ScriptedBackend, cfg: &EvalConfig) -> march_core::EvalReport {
    let templates = TemplateSet::builtin();
    let dialect = TextDialect::new(templates.clone());
    let j = LlmJudge {
        backend: judge,
        templates: &templates,
        sampling: cfg.judge_sampling,
    };
    evaluate(samples, subject, &dialect, &j, cfg, Value::Null).unwrap()
}

#[test]
fn known_verdict_patterns_with_a_tie() {
    let samples: Vec<RagSample> = (0..10).map(sample).collect();
    let trues = [8, 7, 5, 4, 3, 0, 6, 1, 8, 2];
    let (subject, judge) = scripted(&samples, &trues, 8);
    let report = run(&samples, &subject, &judge, &EvalConfig::default());
    assert_eq!(report.n_samples, 10);
    assert_eq!(report.consistency_rate, 0.5);
    let finals: Vec<bool> = report.per_sample.iter().map(|v| v.final_verdict).collect();
    assert_eq!(finals, [true, true, true, false, false, false, true, false, true, false]);
    let tie = &report.per_sample[3];
    assert_eq!(tie.per_generation.iter().filter(|&&v| v).count(), 4);
    assert!(!tie.final_verdict);
    assert!(report.per_sample.iter().all(|v| v.n_generations == 8 && v.per_generation.len() == 8));
}

#[test]
fn unanimous_samples_rate_one() {
    let samples: Vec<RagSample> = (0..4).map(sample).collect();
    let (subject, judge) = scripted(&samples, &[8; 4], 8);
    assert_eq!(run(&samples, &subject, &judge, &EvalConfig::default()).consistency_rate, 1.0);
}

#[test]
fn rate_is_invariant_to_sample_order() {
    let samples: Vec<RagSample> = (0..7).map(sample).collect();
    let trues = [8, 1, 5, 4, 6, 0, 7];
    let (subject, judge) = scripted(&samples, &trues, 8);
    let forward = run(&samples, &subject, &judge, &EvalConfig::default());
    let reversed: Vec<RagSample> = samples.iter().rev().cloned().collect();
    let backward = run(&reversed, &subject, &judge, &EvalConfig::default());
    assert_eq!(forward.consistency_rate, backward.consistency_rate);
}

#[test]
fn deterministic_subject_gives_the_same_verdicts_for_n_1_and_8() {
    let samples: Vec<RagSample> = (0..6).map(sample).collect();
    let mut subject = ScriptedBackend::new();
    subject.insert_role(Role::Solver, vec!["There are 12 boats.".into()]);
    let dialect = TextDialect::new(TemplateSet::builtin());
    let judge = GoldMatchJudge::default();
    let one = EvalConfig {
        n: 1,
        ..EvalConfig::default()
    };
    let a = evaluate(&samples, &subject, &dialect, &judge, &one, Value::Null).unwrap();
    let b = evaluate(&samples, &subject, &dialect, &judge, &EvalConfig::default(), Value::Null).unwrap();
    assert_eq!(a.consistency_rate, b.consistency_rate);
    let finals = |r: &march_core::EvalReport| r.per_sample.iter().map(|v| v.final_verdict).collect::<Vec<_>>();
    assert_eq!(finals(&a), finals(&b));
    // only the sample whose gold answer is 12 is consistent
    assert_eq!(a.consistency_rate, 1.0 / 6.0);
}

#[test]
fn first_subset_limits_the_sample_count() {
    let samples: Vec<RagSample> = (0..600).map(sample).collect();
    let mut subject = ScriptedBackend::new();
    subject.insert_role(Role::Solver, vec!["No idea.".into()]);
    let dialect = TextDialect::new(TemplateSet::builtin());
    let cfg = EvalConfig {
        first: Some(500),
        ..EvalConfig::default()
    };
    let r = evaluate(&samples, &subject, &dialect, &GoldMatchJudge::default(), &cfg, Value::Null).unwrap();
    assert_eq!(r.n_samples, 500);
    assert_eq!(r.per_sample.last().unwrap().sample_id, "q499");
}

#[test]
fn missing_verdict_token_counts_as_inconsistent() {
    let samples = vec![sample(0)];
    let mut subject = ScriptedBackend::new();
    subject.insert_role(Role::Solver, vec!["There are 10 boats.".into()]);
    let mut judge = ScriptedBackend::new();
    judge.insert_role(Role::Judge, vec!["Looks fine to me.".into()]);
    let r = run(&samples, &subject, &judge, &EvalConfig::default());
    assert_eq!(r.consistency_rate, 0.0);
    assert!(r.per_sample[0].per_generation.iter().all(|&v| !v));
}
