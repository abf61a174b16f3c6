//! Extraction of claims from Proposer output and of re-checked answers from
//! Checker output, plus numeric canonicalization and answer matching.
//!
//! Proposer grammar, one entry per claim (the answer may sit on a later line):
//!
//! ```text
//! - Question: <question> [Answer: <number>]
//! ```
//!
//! Checker grammar, one numbered entry per question:
//!
//! ```text
//! <i>. Evidence: <text>
//! [Answer: <number> | Cannot answer]
//! ```
//!
//! The checker answer marker may also appear without brackets as a line
//! starting with `Answer:`.

use std::cmp::Ordering;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::MatchPolicy;

/// An exact decimal kept in normalized text form: no leading zeros in the
/// integer part, no trailing zeros in the fraction, no `-0`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Decimal(String);

impl Decimal {
    fn from_parts(negative: bool, int_digits: &str, frac_digits: &str) -> Decimal {
        let int = int_digits.trim_start_matches('0');
        let frac = frac_digits.trim_end_matches('0');
        let int = if int.is_empty() { "0" } else { int };
        let zero = int == "0" && frac.is_empty();
        let mut s = String::new();
        if negative && !zero {
            s.push('-');
        }
        s.push_str(int);
        if !frac.is_empty() {
            s.push('.');
            s.push_str(frac);
        }
        Decimal(s)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn to_f64(&self) -> f64 {
        self.0.parse().expect("normalized decimal parses")
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Equality compares the canonical form only; `raw` keeps the source text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NumericAnswer {
    pub canonical: Decimal,
    pub raw: String,
}

impl PartialEq for NumericAnswer {
    fn eq(&self, other: &Self) -> bool {
        self.canonical == other.canonical
    }
}

impl Eq for NumericAnswer {}

impl NumericAnswer {
    pub fn value(&self) -> f64 {
        self.canonical.to_f64()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RejectReason {
    Suffix,
    Range,
    Percent,
    Words,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("not a pure number ({reason:?}): {raw:?}")]
pub struct NumberRejected {
    pub reason: RejectReason,
    pub raw: String,
}

fn regex(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("valid pattern"))
}

pub fn canonicalize_number(raw: &str) -> Result<NumericAnswer, NumberRejected> {
    static NUMBER: OnceLock<Regex> = OnceLock::new();
    static RANGE: OnceLock<Regex> = OnceLock::new();
    static SUFFIX: OnceLock<Regex> = OnceLock::new();

    let reject = |reason| NumberRejected {
        reason,
        raw: raw.to_string(),
    };
    let s = raw.trim();
    let number = regex(
        &NUMBER,
        r"^([+-])?(?:(\d{1,3}(?:,\d{3})+)|(\d*))(?:\.(\d*))?$",
    );
    if let Some(c) = number.captures(s) {
        let int = c
            .get(2)
            .or_else(|| c.get(3))
            .map_or("", |m| m.as_str())
            .replace(',', "");
        let frac = c.get(4).map_or("", |m| m.as_str());
        if !int.is_empty() || !frac.is_empty() {
            let negative = c.get(1).is_some_and(|m| m.as_str() == "-");
            return Ok(NumericAnswer {
                canonical: Decimal::from_parts(negative, &int, frac),
                raw: s.to_string(),
            });
        }
        return Err(reject(RejectReason::Malformed));
    }
    if s.contains('%') {
        return Err(reject(RejectReason::Percent));
    }
    let range = regex(
        &RANGE,
        r"^[+-]?[\d.,]+\s*(?:-|–|—|~|to)\s*[+-]?[\d.,]+\s*\S*$",
    );
    if range.is_match(s) {
        return Err(reject(RejectReason::Range));
    }
    let suffix = regex(&SUFFIX, r"^[$€£]?[+-]?[\d.,]+\s*[^\d\s.,]+.*$");
    if suffix.is_match(s) {
        return Err(reject(RejectReason::Suffix));
    }
    if !s.is_empty() && s.chars().all(|c| c.is_alphabetic() || c.is_whitespace() || c == '-') {
        return Err(reject(RejectReason::Words));
    }
    Err(reject(RejectReason::Malformed))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimQA {
    pub question: String,
    pub asserted_answer: NumericAnswer,
    /// Byte offsets of the entry in the Proposer output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_span: Option<(usize, usize)>,
}

impl ClaimQA {
    pub fn new(question: impl Into<String>, answer: NumericAnswer) -> ClaimQA {
        ClaimQA {
            question: question.into(),
            asserted_answer: answer,
            source_span: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposedQa {
    pub claims: Vec<ClaimQA>,
    pub malformed: usize,
}

/// Formats claims in the Proposer grammar, one per line.
pub fn format_proposed_qa(claims: &[ClaimQA]) -> String {
    claims
        .iter()
        .map(|c| format!("- Question: {} [Answer: {}]", c.question, c.asserted_answer.canonical))
        .collect::<Vec<_>>()
        .join("\n")
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Byte offset of each line start whose trimmed text begins with `- Question:`.
fn question_starts(text: &str) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let lead = line.len() - line.trim_start().len();
        if line[lead..].starts_with("- Question:") {
            starts.push(offset + lead);
        }
        offset += line.len();
    }
    starts
}

pub fn parse_proposed_qa(output: &str) -> ProposedQa {
    static ANSWER: OnceLock<Regex> = OnceLock::new();
    let answer_re = regex(&ANSWER, r"\[Answer:([^\]\n]*)\]");

    let starts = question_starts(output);
    let mut result = ProposedQa::default();

    let leading = &output[..starts.first().copied().unwrap_or(output.len())];
    result.malformed += leading.lines().filter(|l| !l.trim().is_empty()).count();

    for (i, &start) in starts.iter().enumerate() {
        let end = starts.get(i + 1).copied().unwrap_or(output.len());
        let entry = &output[start..end];
        let body = &entry["- Question:".len()..];
        let Some(m) = answer_re.captures(body) else {
            result.malformed += 1;
            continue;
        };
        let whole = m.get(0).expect("group 0");
        let question = collapse_whitespace(&body[..whole.start()]);
        let trailing = &body[whole.end()..];
        let parsed = canonicalize_number(&m[1]);
        match parsed {
            Ok(answer) if !question.is_empty() => {
                let span_end = start + "- Question:".len() + whole.end();
                result.claims.push(ClaimQA {
                    question,
                    asserted_answer: answer,
                    source_span: Some((start, span_end)),
                });
            }
            _ => result.malformed += 1,
        }
        if !trailing.trim().is_empty() {
            result.malformed += 1;
        }
    }
    result
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Verdict {
    Number(NumericAnswer),
    CannotAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckedAnswer {
    /// 1-based question index.
    pub index: usize,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckerParse {
    /// Sorted by index, at most one per index.
    pub answers: Vec<CheckedAnswer>,
    /// Indices in `1..=n` with no usable answer.
    pub missing: Vec<usize>,
}

impl CheckerParse {
    pub fn get(&self, index: usize) -> Option<&CheckedAnswer> {
        self.answers
            .binary_search_by_key(&index, |a| a.index)
            .ok()
            .map(|i| &self.answers[i])
    }

    pub fn from_answers(mut answers: Vec<CheckedAnswer>, n_questions: usize) -> CheckerParse {
        answers.retain(|a| (1..=n_questions).contains(&a.index));
        answers.sort_by_key(|a| a.index);
        answers.dedup_by_key(|a| a.index);
        let missing = (1..=n_questions)
            .filter(|i| answers.binary_search_by_key(i, |a| a.index).is_err())
            .collect();
        CheckerParse { answers, missing }
    }
}

fn parse_verdict(raw: &str) -> Option<Verdict> {
    if raw.trim().eq_ignore_ascii_case("cannot answer") {
        return Some(Verdict::CannotAnswer);
    }
    canonicalize_number(raw).ok().map(Verdict::Number)
}

/// Entries with an index outside `1..=n_questions` are dropped; the first
/// entry for an index wins.
pub fn parse_checker_answers(output: &str, n_questions: usize) -> CheckerParse {
    static ENTRY: OnceLock<Regex> = OnceLock::new();
    static BRACKETED: OnceLock<Regex> = OnceLock::new();
    static BARE: OnceLock<Regex> = OnceLock::new();
    let entry_re = regex(&ENTRY, r"(?m)^[ \t]*(\d+)[.)][ \t]*");
    let bracketed = regex(&BRACKETED, r"\[Answer:([^\]\n]*)\]");
    let bare = regex(&BARE, r"(?m)^[ \t]*Answer:[ \t]*(.*?)[ \t]*$");

    let heads: Vec<_> = entry_re.captures_iter(output).collect();
    let mut answers = Vec::new();
    for (i, head) in heads.iter().enumerate() {
        let whole = head.get(0).expect("group 0");
        let Ok(index) = head[1].parse::<usize>() else {
            continue;
        };
        let end = heads
            .get(i + 1)
            .map_or(output.len(), |h| h.get(0).expect("group 0").start());
        let body = &output[whole.end()..end];

        let marker = bracketed
            .captures_iter(body)
            .last()
            .or_else(|| bare.captures_iter(body).last());
        let Some(marker) = marker else { continue };
        let Some(verdict) = parse_verdict(&marker[1]) else {
            continue;
        };
        let before = &body[..marker.get(0).expect("group 0").start()];
        let evidence = before
            .trim_start()
            .strip_prefix("Evidence:")
            .map(collapse_whitespace)
            .filter(|e| !e.is_empty());
        answers.push(CheckedAnswer {
            index,
            verdict,
            evidence,
        });
    }
    CheckerParse::from_answers(answers, n_questions)
}

/// Numeric agreement between two canonical decimals under `policy`.
pub fn numbers_match(a: &NumericAnswer, b: &NumericAnswer, policy: MatchPolicy) -> bool {
    match policy {
        MatchPolicy::Exact => a.canonical == b.canonical,
        MatchPolicy::RelativeTol(eps) => {
            let (x, y) = (a.value(), b.value());
            let scale = x.abs().max(y.abs()).max(1.0);
            matches!(
                ((x - y).abs() / scale).partial_cmp(&eps),
                Some(Ordering::Less | Ordering::Equal)
            )
        }
    }
}

/// `CannotAnswer` never matches.
pub fn answers_match(a: &NumericAnswer, b: &CheckedAnswer, policy: MatchPolicy) -> bool {
    match &b.verdict {
        Verdict::Number(n) => numbers_match(a, n, policy),
        Verdict::CannotAnswer => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn num(s: &str) -> NumericAnswer {
        canonicalize_number(s).unwrap()
    }

    fn reason(s: &str) -> RejectReason {
        canonicalize_number(s).unwrap_err().reason
    }

    #[test]
    fn canonical_forms() {
        assert_eq!(num("50").canonical.as_str(), "50");
        assert_eq!(num("50.0").canonical, num("50").canonical);
        assert_eq!(num(" 1,234,567.50 ").canonical.as_str(), "1234567.5");
        assert_eq!(num("-0.0").canonical.as_str(), "0");
        assert_eq!(num(".5").canonical.as_str(), "0.5");
        assert_eq!(num("007").canonical.as_str(), "7");
        assert_eq!(num("+3.").canonical.as_str(), "3");
        assert_eq!(num("-12.30").canonical.as_str(), "-12.3");
        assert_eq!(num("50").raw, "50");
    }

    #[test]
    fn rejections_by_category() {
        assert_eq!(reason("10-20"), RejectReason::Range);
        assert_eq!(reason("52–59"), RejectReason::Range);
        assert_eq!(reason("10 to 20"), RejectReason::Range);
        assert_eq!(reason("50%"), RejectReason::Percent);
        assert_eq!(reason("10k"), RejectReason::Suffix);
        assert_eq!(reason("5 million"), RejectReason::Suffix);
        assert_eq!(reason("fifty"), RejectReason::Words);
        assert_eq!(reason("Cannot answer"), RejectReason::Words);
        assert_eq!(reason(""), RejectReason::Malformed);
        assert_eq!(reason("1.2.3"), RejectReason::Malformed);
        assert_eq!(reason("1,23"), RejectReason::Malformed);
        assert_eq!(reason("."), RejectReason::Malformed);
    }

    #[test]
    fn worked_proposer_example() {
        let out = "- Question: How many people will take the bar exam in the Beijing area in 2025? [Answer: 50]";
        let p = parse_proposed_qa(out);
        assert_eq!(p.malformed, 0);
        assert_eq!(p.claims.len(), 1);
        assert_eq!(
            p.claims[0].question,
            "How many people will take the bar exam in the Beijing area in 2025?"
        );
        assert_eq!(p.claims[0].asserted_answer.canonical.as_str(), "50");
        assert_eq!(p.claims[0].source_span, Some((0, out.len())));
    }

    #[test]
    fn empty_proposer_output() {
        assert_eq!(parse_proposed_qa(""), ProposedQa::default());
    }

    #[test]
    fn thousands_suffix_is_malformed() {
        let p = parse_proposed_qa("- Question: share? [Answer: 10k]");
        assert!(p.claims.is_empty());
        assert_eq!(p.malformed, 1);
    }

    #[test]
    fn answer_on_following_line() {
        let out = "- Question: What percentage experience RBD?\n\n[Answer: 78]\n\n- Question: next? [Answer: 1]";
        let p = parse_proposed_qa(out);
        assert_eq!(p.malformed, 0);
        assert_eq!(p.claims.len(), 2);
        assert_eq!(p.claims[0].question, "What percentage experience RBD?");
        assert_eq!(p.claims[0].asserted_answer.canonical.as_str(), "78");
    }

    #[test]
    fn stray_lines_counted_but_skipped() {
        let out = "Here you go:\n- Question: a? [Answer: 1]\n- Question: no answer\n- Question: b? [Answer: 2] extra";
        let p = parse_proposed_qa(out);
        assert_eq!(p.claims.len(), 2);
        assert_eq!(p.malformed, 3);
    }

    #[test]
    fn worked_checker_example() {
        let out = "1. Evidence: Document 1 states that 50 people will take the bar exam in Beijing in 2024.\n\
                   [Answer: 50]\n\
                   2. Evidence: The materials do not contain information about the bar exam in Beijing for 2025, therefore I cannot answer.\n\
                   [Answer: Cannot answer]";
        let p = parse_checker_answers(out, 2);
        assert!(p.missing.is_empty());
        assert_eq!(p.answers.len(), 2);
        assert_eq!(p.answers[0].verdict, Verdict::Number(num("50")));
        assert!(p.answers[0].evidence.as_deref().unwrap().starts_with("Document 1 states"));
        assert_eq!(p.answers[1].index, 2);
        assert_eq!(p.answers[1].verdict, Verdict::CannotAnswer);
    }

    #[test]
    fn inline_and_bare_answer_markers() {
        let p = parse_checker_answers("1. Evidence: Document 1 states… [Answer: 50]", 1);
        assert_eq!(p.answers[0].verdict, Verdict::Number(num("50")));
        assert_eq!(p.answers[0].evidence.as_deref(), Some("Document 1 states…"));

        let p = parse_checker_answers("1. Evidence: Document-5 says 52%.\nAnswer: 52\n\n2. Evidence: x\nAnswer: CANNOT ANSWER", 2);
        assert_eq!(p.answers[0].verdict, Verdict::Number(num("52")));
        assert_eq!(p.answers[1].verdict, Verdict::CannotAnswer);
    }

    #[test]
    fn partial_coverage_reports_missing() {
        let p = parse_checker_answers("1. Evidence: e [Answer: 3]", 3);
        assert_eq!(p.answers.len(), 1);
        assert_eq!(p.missing, vec![2, 3]);
        assert!(p.get(2).is_none());
        assert_eq!(p.get(1).unwrap().index, 1);
    }

    #[test]
    fn out_of_range_and_duplicate_indices() {
        let p = parse_checker_answers("0. [Answer: 1]\n3. [Answer: 2]\n1. [Answer: 7]\n1. [Answer: 8]", 2);
        assert_eq!(p.answers.len(), 1);
        assert_eq!(p.answers[0].verdict, Verdict::Number(num("7")));
        assert_eq!(p.missing, vec![2]);
    }

    #[test]
    fn match_policies() {
        let fifty = num("50");
        let checked = |v: Verdict| CheckedAnswer {
            index: 1,
            verdict: v,
            evidence: None,
        };
        assert!(answers_match(&fifty, &checked(Verdict::Number(num("50"))), MatchPolicy::Exact));
        assert!(!answers_match(&fifty, &checked(Verdict::CannotAnswer), MatchPolicy::Exact));
        let near = checked(Verdict::Number(num("50.0001")));
        assert!(!answers_match(&fifty, &near, MatchPolicy::Exact));
        // |50 - 50.0001| / 50.0001 = 2.0e-6 <= 1e-3
        assert!(answers_match(&fifty, &near, MatchPolicy::RelativeTol(1e-3)));
        assert!(!answers_match(&fifty, &checked(Verdict::Number(num("51"))), MatchPolicy::RelativeTol(1e-3)));
    }

    fn arb_number() -> impl Strategy<Value = String> {
        (any::<bool>(), 0u64..10_000_000, prop::option::of(0u32..100_000)).prop_map(|(neg, int, frac)| {
            let sign = if neg { "-" } else { "" };
            match frac {
                Some(f) => format!("{sign}{int}.{f}"),
                None => format!("{sign}{int}"),
            }
        })
    }

    proptest! {
        #[test]
        fn canonicalization_is_idempotent(raw in arb_number()) {
            let once = num(&raw);
            let twice = num(once.canonical.as_str());
            prop_assert_eq!(&once.canonical, &twice.canonical);
            prop_assert!((once.value() - raw.parse::<f64>().unwrap()).abs() <= 1e-9 * raw.parse::<f64>().unwrap().abs().max(1.0));
        }

        #[test]
        fn match_is_reflexive_and_symmetric(a in arb_number(), b in arb_number(), eps in 1e-9f64..0.5) {
            let (a, b) = (num(&a), num(&b));
            prop_assert!(numbers_match(&a, &a, MatchPolicy::Exact));
            for policy in [MatchPolicy::Exact, MatchPolicy::RelativeTol(eps)] {
                prop_assert_eq!(numbers_match(&a, &b, policy), numbers_match(&b, &a, policy));
            }
        }

        #[test]
        fn proposer_grammar_round_trip(
            pairs in prop::collection::vec((prop::collection::vec("[A-Za-z0-9?,']{1,8}", 1..8), arb_number()), 0..10)
        ) {
            let claims: Vec<ClaimQA> = pairs
                .iter()
                .map(|(words, n)| ClaimQA::new(words.join(" "), num(n)))
                .collect();
            let parsed = parse_proposed_qa(&format_proposed_qa(&claims));
            prop_assert_eq!(parsed.malformed, 0);
            let strip = |c: &[ClaimQA]| c.iter().map(|c| (c.question.clone(), c.asserted_answer.canonical.clone())).collect::<Vec<_>>();
            prop_assert_eq!(strip(&parsed.claims), strip(&claims));
        }

        #[test]
        fn checker_indices_stay_in_range(text in "([0-9]{1,2}\\. (Evidence: [a-z ]{0,10})?\\[Answer: [0-9a-z ]{1,6}\\]\n){0,12}", n in 1usize..6) {
            let p = parse_checker_answers(&text, n);
            for a in &p.answers {
                prop_assert!(a.index >= 1 && a.index <= n);
            }
            prop_assert_eq!(p.answers.len() + p.missing.len(), n);
        }
    }
}
