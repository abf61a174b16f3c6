//! Micro-grammar for toy claims and checker answers, and the toy prompt
//! dialect.
//!
//! Claims: `<Q> slot <A> digit+ <SEP>` repeated. Answers: `<A> digit+ <SEP>`
//! or `<A> <NUL> <SEP>` per question, in question order. Parsing stops at the
//! first `<EOS>`.

use std::sync::OnceLock;

use regex::Regex;

use super::vocab::{
    self, is_digit, render, slot_of, slot_token, tokenize, A, CHECK, EOS, NUL, PROPOSE, Q, SEP,
    SOLVE,
};
use crate::datamodel::{Document, RagSample};
use crate::pipeline::{Dialect, DialectError};
use crate::prompting::{PromptConfig, Role, RolePrompt};
use crate::textparse::{
    canonicalize_number, CheckedAnswer, CheckerParse, ClaimQA, NumericAnswer, ProposedQa, Verdict,
};

pub const TOY_TEMPLATE_VERSION: &str = "toy@1";

pub fn question_for_slot(slot: u8) -> String {
    format!("value of s{slot}?")
}

pub fn slot_from_question(question: &str) -> Option<u8> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"^value of s(\d{1,2})\?$").expect("static regex"));
    let n: u8 = re.captures(question.trim())?[1].parse().ok()?;
    ((n as usize) < vocab::N_SLOTS).then_some(n)
}

fn digits_to_answer(digits: &[usize]) -> NumericAnswer {
    let raw: String = digits.iter().map(|&d| char::from(b'0' + d as u8)).collect();
    canonicalize_number(&raw).expect("digit strings always canonicalize")
}

fn until_eos(tokens: &[usize]) -> &[usize] {
    let end = tokens.iter().position(|&t| t == EOS).unwrap_or(tokens.len());
    &tokens[..end]
}

/// Splits at every occurrence of `marker`; returns (leading junk, spans).
fn spans(tokens: &[usize], marker: usize) -> (&[usize], Vec<&[usize]>) {
    let starts: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] == marker).collect();
    let lead = &tokens[..starts.first().copied().unwrap_or(tokens.len())];
    let spans = starts
        .iter()
        .enumerate()
        .map(|(k, &s)| &tokens[s..starts.get(k + 1).copied().unwrap_or(tokens.len())])
        .collect();
    (lead, spans)
}

pub fn parse_micro_claims(tokens: &[usize]) -> ProposedQa {
    let (lead, spans) = spans(until_eos(tokens), Q);
    let mut out = ProposedQa {
        claims: Vec::new(),
        malformed: usize::from(!lead.is_empty()),
    };
    for span in spans {
        let claim = match span {
            [Q, slot, A, digits @ .., SEP]
                if !digits.is_empty() && digits.iter().all(|&d| is_digit(d)) =>
            {
                slot_of(*slot).map(|s| ClaimQA::new(question_for_slot(s), digits_to_answer(digits)))
            }
            _ => None,
        };
        match claim {
            Some(c) => out.claims.push(c),
            None => out.malformed += 1,
        }
    }
    out
}

/// The `i`-th `<A>` span answers question `i`; malformed spans leave their
/// index missing.
pub fn parse_micro_answers(tokens: &[usize], n_questions: usize) -> CheckerParse {
    let (_, spans) = spans(until_eos(tokens), A);
    let answers = spans
        .iter()
        .enumerate()
        .filter_map(|(i, span)| {
            let verdict = match *span {
                [A, NUL, SEP] => Verdict::CannotAnswer,
                [A, ref digits @ .., SEP]
                    if !digits.is_empty() && digits.iter().all(|&d| is_digit(d)) =>
                {
                    Verdict::Number(digits_to_answer(digits))
                }
                _ => return None,
            };
            Some(CheckedAnswer {
                index: i + 1,
                verdict,
                evidence: None,
            })
        })
        .collect();
    CheckerParse::from_answers(answers, n_questions)
}

/// Claims whose question is not of the toy form are skipped.
pub fn format_micro_claims(claims: &[ClaimQA]) -> Vec<usize> {
    let mut out = Vec::new();
    for c in claims {
        let Some(slot) = slot_from_question(&c.question) else {
            continue;
        };
        out.extend([Q, slot_token(slot), A]);
        out.extend(answer_tokens(&c.asserted_answer));
        out.push(SEP);
    }
    out
}

/// Digit tokens of a non-negative integer answer; `None` for anything the
/// micro-grammar cannot express.
pub fn answer_digits(answer: &NumericAnswer) -> Option<Vec<usize>> {
    let s = answer.canonical.as_str();
    (!s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()))
        .then(|| s.bytes().map(|b| (b - b'0') as usize).collect())
}

fn answer_tokens(answer: &NumericAnswer) -> Vec<usize> {
    answer_digits(answer).unwrap_or_else(|| vec![NUL])
}

pub fn format_micro_answers(verdicts: &[Verdict]) -> Vec<usize> {
    let mut out = Vec::new();
    for v in verdicts {
        out.push(A);
        match v {
            Verdict::CannotAnswer => out.push(NUL),
            Verdict::Number(n) => out.extend(answer_tokens(n)),
        }
        out.push(SEP);
    }
    out
}

/// Prompt construction and parsing for the toy policy. Prompts are
/// space-separated token names beginning with the role marker.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyDialect;

fn toy_tokens(text: &str, what: &str) -> Result<Vec<usize>, DialectError> {
    tokenize(text).map_err(|e| DialectError(format!("{what}: {e}")))
}

fn prompt(role: Role, tokens: &[usize]) -> RolePrompt {
    RolePrompt {
        role,
        text: render(tokens),
        template_version: TOY_TEMPLATE_VERSION.to_string(),
    }
}

fn doc_tokens(documents: &[Document]) -> Result<Vec<usize>, DialectError> {
    let mut out = Vec::new();
    for d in documents {
        out.extend(toy_tokens(&d.body, "document")?);
    }
    Ok(out)
}

impl ToyDialect {
    pub fn solver_tokens(sample: &RagSample) -> Result<Vec<usize>, DialectError> {
        let mut t = vec![SOLVE];
        t.extend(doc_tokens(&sample.documents)?);
        t.extend(toy_tokens(&sample.query, "query")?);
        t.push(SEP);
        Ok(t)
    }

    /// `<PROPOSE> [<Q> x k] <SEP> response`, the response cut at `<EOS>`.
    pub fn proposer_tokens(response: &[usize], min_questions: Option<usize>) -> Vec<usize> {
        let mut t = vec![PROPOSE];
        t.extend(std::iter::repeat_n(Q, min_questions.unwrap_or(0)));
        t.push(SEP);
        t.extend_from_slice(until_eos(response));
        t
    }

    pub fn checker_tokens(slots: &[Option<u8>], docs: &[usize]) -> Vec<usize> {
        let mut t = vec![CHECK];
        t.extend_from_slice(docs);
        for s in slots {
            t.push(Q);
            t.push(s.map(slot_token).unwrap_or(NUL));
        }
        t.push(SEP);
        t
    }
}

impl Dialect for ToyDialect {
    fn name(&self) -> &str {
        "toy"
    }

    fn solver_prompt(&self, sample: &RagSample) -> Result<RolePrompt, DialectError> {
        Ok(prompt(Role::Solver, &Self::solver_tokens(sample)?))
    }

    fn proposer_prompt(
        &self,
        response: &str,
        config: &PromptConfig,
    ) -> Result<RolePrompt, DialectError> {
        let response = toy_tokens(response, "solver response")?;
        Ok(prompt(
            Role::Proposer,
            &Self::proposer_tokens(&response, config.min_questions),
        ))
    }

    fn parse_claims(&self, output: &str) -> ProposedQa {
        match tokenize(output) {
            Ok(t) => parse_micro_claims(&t),
            Err(_) => ProposedQa {
                claims: Vec::new(),
                malformed: 1,
            },
        }
    }

    fn checker_prompt(
        &self,
        questions: &[String],
        documents: &[Document],
    ) -> Result<RolePrompt, DialectError> {
        let slots: Vec<Option<u8>> = questions.iter().map(|q| slot_from_question(q)).collect();
        Ok(prompt(
            Role::Checker,
            &Self::checker_tokens(&slots, &doc_tokens(documents)?),
        ))
    }

    fn parse_answers(&self, output: &str, n_questions: usize) -> CheckerParse {
        let tokens = tokenize(output).unwrap_or_default();
        parse_micro_answers(&tokens, n_questions)
    }

    fn template_versions(&self) -> Vec<(String, String)> {
        vec![("toy".to_string(), TOY_TEMPLATE_VERSION.to_string())]
    }
}
