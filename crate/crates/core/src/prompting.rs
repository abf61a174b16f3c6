//! Role prompt rendering from `{{slot}}` templates.
//!
//! The default templates are compiled in from `templates/`; a directory
//! override replaces any of `solver.tmpl`, `proposer.tmpl`, `checker.tmpl`
//! and `judge.tmpl` it contains. Each template kind has a fixed slot set, and
//! a template naming a slot outside that set is rejected at load time. The
//! checker slot set has no response slot, so nothing derived from the Solver
//! can reach a checker prompt.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datamodel::{Document, RagSample};

const SOLVER_TEMPLATE: &str = include_str!("../templates/solver.tmpl");
const PROPOSER_TEMPLATE: &str = include_str!("../templates/proposer.tmpl");
const CHECKER_TEMPLATE: &str = include_str!("../templates/checker.tmpl");
const JUDGE_TEMPLATE: &str = include_str!("../templates/judge.tmpl");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("cannot read template {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("template {template}: unknown slot {{{{{slot}}}}}")]
    UnknownSlot { template: String, slot: String },
    #[error("template {template}: missing required slot {{{{{slot}}}}}")]
    MissingSlot { template: String, slot: String },
    #[error("template {template}: unterminated slot")]
    Unterminated { template: String },
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("min_questions must be at least 1")]
    InvalidMinQuestions,
    #[error("cannot render {role} prompt: {reason}")]
    Unrenderable { role: Role, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Solver,
    Proposer,
    Checker,
    Judge,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Solver => "solver",
            Role::Proposer => "proposer",
            Role::Checker => "checker",
            Role::Judge => "judge",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolePrompt {
    pub role: Role,
    pub text: String,
    pub template_version: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    #[serde(default)]
    pub min_questions: Option<usize>,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
}

/// The sentence appended to the Proposer prompt when a minimum is set.
pub fn min_questions_clause(k: usize) -> String {
    format!("You must generate no fewer than {k} question-answer pairs.")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Documents,
    Query,
    Response,
    Questions,
    MinQuestionsClause,
    GoldAnswerClause,
}

impl Slot {
    fn parse(name: &str) -> Option<Slot> {
        Some(match name {
            "documents" => Slot::Documents,
            "query" => Slot::Query,
            "response" => Slot::Response,
            "questions" => Slot::Questions,
            "min_questions_clause" => Slot::MinQuestionsClause,
            "gold_answer_clause" => Slot::GoldAnswerClause,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Text(String),
    Slot(Slot),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    name: String,
    version: String,
    segments: Vec<Segment>,
}

impl Template {
    fn parse(
        name: &str,
        source: &str,
        allowed: &[Slot],
        required: &[(Slot, &str)],
    ) -> Result<Template, PromptError> {
        let mut segments = Vec::new();
        let mut rest = source;
        while let Some(open) = rest.find("{{") {
            if open > 0 {
                segments.push(Segment::Text(rest[..open].to_string()));
            }
            let after = &rest[open + 2..];
            let close = after.find("}}").ok_or_else(|| PromptError::Unterminated {
                template: name.to_string(),
            })?;
            let slot_name = after[..close].trim();
            let slot = Slot::parse(slot_name)
                .filter(|s| allowed.contains(s))
                .ok_or_else(|| PromptError::UnknownSlot {
                    template: name.to_string(),
                    slot: slot_name.to_string(),
                })?;
            segments.push(Segment::Slot(slot));
            rest = &after[close + 2..];
        }
        if !rest.is_empty() {
            segments.push(Segment::Text(rest.to_string()));
        }
        for (slot, slot_name) in required {
            if !segments.contains(&Segment::Slot(*slot)) {
                return Err(PromptError::MissingSlot {
                    template: name.to_string(),
                    slot: slot_name.to_string(),
                });
            }
        }
        let digest = Sha256::digest(source.as_bytes());
        Ok(Template {
            name: name.to_string(),
            version: format!("{name}@{}", &hex::encode(digest)[..12]),
            segments,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Single pass: substituted values are never re-scanned for slots.
    fn render(&self, value: impl Fn(Slot) -> String) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(s) => out.push_str(&value(*s)),
            }
        }
        out
    }
}

/// Serializes documents as `Document-1 … Document-K` blocks in order.
pub fn format_documents(documents: &[Document]) -> String {
    documents
        .iter()
        .enumerate()
        .map(|(i, d)| match &d.title {
            Some(title) => format!("Document-{}\n{}\n{}", i + 1, title, d.body),
            None => format!("Document-{}\n{}", i + 1, d.body),
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn format_questions(questions: &[String]) -> String {
    questions
        .iter()
        .enumerate()
        .map(|(i, q)| format!("- Question {}: {}", i + 1, q))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    solver: Template,
    proposer: Template,
    checker: Template,
    judge: Template,
}

impl TemplateSet {
    pub fn builtin() -> TemplateSet {
        Self::from_sources(
            SOLVER_TEMPLATE,
            PROPOSER_TEMPLATE,
            CHECKER_TEMPLATE,
            JUDGE_TEMPLATE,
        )
        .expect("built-in templates are valid")
    }

    pub fn from_sources(
        solver: &str,
        proposer: &str,
        checker: &str,
        judge: &str,
    ) -> Result<TemplateSet, PromptError> {
        use Slot::*;
        Ok(TemplateSet {
            solver: Template::parse(
                "solver",
                solver,
                &[Documents, Query],
                &[(Documents, "documents"), (Query, "query")],
            )?,
            proposer: Template::parse(
                "proposer",
                proposer,
                &[Response, MinQuestionsClause],
                &[
                    (Response, "response"),
                    (MinQuestionsClause, "min_questions_clause"),
                ],
            )?,
            checker: Template::parse(
                "checker",
                checker,
                &[Documents, Questions],
                &[(Documents, "documents"), (Questions, "questions")],
            )?,
            judge: Template::parse(
                "judge",
                judge,
                &[Documents, Response, GoldAnswerClause],
                &[(Documents, "documents"), (Response, "response")],
            )?,
        })
    }

    /// Built-in templates, with any `*.tmpl` file found in `dir` taking precedence.
    pub fn from_dir(dir: &Path) -> Result<TemplateSet, PromptError> {
        let read = |file: &str, fallback: &'static str| -> Result<String, PromptError> {
            let path = dir.join(file);
            match std::fs::read_to_string(&path) {
                Ok(text) => Ok(text),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(fallback.to_string()),
                Err(source) => Err(PromptError::Io { path, source }),
            }
        };
        Self::from_sources(
            &read("solver.tmpl", SOLVER_TEMPLATE)?,
            &read("proposer.tmpl", PROPOSER_TEMPLATE)?,
            &read("checker.tmpl", CHECKER_TEMPLATE)?,
            &read("judge.tmpl", JUDGE_TEMPLATE)?,
        )
    }

    pub fn load(config: &PromptConfig) -> Result<TemplateSet, PromptError> {
        match &config.templates_dir {
            Some(dir) => Self::from_dir(dir),
            None => Ok(Self::builtin()),
        }
    }

    /// `(template name, version)` for every template, for run manifests.
    pub fn versions(&self) -> Vec<(String, String)> {
        [&self.solver, &self.proposer, &self.checker, &self.judge]
            .iter()
            .map(|t| (t.name.clone(), t.version.clone()))
            .collect()
    }

    pub fn render_solver_prompt(&self, sample: &RagSample) -> Result<RolePrompt, PromptError> {
        if sample.documents.is_empty() {
            return Err(PromptError::EmptyInput("documents"));
        }
        let text = self.solver.render(|slot| match slot {
            Slot::Documents => format_documents(&sample.documents),
            Slot::Query => sample.query.clone(),
            _ => unreachable!("slot set checked at load"),
        });
        Ok(RolePrompt {
            role: Role::Solver,
            text,
            template_version: self.solver.version.clone(),
        })
    }

    pub fn render_proposer_prompt(
        &self,
        response: &str,
        config: &PromptConfig,
    ) -> Result<RolePrompt, PromptError> {
        if response.trim().is_empty() {
            return Err(PromptError::EmptyInput("response"));
        }
        if config.min_questions == Some(0) {
            return Err(PromptError::InvalidMinQuestions);
        }
        let text = self.proposer.render(|slot| match slot {
            Slot::Response => response.to_string(),
            Slot::MinQuestionsClause => config
                .min_questions
                .map(|k| format!("{}\n\n", min_questions_clause(k)))
                .unwrap_or_default(),
            _ => unreachable!("slot set checked at load"),
        });
        Ok(RolePrompt {
            role: Role::Proposer,
            text,
            template_version: self.proposer.version.clone(),
        })
    }

    /// Takes only the questions and the documents: the Solver response and
    /// the asserted answers have no way in.
    pub fn render_checker_prompt(
        &self,
        questions: &[String],
        documents: &[Document],
    ) -> Result<RolePrompt, PromptError> {
        if questions.is_empty() {
            return Err(PromptError::EmptyInput("questions"));
        }
        let text = self.checker.render(|slot| match slot {
            Slot::Documents => format_documents(documents),
            Slot::Questions => format_questions(questions),
            _ => unreachable!("slot set checked at load"),
        });
        Ok(RolePrompt {
            role: Role::Checker,
            text,
            template_version: self.checker.version.clone(),
        })
    }

    pub fn render_judge_prompt(
        &self,
        response: &str,
        documents: &[Document],
        gold_answer: Option<&str>,
    ) -> RolePrompt {
        let text = self.judge.render(|slot| match slot {
            Slot::Documents => format_documents(documents),
            Slot::Response => response.to_string(),
            Slot::GoldAnswerClause => gold_answer
                .map(|g| format!("\nThe reference answer to the query is: {g}\n"))
                .unwrap_or_default(),
            _ => unreachable!("slot set checked at load"),
        });
        RolePrompt {
            role: Role::Judge,
            text,
            template_version: self.judge.version.clone(),
        }
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}
