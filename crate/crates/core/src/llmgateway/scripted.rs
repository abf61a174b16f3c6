//! Canned responses addressed by prompt fingerprint.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;

use super::{fingerprint, Backend, FinishReason, GatewayError, GatewayMetrics, Generation, SamplingConfig};
use crate::prompting::{Role, RolePrompt};

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Entry {
    One(String),
    Many(Vec<String>),
}

impl Entry {
    fn into_vec(self) -> Vec<String> {
        match self {
            Entry::One(s) => vec![s],
            Entry::Many(v) => v,
        }
    }
}

/// Maps a prompt fingerprint to one or more responses. A key of the form
/// `role:<name>` is a fallback for any prompt of that role. When several
/// responses are given, sample `i` receives response `i mod len`.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    responses: HashMap<String, Vec<String>>,
    metrics: Arc<GatewayMetrics>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_metrics(mut self, metrics: Arc<GatewayMetrics>) -> Self {
        self.metrics = metrics;
        self
    }

    pub fn insert(&mut self, fingerprint: impl Into<String>, responses: Vec<String>) {
        assert!(!responses.is_empty(), "scripted entry needs a response");
        self.responses.insert(fingerprint.into(), responses);
    }

    pub fn insert_prompt(&mut self, prompt: &RolePrompt, response: impl Into<String>) {
        self.insert(fingerprint(prompt), vec![response.into()]);
    }

    pub fn insert_role(&mut self, role: Role, responses: Vec<String>) {
        self.insert(format!("role:{}", role.as_str()), responses);
    }

    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        let raw: HashMap<String, Entry> =
            serde_json::from_str(text).map_err(|e| GatewayError::Setup(format!("script: {e}")))?;
        let mut backend = Self::new();
        for (k, v) in raw {
            let v = v.into_vec();
            if v.is_empty() {
                return Err(GatewayError::Setup(format!("script entry {k} has no responses")));
            }
            backend.responses.insert(k, v);
        }
        Ok(backend)
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Setup(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn generate(
        &self,
        prompt: &RolePrompt,
        config: &SamplingConfig,
    ) -> Result<Vec<Generation>, GatewayError> {
        config.validate()?;
        GatewayMetrics::bump(&self.metrics.requests, 1);
        let fp = fingerprint(prompt);
        let responses = self
            .responses
            .get(&fp)
            .or_else(|| self.responses.get(&format!("role:{}", prompt.role.as_str())))
            .ok_or_else(|| {
                GatewayMetrics::bump(&self.metrics.failures, 1);
                GatewayError::NotScripted {
                    role: prompt.role,
                    fingerprint: fp.clone(),
                }
            })?;
        let out: Vec<Generation> = (0..config.n_samples)
            .map(|i| Generation {
                text: responses[i % responses.len()].clone(),
                token_logprobs: None,
                finish_reason: FinishReason::Stop,
            })
            .collect();
        GatewayMetrics::bump(&self.metrics.generations, out.len() as u64);
        Ok(out)
    }
}
