//! Chat-completion gateway: prompt templates, backends, and exchange records.

mod backend;
mod http;
mod template;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use backend::{Script, ScriptEntry, ScriptedBackend, SequenceBackend};
pub use http::{chat_body, HttpBackend, HttpConfig};
pub use template::{PromptSet, PromptTemplate, Slots, TemplateName};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("template error: {0}")]
    Template(String),
    #[error("missing slot {0:?}")]
    MissingSlot(String),
    #[error("invalid decoding parameters: {0}")]
    InvalidParams(String),
    #[error("no scripted completion for {template} key {key}; nearest: [{}]", nearest.join(", "))]
    ScriptMiss {
        template: TemplateName,
        key: String,
        nearest: Vec<String>,
    },
    #[error("script has two different completions for key {0}")]
    ScriptConflict(String),
    #[error("no more queued completions for {0}")]
    Exhausted(TemplateName),
    #[error("script error: {0}")]
    Script(String),
    #[error("{template} prompt needs ~{estimated} tokens, over the budget of {budget}")]
    OverBudget {
        template: TemplateName,
        estimated: usize,
        budget: usize,
    },
    #[error("environment variable {0} with the API key is not set")]
    MissingApiKey(String),
    #[error("http status {status} after {attempts} attempt(s): {body}")]
    Http {
        status: u16,
        attempts: u32,
        body: String,
    },
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Response(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub stop: Vec<String>,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            temperature: 0.7,
            max_tokens: 256,
            stop: Vec::new(),
        }
    }
}

impl DecodingParams {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::InvalidParams(format!(
                "temperature {} must be a finite value >= 0",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidParams("max_tokens must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_stop(mut self, stop: &[&str]) -> Self {
        self.stop = stop.iter().map(|s| s.to_string()).collect();
        self
    }
}

/// What a backend receives: the rendered prompt plus the slots it came
/// from, so replay backends can key on slot values.
#[derive(Debug, Clone)]
pub struct LlmRequest {
    pub template: TemplateName,
    pub slots: Slots,
    pub prompt: String,
    pub params: DecodingParams,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Completion {
    pub text: String,
    pub latency_ms: Option<u64>,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Completion {
            text: text.into(),
            ..Default::default()
        }
    }
}

pub trait LlmBackend: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, req: &LlmRequest) -> Result<Completion, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmExchange {
    pub template: TemplateName,
    pub slots: Slots,
    pub prompt: String,
    pub params: DecodingParams,
    pub completion: String,
    pub backend: String,
    pub latency_ms: Option<u64>,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

/// Digest of template name and slot values; the replay key.
pub fn script_key(template: TemplateName, slots: &Slots) -> String {
    let canonical = serde_json::to_string(&(template.as_str(), slots)).expect("strings serialize");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Rough token count: one token per four characters, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

pub const DEFAULT_CONTEXT_BUDGET: usize = 16_000;

#[derive(Clone)]
pub struct Gateway {
    prompts: PromptSet,
    backend: Arc<dyn LlmBackend>,
    context_budget: usize,
}

impl Gateway {
    pub fn new(prompts: PromptSet, backend: Arc<dyn LlmBackend>) -> Self {
        Gateway {
            prompts,
            backend,
            context_budget: DEFAULT_CONTEXT_BUDGET,
        }
    }

    pub fn with_context_budget(mut self, tokens: usize) -> Self {
        self.context_budget = tokens;
        self
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn render(&self, template: TemplateName, slots: &Slots) -> Result<String, LlmError> {
        self.prompts.get(template).render(slots)
    }

    /// Render, check the budget, and send.
    pub fn call(
        &self,
        template: TemplateName,
        slots: Slots,
        params: &DecodingParams,
    ) -> Result<LlmExchange, LlmError> {
        params.validate()?;
        let prompt = self.render(template, &slots)?;
        let estimated = estimate_tokens(&prompt);
        if estimated > self.context_budget {
            return Err(LlmError::OverBudget {
                template,
                estimated,
                budget: self.context_budget,
            });
        }
        let req = LlmRequest {
            template,
            slots,
            prompt,
            params: params.clone(),
        };
        let c = self.backend.complete(&req)?;
        tracing::debug!(%template, chars = c.text.len(), "completion");
        Ok(LlmExchange {
            template,
            slots: req.slots,
            prompt: req.prompt,
            params: req.params,
            completion: c.text,
            backend: self.backend.id(),
            latency_ms: c.latency_ms,
            prompt_tokens: c.prompt_tokens,
            completion_tokens: c.completion_tokens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_depends_on_template_and_slots() {
        let a: Slots = [("Thought".to_string(), "x".to_string())].into();
        let b: Slots = [("Thought".to_string(), "y".to_string())].into();
        assert_eq!(script_key(TemplateName::FilterRelations, &a), script_key(TemplateName::FilterRelations, &a.clone()));
        assert_ne!(script_key(TemplateName::FilterRelations, &a), script_key(TemplateName::FilterRelations, &b));
        assert_ne!(script_key(TemplateName::FilterRelations, &a), script_key(TemplateName::GenerateTriples, &a));
        assert_eq!(script_key(TemplateName::FilterRelations, &a).len(), 64);
    }

    #[test]
    fn params_validation() {
        assert!(DecodingParams::default().validate().is_ok());
        let bad = DecodingParams {
            temperature: -0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let zero = DecodingParams {
            max_tokens: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn over_budget_fails_before_sending() {
        let backend = Arc::new(SequenceBackend::default());
        let gw = Gateway::new(PromptSet::default(), backend.clone()).with_context_budget(10);
        let slots: Slots = [("Mention", "x"), ("Question", "q"), ("Candidates", "c")]
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .into();
        let err = gw.call(TemplateName::LinkEntity, slots, &DecodingParams::default()).unwrap_err();
        assert!(matches!(err, LlmError::OverBudget { budget: 10, .. }));
        assert_eq!(backend.calls(), 0);
    }
}
