//! Model backends: the chat LLM that completes prompts and the classifier
//! SLMs that produce logits, behind traits so HTTP services, JSONL fixtures,
//! and in-process mocks are interchangeable.

mod fixture;
mod http;
mod mock;

pub use fixture::FixtureBackend;
pub use http::{HttpLlmBackend, HttpSlmBackend};
pub use mock::{ScriptedLlm, ScriptedSlm};

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dataset::{Example, TaskSpec};
use crate::error::BackendError;

/// What a backend is and how to reach it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Chat-completion service; answers prompts.
    LlmChat,
    /// Classification service; returns one logit per label.
    SlmClassifier,
    /// JSONL file replaying recorded logits and completions. Serves both
    /// roles, depending on which entry shapes the file contains.
    Fixture,
}

/// Declarative description of one backend, as written in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub backend_id: String,
    pub kind: BackendKind,
    /// Service URL for HTTP kinds; file path for fixtures.
    pub endpoint_url: String,
    /// Prompt-facing model name; also sent as `model` in requests.
    pub model_name: String,
    /// Env var holding the bearer token. Never the token itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env_var: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_max_retries() -> u32 {
    2
}

impl BackendSpec {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}

/// Raw classifier outputs, one per label, in label-space order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitVector {
    values: Vec<f64>,
}

impl LogitVector {
    /// All values must be finite; NaN or infinity is a protocol-level defect.
    pub fn new(values: Vec<f64>) -> Result<Self, String> {
        if values.is_empty() {
            return Err("empty logit vector".into());
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(format!("non-finite logit at index {i}"));
        }
        Ok(LogitVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the largest value; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate().skip(1) {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Decoding strategy. Only greedy decoding is supported: zero temperature
/// makes completions a pure function of the prompt, which is what lets the
/// completion cache replay runs byte-for-byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
}

/// Decoding parameters sent with every chat request. Part of the completion
/// cache key: a different budget may yield a different completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub mode: DecodeMode,
    pub max_new_tokens: u32,
}

impl DecodeParams {
    pub fn greedy(max_new_tokens: u32) -> Self {
        DecodeParams {
            mode: DecodeMode::Greedy,
            max_new_tokens,
        }
    }
}

/// A chat completion result. `truncated` is set when the server reports it
/// stopped at the token budget, so the condition is never silent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    #[serde(default)]
    pub truncated: bool,
}

/// One full prompt/completion exchange, for logging and inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub system_text: String,
    pub user_text: String,
    pub completion_text: String,
    pub truncated: bool,
    pub decode: DecodeParams,
}

/// A chat model that completes a (system, user) prompt pair.
pub trait LlmBackend: Send + Sync {
    fn id(&self) -> &str;
    /// Prompt-facing model name.
    fn model_name(&self) -> &str;
    fn complete_greedy(
        &self,
        system_text: &str,
        user_text: &str,
        decode: &DecodeParams,
    ) -> Result<Completion, BackendError>;

    /// Run a completion and keep the whole exchange together.
    fn exchange(
        &self,
        system_text: &str,
        user_text: &str,
        decode: &DecodeParams,
    ) -> Result<ChatExchange, BackendError> {
        let completion = self.complete_greedy(system_text, user_text, decode)?;
        Ok(ChatExchange {
            system_text: system_text.to_string(),
            user_text: user_text.to_string(),
            completion_text: completion.text,
            truncated: completion.truncated,
            decode: *decode,
        })
    }
}

/// A classifier that scores an example against a task's label space.
pub trait SlmBackend: Send + Sync {
    fn id(&self) -> &str;
    /// Prompt-facing model name, used in prediction lines.
    fn model_name(&self) -> &str;
    fn classify(&self, task: &TaskSpec, example: &Example) -> Result<LogitVector, BackendError>;

    /// Classify several examples; results align with the input order.
    fn classify_batch(
        &self,
        task: &TaskSpec,
        examples: &[Example],
    ) -> Result<Vec<LogitVector>, BackendError> {
        examples.iter().map(|ex| self.classify(task, ex)).collect()
    }
}

/// Check a logit vector against the task's label count; anything else is a
/// protocol error attributed to the backend.
pub(crate) fn validated_logits(
    values: Vec<f64>,
    task: &TaskSpec,
    backend_id: &str,
) -> Result<LogitVector, BackendError> {
    if values.len() != task.label_space.len() {
        return Err(BackendError::Protocol {
            backend_id: backend_id.to_string(),
            message: format!(
                "{} logits for task `{}` with {} labels",
                values.len(),
                task.task_id,
                task.label_space.len()
            ),
        });
    }
    LogitVector::new(values).map_err(|message| BackendError::Protocol {
        backend_id: backend_id.to_string(),
        message,
    })
}

/// Holds every configured backend by id, each behind its role trait.
/// Fixture backends register in both roles.
#[derive(Default, Clone)]
pub struct BackendRegistry {
    llms: BTreeMap<String, Arc<dyn LlmBackend>>,
    slms: BTreeMap<String, Arc<dyn SlmBackend>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build every backend in a config. Duplicate ids are rejected.
    pub fn from_specs(specs: &[BackendSpec]) -> Result<Self, BackendError> {
        let mut registry = BackendRegistry::new();
        for spec in specs {
            if registry.llms.contains_key(&spec.backend_id)
                || registry.slms.contains_key(&spec.backend_id)
            {
                return Err(BackendError::Init {
                    backend_id: spec.backend_id.clone(),
                    message: "duplicate backend id".into(),
                });
            }
            match spec.kind {
                BackendKind::LlmChat => {
                    registry.register_llm(Arc::new(HttpLlmBackend::new(spec.clone())?));
                }
                BackendKind::SlmClassifier => {
                    registry.register_slm(Arc::new(HttpSlmBackend::new(spec.clone())?));
                }
                BackendKind::Fixture => {
                    let fixture = Arc::new(FixtureBackend::from_spec(spec.clone())?);
                    registry
                        .llms
                        .insert(spec.backend_id.clone(), fixture.clone());
                    registry.slms.insert(spec.backend_id.clone(), fixture);
                }
            }
        }
        Ok(registry)
    }

    pub fn register_llm(&mut self, backend: Arc<dyn LlmBackend>) {
        self.llms.insert(backend.id().to_string(), backend);
    }

    pub fn register_slm(&mut self, backend: Arc<dyn SlmBackend>) {
        self.slms.insert(backend.id().to_string(), backend);
    }

    pub fn llm(&self, backend_id: &str) -> Result<&Arc<dyn LlmBackend>, BackendError> {
        self.llms
            .get(backend_id)
            .ok_or_else(|| BackendError::Unknown(backend_id.to_string()))
    }

    pub fn slm(&self, backend_id: &str) -> Result<&Arc<dyn SlmBackend>, BackendError> {
        self.slms
            .get(backend_id)
            .ok_or_else(|| BackendError::Unknown(backend_id.to_string()))
    }

    pub fn slm_ids(&self) -> Vec<String> {
        self.slms.keys().cloned().collect()
    }
}
