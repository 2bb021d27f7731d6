//! HTTP backends. The chat protocol follows the OpenAI-compatible shape;
//! the classifier protocol is a batched scoring call that correlates results
//! to inputs by example id, never by arrival order.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{Example, TaskSpec};
use crate::error::BackendError;

use super::{
    validated_logits, BackendKind, BackendSpec, Completion, DecodeParams, LlmBackend, LogitVector,
    SlmBackend,
};

const BACKOFF_BASE: Duration = Duration::from_millis(100);
const BACKOFF_CAP: Duration = Duration::from_secs(5);
const BODY_EXCERPT_LEN: usize = 200;

/// Shared request plumbing: bearer auth from the environment, JSON bodies,
/// and bounded exponential backoff. Greedy decoding makes retries idempotent.
#[derive(Debug)]
struct HttpClient {
    spec: BackendSpec,
    client: reqwest::blocking::Client,
}

impl HttpClient {
    fn new(spec: BackendSpec) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(spec.timeout())
            .build()
            .map_err(|e| BackendError::Init {
                backend_id: spec.backend_id.clone(),
                message: format!("cannot build HTTP client: {e}"),
            })?;
        Ok(HttpClient { spec, client })
    }

    fn bearer_token(&self) -> Result<Option<String>, BackendError> {
        match &self.spec.auth_env_var {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(token) => Ok(Some(token)),
                Err(_) => Err(BackendError::MissingAuth {
                    backend_id: self.spec.backend_id.clone(),
                    var: var.clone(),
                }),
            },
        }
    }

    /// POST the body, retrying transport failures and retryable statuses
    /// (5xx, 429) up to `max_retries` extra attempts. 4xx responses fail
    /// fast: resending an ill-formed request cannot help.
    fn post_json(&self, body: &serde_json::Value) -> Result<serde_json::Value, BackendError> {
        let token = self.bearer_token()?;
        let attempts = self.spec.max_retries + 1;
        let mut last_error = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = BACKOFF_BASE * 2u32.pow(attempt - 1);
                thread::sleep(backoff.min(BACKOFF_CAP));
            }
            let mut request = self.client.post(&self.spec.endpoint_url).json(body);
            if let Some(token) = &token {
                request = request.bearer_auth(token);
            }
            match request.send() {
                Err(e) => {
                    last_error = Some(BackendError::Transport {
                        backend_id: self.spec.backend_id.clone(),
                        endpoint: self.spec.endpoint_url.clone(),
                        attempts: attempt + 1,
                        message: e.to_string(),
                    });
                }
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        return response.json().map_err(|e| BackendError::Protocol {
                            backend_id: self.spec.backend_id.clone(),
                            message: format!("response is not JSON: {e}"),
                        });
                    }
                    let body_text = response.text().unwrap_or_default();
                    let excerpt: String = body_text.chars().take(BODY_EXCERPT_LEN).collect();
                    let error = BackendError::Http {
                        backend_id: self.spec.backend_id.clone(),
                        endpoint: self.spec.endpoint_url.clone(),
                        status: status.as_u16(),
                        body_excerpt: excerpt,
                    };
                    let retryable = status.is_server_error() || status.as_u16() == 429;
                    if !retryable {
                        return Err(error);
                    }
                    last_error = Some(error);
                }
            }
        }
        Err(last_error.expect("at least one attempt"))
    }

    fn protocol_error(&self, message: impl Into<String>) -> BackendError {
        BackendError::Protocol {
            backend_id: self.spec.backend_id.clone(),
            message: message.into(),
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

/// Chat-completion service speaking the OpenAI-compatible protocol.
#[derive(Debug)]
pub struct HttpLlmBackend {
    http: HttpClient,
}

impl HttpLlmBackend {
    pub fn new(spec: BackendSpec) -> Result<Self, BackendError> {
        if spec.kind != BackendKind::LlmChat {
            return Err(BackendError::Init {
                backend_id: spec.backend_id.clone(),
                message: format!("expected kind llm_chat, got {:?}", spec.kind),
            });
        }
        Ok(HttpLlmBackend {
            http: HttpClient::new(spec)?,
        })
    }
}

impl LlmBackend for HttpLlmBackend {
    fn id(&self) -> &str {
        &self.http.spec.backend_id
    }

    fn model_name(&self) -> &str {
        &self.http.spec.model_name
    }

    fn complete_greedy(
        &self,
        system_text: &str,
        user_text: &str,
        decode: &DecodeParams,
    ) -> Result<Completion, BackendError> {
        let body = json!({
            "model": self.http.spec.model_name,
            "messages": [
                {"role": "system", "content": system_text},
                {"role": "user", "content": user_text},
            ],
            "temperature": 0,
            "max_tokens": decode.max_new_tokens,
        });
        let value = self.http.post_json(&body)?;
        let response: ChatResponse = serde_json::from_value(value).map_err(|e| {
            self.http
                .protocol_error(format!("malformed chat response: {e}"))
        })?;
        let choice = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| self.http.protocol_error("chat response has no choices"))?;
        Ok(Completion {
            text: choice.message.content,
            truncated: choice.finish_reason.as_deref() == Some("length"),
        })
    }
}

#[derive(Serialize)]
struct ClassifyInput<'a> {
    example_id: &'a str,
    fields: &'a std::collections::BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct ClassifyResponse {
    results: Vec<ClassifyResult>,
}

#[derive(Deserialize)]
struct ClassifyResult {
    example_id: String,
    logits: Vec<f64>,
}

/// Classification service scoring examples against a task's label space.
#[derive(Debug)]
pub struct HttpSlmBackend {
    http: HttpClient,
}

impl HttpSlmBackend {
    pub fn new(spec: BackendSpec) -> Result<Self, BackendError> {
        if spec.kind != BackendKind::SlmClassifier {
            return Err(BackendError::Init {
                backend_id: spec.backend_id.clone(),
                message: format!("expected kind slm_classifier, got {:?}", spec.kind),
            });
        }
        Ok(HttpSlmBackend {
            http: HttpClient::new(spec)?,
        })
    }
}

impl SlmBackend for HttpSlmBackend {
    fn id(&self) -> &str {
        &self.http.spec.backend_id
    }

    fn model_name(&self) -> &str {
        &self.http.spec.model_name
    }

    fn classify(&self, task: &TaskSpec, example: &Example) -> Result<LogitVector, BackendError> {
        let mut logits = self.classify_batch(task, std::slice::from_ref(example))?;
        Ok(logits.remove(0))
    }

    fn classify_batch(
        &self,
        task: &TaskSpec,
        examples: &[Example],
    ) -> Result<Vec<LogitVector>, BackendError> {
        if examples.is_empty() {
            return Ok(Vec::new());
        }
        let inputs: Vec<ClassifyInput> = examples
            .iter()
            .map(|ex| ClassifyInput {
                example_id: &ex.example_id,
                fields: &ex.field_values,
            })
            .collect();
        let body = json!({
            "model": self.http.spec.model_name,
            "task_id": task.task_id,
            "inputs": inputs,
            "labels": task.label_space.labels(),
        });
        let value = self.http.post_json(&body)?;
        let response: ClassifyResponse = serde_json::from_value(value).map_err(|e| {
            self.http
                .protocol_error(format!("malformed classify response: {e}"))
        })?;
        if response.results.len() != examples.len() {
            return Err(self.http.protocol_error(format!(
                "{} results for {} inputs",
                response.results.len(),
                examples.len()
            )));
        }
        // Match responses to inputs by example id; servers may reorder.
        let mut by_id: std::collections::HashMap<&str, &ClassifyResult> = response
            .results
            .iter()
            .map(|r| (r.example_id.as_str(), r))
            .collect();
        if by_id.len() != response.results.len() {
            return Err(self.http.protocol_error("duplicate example_id in results"));
        }
        examples
            .iter()
            .map(|ex| {
                let result = by_id.remove(ex.example_id.as_str()).ok_or_else(|| {
                    self.http
                        .protocol_error(format!("no result for example `{}`", ex.example_id))
                })?;
                validated_logits(result.logits.clone(), task, &self.http.spec.backend_id)
            })
            .collect()
    }
}
