//! In-process scripted backends for tests and examples. Both kinds count
//! their calls, so tests can assert that a warm cache issues none.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::dataset::{Example, TaskSpec};
use crate::error::BackendError;

use super::{validated_logits, Completion, DecodeParams, LlmBackend, LogitVector, SlmBackend};

type LlmScript = Box<dyn Fn(&str, &str) -> Result<Completion, BackendError> + Send + Sync>;
type SlmScript = Box<dyn Fn(&TaskSpec, &Example) -> Result<Vec<f64>, BackendError> + Send + Sync>;

/// Chat backend driven by a closure or a prompt-hash table.
pub struct ScriptedLlm {
    backend_id: String,
    model_name: String,
    script: LlmScript,
    calls: AtomicUsize,
}

impl ScriptedLlm {
    /// Answer every prompt with `f(system_text, user_text)`.
    pub fn from_fn(
        backend_id: impl Into<String>,
        f: impl Fn(&str, &str) -> String + Send + Sync + 'static,
    ) -> Self {
        let backend_id = backend_id.into();
        ScriptedLlm {
            model_name: backend_id.clone(),
            backend_id,
            script: Box::new(move |system, user| {
                Ok(Completion {
                    text: f(system, user),
                    truncated: false,
                })
            }),
            calls: AtomicUsize::new(0),
        }
    }

    /// Answer from a `prompt_hash -> completion` table; misses are errors,
    /// like a fixture.
    pub fn from_hash_map(
        backend_id: impl Into<String>,
        completions: HashMap<String, String>,
    ) -> Self {
        let backend_id = backend_id.into();
        let id_for_err = backend_id.clone();
        ScriptedLlm {
            model_name: backend_id.clone(),
            backend_id,
            script: Box::new(move |system, user| {
                let hash = crate::prompt::prompt_hash(system, user);
                completions
                    .get(&hash)
                    .map(|text| Completion {
                        text: text.clone(),
                        truncated: false,
                    })
                    .ok_or_else(|| BackendError::FixtureMiss {
                        backend_id: id_for_err.clone(),
                        key: format!("(prompt_hash={hash})"),
                    })
            }),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_model_name(mut self, model_name: impl Into<String>) -> Self {
        self.model_name = model_name.into();
        self
    }

    /// How many completions this backend has served.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmBackend for ScriptedLlm {
    fn id(&self) -> &str {
        &self.backend_id
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn complete_greedy(
        &self,
        system_text: &str,
        user_text: &str,
        _decode: &DecodeParams,
    ) -> Result<Completion, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.script)(system_text, user_text)
    }
}

/// Classifier backend driven by a closure.
pub struct ScriptedSlm {
    backend_id: String,
    model_name: String,
    script: SlmScript,
    calls: AtomicUsize,
}

impl ScriptedSlm {
    pub fn from_fn(
        backend_id: impl Into<String>,
        f: impl Fn(&TaskSpec, &Example) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        let backend_id = backend_id.into();
        ScriptedSlm {
            model_name: backend_id.clone(),
            backend_id,
            script: Box::new(move |task, example| Ok(f(task, example))),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_model_name(mut self, model_name: impl Into<String>) -> Self {
        self.model_name = model_name.into();
        self
    }

    /// How many classify calls this backend has served.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl SlmBackend for ScriptedSlm {
    fn id(&self) -> &str {
        &self.backend_id
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn classify(&self, task: &TaskSpec, example: &Example) -> Result<LogitVector, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let values = (self.script)(task, example)?;
        validated_logits(values, task, &self.backend_id)
    }
}
