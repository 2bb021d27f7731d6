//! Fixture backend: replays recorded model outputs from a JSONL file, for
//! offline runs and tests. One file may hold classifier entries, chat
//! entries, or both.

use std::collections::HashMap;
use std::fs;

use serde::Deserialize;

use crate::dataset::{Example, TaskSpec};
use crate::error::BackendError;

use super::{
    validated_logits, BackendKind, BackendSpec, Completion, DecodeParams, LlmBackend, LogitVector,
    SlmBackend,
};

/// One line of a fixture file. The two shapes have disjoint required fields,
/// so untagged deserialization is unambiguous.
#[derive(Deserialize)]
#[serde(untagged)]
enum FixtureEntry {
    /// Classifier logits for one (backend, task, example).
    Logits {
        backend_id: String,
        task_id: String,
        example_id: String,
        logits: Vec<f64>,
    },
    /// Chat completion for one prompt hash.
    Completion {
        prompt_hash: String,
        completion: String,
        #[serde(default)]
        truncated: bool,
    },
}

/// Replays recorded outputs. Lookups that miss are hard errors naming the
/// key — a fixture that silently invents data would defeat its purpose.
#[derive(Debug)]
pub struct FixtureBackend {
    spec: BackendSpec,
    logits: HashMap<(String, String, String), Vec<f64>>,
    completions: HashMap<String, Completion>,
}

impl FixtureBackend {
    pub fn from_spec(spec: BackendSpec) -> Result<Self, BackendError> {
        if spec.kind != BackendKind::Fixture {
            return Err(BackendError::Init {
                backend_id: spec.backend_id.clone(),
                message: format!("expected kind fixture, got {:?}", spec.kind),
            });
        }
        let text = fs::read_to_string(&spec.endpoint_url).map_err(|e| BackendError::Init {
            backend_id: spec.backend_id.clone(),
            message: format!("cannot read fixture file {}: {e}", spec.endpoint_url),
        })?;
        let mut logits = HashMap::new();
        let mut completions = HashMap::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry =
                serde_json::from_str(line).map_err(|e| BackendError::Init {
                    backend_id: spec.backend_id.clone(),
                    message: format!(
                        "fixture {} line {}: not a logits or completion entry: {e}",
                        spec.endpoint_url,
                        line_no + 1
                    ),
                })?;
            match entry {
                FixtureEntry::Logits {
                    backend_id,
                    task_id,
                    example_id,
                    logits: values,
                } => {
                    logits.insert((backend_id, task_id, example_id), values);
                }
                FixtureEntry::Completion {
                    prompt_hash,
                    completion,
                    truncated,
                } => {
                    completions.insert(
                        prompt_hash,
                        Completion {
                            text: completion,
                            truncated,
                        },
                    );
                }
            }
        }
        Ok(FixtureBackend {
            spec,
            logits,
            completions,
        })
    }
}

impl SlmBackend for FixtureBackend {
    fn id(&self) -> &str {
        &self.spec.backend_id
    }

    fn model_name(&self) -> &str {
        &self.spec.model_name
    }

    fn classify(&self, task: &TaskSpec, example: &Example) -> Result<LogitVector, BackendError> {
        let key = (
            self.spec.backend_id.clone(),
            task.task_id.clone(),
            example.example_id.clone(),
        );
        let values = self
            .logits
            .get(&key)
            .ok_or_else(|| BackendError::FixtureMiss {
                backend_id: self.spec.backend_id.clone(),
                key: format!(
                    "(backend_id={}, task_id={}, example_id={})",
                    key.0, key.1, key.2
                ),
            })?;
        validated_logits(values.clone(), task, &self.spec.backend_id)
    }
}

impl LlmBackend for FixtureBackend {
    fn id(&self) -> &str {
        &self.spec.backend_id
    }

    fn model_name(&self) -> &str {
        &self.spec.model_name
    }

    fn complete_greedy(
        &self,
        system_text: &str,
        user_text: &str,
        _decode: &DecodeParams,
    ) -> Result<Completion, BackendError> {
        let hash = crate::prompt::prompt_hash(system_text, user_text);
        self.completions
            .get(&hash)
            .cloned()
            .ok_or_else(|| BackendError::FixtureMiss {
                backend_id: self.spec.backend_id.clone(),
                key: format!("(prompt_hash={hash})"),
            })
    }
}
