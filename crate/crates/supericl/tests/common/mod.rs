//! Shared scaffolding for the integration tests: synthetic datasets, scripted
//! backend recipes, and wrappers that observe backend traffic.

// Each test binary uses a different slice of this module.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use supericl::backend::{
    Completion, DecodeParams, LlmBackend, LogitVector, ScriptedLlm, ScriptedSlm, SlmBackend,
};
use supericl::dataset::{builtin_task, DatasetSplit, Example, SplitName, TaskSpec};
use supericl::error::BackendError;
use supericl::experiment::ExperimentData;

/// One single-field example; `sentence` doubles as the tests' steering
/// channel, since scripted models see only what real models would see.
pub fn sentence_example(id: &str, sentence: &str, gold: Option<&str>) -> Example {
    let mut fields = BTreeMap::new();
    fields.insert("sentence".to_string(), sentence.to_string());
    Example::new(id, fields, gold.map(str::to_string))
}

/// Synthetic sentiment data with alternating gold labels. Sentences embed the
/// example id and gold label so scripted backends can act on them.
pub fn synthetic_sentiment(n_train: usize, n_eval: usize) -> ExperimentData {
    let task = builtin_task("sst2").expect("sst2 is built in");
    let split = |name: SplitName, prefix: &str, n: usize| {
        let examples = (0..n)
            .map(|i| {
                let gold = if i % 2 == 0 { "positive" } else { "negative" };
                sentence_example(
                    &format!("{prefix}{i}"),
                    &format!("synthetic review {prefix}{i} leaning {gold}"),
                    Some(gold),
                )
            })
            .collect();
        DatasetSplit::new("sst2", name, examples).expect("synthetic split is valid")
    };
    ExperimentData::new(
        task,
        split(SplitName::Train, "t", n_train),
        split(SplitName::Eval, "e", n_eval),
    )
    .expect("synthetic dataset is valid")
}

/// A classifier that reads the gold label and is always right, with a fixed
/// logit margin.
pub fn oracle_slm(backend_id: &str, model_name: &str, margin: f64) -> ScriptedSlm {
    ScriptedSlm::from_fn(backend_id, move |task: &TaskSpec, example: &Example| {
        let gold = example
            .gold_label
            .as_deref()
            .and_then(|g| task.label_space.index_of(g))
            .expect("scripted oracle needs gold labels");
        (0..task.label_space.len())
            .map(|i| if i == gold { margin } else { -margin })
            .collect()
    })
    .with_model_name(model_name)
}

/// A chat model that echoes the majority of the test block's `prediction:`
/// lines and falls back to `fallback` when the prompt carries no hints.
pub fn hint_reader_llm(backend_id: &str, model_name: &str, fallback: &str) -> ScriptedLlm {
    let fallback = fallback.to_string();
    ScriptedLlm::from_fn(backend_id, move |_system: &str, user: &str| {
        let votes: Vec<&str> = user
            .lines()
            .filter_map(|line| line.split(" prediction: ").nth(1))
            .map(|rest| rest.split(" (confidence").next().unwrap_or(rest).trim())
            .collect();
        if votes.is_empty() {
            return fallback.clone();
        }
        let mut best = (0usize, votes[0]);
        for candidate in &votes {
            let count = votes.iter().filter(|v| *v == candidate).count();
            if count > best.0 {
                best = (count, candidate);
            }
        }
        best.1.to_string()
    })
    .with_model_name(model_name)
}

/// Pass-through classifier wrapper that counts calls, for asserting cache
/// behaviour around backends that keep no counters of their own.
pub struct CountingSlm<B: SlmBackend> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: SlmBackend> CountingSlm<B> {
    pub fn new(inner: B) -> Self {
        CountingSlm {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: SlmBackend> SlmBackend for CountingSlm<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn classify(&self, task: &TaskSpec, example: &Example) -> Result<LogitVector, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.classify(task, example)
    }
}

/// Pass-through chat wrapper that keeps every prompt it forwards, so tests
/// can assert on the exact text the inner model received.
pub struct CapturingLlm<B: LlmBackend> {
    inner: B,
    prompts: Mutex<Vec<(String, String)>>,
}

impl<B: LlmBackend> CapturingLlm<B> {
    pub fn new(inner: B) -> Self {
        CapturingLlm {
            inner,
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn prompts(&self) -> Vec<(String, String)> {
        self.prompts.lock().expect("prompt log lock").clone()
    }
}

impl<B: LlmBackend> LlmBackend for CapturingLlm<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn complete_greedy(
        &self,
        system_text: &str,
        user_text: &str,
        decode: &DecodeParams,
    ) -> Result<Completion, BackendError> {
        self.prompts
            .lock()
            .expect("prompt log lock")
            .push((system_text.to_string(), user_text.to_string()));
        self.inner.complete_greedy(system_text, user_text, decode)
    }
}
