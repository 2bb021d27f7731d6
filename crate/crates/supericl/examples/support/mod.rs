//! Shared scaffolding for the runnable examples: a synthetic sentiment
//! dataset and recipes for the crate's scripted in-process backends, so every
//! example runs offline with reproducible output.

// Each example uses a different slice of this module.
#![allow(dead_code)]

use std::collections::BTreeMap;

use supericl::backend::{ScriptedLlm, ScriptedSlm};
use supericl::dataset::{builtin_task, DatasetSplit, Example, SplitName, TaskSpec};
use supericl::experiment::ExperimentData;

/// Deterministic review-style sentences, alternating positive/negative gold.
fn sentiment_example(split: &str, index: usize) -> Example {
    let positive = index % 2 == 0;
    let subjects = [
        "the plot",
        "the script",
        "the cast",
        "the pacing",
        "the score",
    ];
    let subject = subjects[index % subjects.len()];
    let sentence = if positive {
        format!("{subject} is a quiet delight from start to finish (review {index})")
    } else {
        format!("{subject} is a joyless slog with nothing to say (review {index})")
    };
    let gold = if positive { "positive" } else { "negative" };
    let mut fields = BTreeMap::new();
    fields.insert("sentence".to_string(), sentence);
    Example::new(format!("{split}{index}"), fields, Some(gold.to_string()))
}

/// A synthetic sentiment dataset: `n_train` training and `n_eval` evaluation
/// examples with alternating gold labels and distinct ids (t0.., e0..).
pub fn synthetic_sentiment(n_train: usize, n_eval: usize) -> ExperimentData {
    let task = builtin_task("sst2").expect("sst2 is built in");
    let train = DatasetSplit::new(
        "sst2",
        SplitName::Train,
        (0..n_train).map(|i| sentiment_example("t", i)).collect(),
    )
    .expect("synthetic train split is valid");
    let eval = DatasetSplit::new(
        "sst2",
        SplitName::Eval,
        (0..n_eval).map(|i| sentiment_example("e", i)).collect(),
    )
    .expect("synthetic eval split is valid");
    ExperimentData::new(task, train, eval).expect("synthetic dataset is valid")
}

/// Numeric suffix of an example id like `e17`; examples here always have one.
fn index_of(example_id: &str) -> usize {
    example_id
        .trim_start_matches(|c: char| !c.is_ascii_digit())
        .parse()
        .unwrap_or(0)
}

/// A classifier that knows the gold label but errs on every `period`-th
/// example, with a logit margin that varies by example. `period` = 0 means
/// never wrong.
pub fn gold_reader_slm(backend_id: &str, model_name: &str, period: usize) -> ScriptedSlm {
    ScriptedSlm::from_fn(backend_id, move |task: &TaskSpec, example: &Example| {
        let gold = example
            .gold_label
            .as_deref()
            .and_then(|g| task.label_space.index_of(g))
            .expect("scripted classifier needs gold labels");
        let index = index_of(&example.example_id);
        let wrong = period != 0 && index % period == period - 1;
        let target = if wrong {
            (gold + 1) % task.label_space.len()
        } else {
            gold
        };
        // Margin between 1.0 and 4.0, varying per example.
        let margin = 1.0 + ((index * 7) % 31) as f64 / 10.0;
        (0..task.label_space.len())
            .map(|i| if i == target { margin } else { -margin })
            .collect()
    })
    .with_model_name(model_name)
}

/// A chat model that reads the classifier hints out of the prompt: it answers
/// with the majority of the test block's `prediction:` lines, and falls back
/// to a deterministic pseudo-random label when the prompt carries no hints.
pub fn hint_reader_llm(backend_id: &str, model_name: &str, labels: &[&str]) -> ScriptedLlm {
    let labels: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
    ScriptedLlm::from_fn(backend_id, move |system: &str, user: &str| {
        // Test-block classifier hints live in the user text; demonstrations
        // (and their hints) live in the system text and are ignored here.
        let votes: Vec<&str> = user
            .lines()
            .filter_map(|line| line.split(" prediction: ").nth(1))
            .map(|rest| rest.split(" (confidence").next().unwrap_or(rest).trim())
            .collect();
        if votes.is_empty() {
            // No hints: a label chosen by prompt hash, stable across reruns.
            let hash = supericl::prompt::prompt_hash(system, user);
            let byte = u8::from_str_radix(&hash[..2], 16).unwrap_or(0);
            return labels[byte as usize % labels.len()].clone();
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
