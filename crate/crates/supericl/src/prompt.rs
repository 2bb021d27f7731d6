//! Prompt assembly: the system text with its model-mention sentence and
//! demonstration block, the user text ending in the answer slot, and the
//! stable hash that keys completion caching.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{fill_template, TaskSpec};
use crate::ensemble::AnnotationSet;

/// Slot in a system template where the model-mention sentence goes.
pub const SLM_SENTENCE_SLOT: &str = "{slm_sentence}";
/// Slot in a system template where rendered demonstrations go.
pub const DEMONSTRATIONS_SLOT: &str = "{demonstrations}";

/// The answer slot every user text ends with. The trailing space is part of
/// the contract: completions are parsed from what follows it.
pub const ANSWER_SLOT: &str = "Label: ";

/// Which prompt components are included. All three on is the full method;
/// all three off (with an empty ensemble) is plain in-context learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// SLM predictions on the in-context demonstrations.
    pub include_context_predictions: bool,
    /// Confidence scores next to predictions, wherever predictions appear.
    pub include_confidences: bool,
    /// SLM predictions on the test input.
    pub include_test_predictions: bool,
}

impl AblationFlags {
    pub fn all_enabled() -> Self {
        AblationFlags {
            include_context_predictions: true,
            include_confidences: true,
            include_test_predictions: true,
        }
    }

    pub fn none() -> Self {
        AblationFlags {
            include_context_predictions: false,
            include_confidences: false,
            include_test_predictions: false,
        }
    }

    pub fn any(&self) -> bool {
        self.include_context_predictions
            || self.include_confidences
            || self.include_test_predictions
    }

    /// Compact form for run ids and reports, e.g. `ctxt+conf+test` or `none`.
    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if self.include_context_predictions {
            parts.push("ctxt");
        }
        if self.include_confidences {
            parts.push("conf");
        }
        if self.include_test_predictions {
            parts.push("test");
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }
}

/// One in-context demonstration, ready to render: the example's input block,
/// the ensemble's annotations on it (empty when context predictions are
/// ablated), and its gold label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationBlock {
    pub rendered_input: String,
    pub annotations: AnnotationSet,
    pub gold_label: String,
}

/// A fully assembled prompt. `user_text` always ends with the answer slot;
/// `prompt_hash` is stable across runs and keys the completion cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub prompt_hash: String,
}

/// Render a confidence for display: two decimals, halves rounding away from
/// zero, so 0.125 prints as `0.13`. (The `{:.2}` formatter rounds to even.)
pub fn format_confidence(confidence: f64) -> String {
    format_percentish(confidence, 100.0)
}

/// Render a [0,1] metric value as a percentage with two decimals, e.g. 0.9415
/// as `94.15`. Same rounding rule as `format_confidence`.
pub fn format_percent(value: f64) -> String {
    format_percentish(value, 10_000.0)
}

fn format_percentish(value: f64, scale: f64) -> String {
    // Round half away from zero at two decimals: scale to hundredths first.
    let scaled = value * scale;
    let hundredths = if scaled >= 0.0 {
        (scaled + 0.5).floor() as i64
    } else {
        (scaled - 0.5).ceil() as i64
    };
    let sign = if hundredths < 0 { "-" } else { "" };
    format!(
        "{sign}{}.{:02}",
        (hundredths / 100).abs(),
        (hundredths % 100).abs()
    )
}

/// The sentence naming the ensemble members, or `None` for an empty ensemble.
/// One model: "X is a language model fine-tuned on this task, and you may use
/// its output as an aid to your judgement." Several models pluralize and list
/// them with a serial comma.
pub fn slm_mention_sentence(slm_names: &[String]) -> Option<String> {
    let joined = match slm_names.len() {
        0 => return None,
        1 => slm_names[0].clone(),
        2 => format!("{} and {}", slm_names[0], slm_names[1]),
        n => {
            let head = slm_names[..n - 1].join(", ");
            format!("{head}, and {}", slm_names[n - 1])
        }
    };
    Some(if slm_names.len() == 1 {
        format!(
            "{joined} is a language model fine-tuned on this task, \
             and you may use its output as an aid to your judgement."
        )
    } else {
        format!(
            "{joined} are language models fine-tuned on this task, \
             and you may use their outputs as an aid to your judgement."
        )
    })
}

/// Fill the task's system template: the model-mention sentence (preceded by a
/// separating space) when the ensemble is non-empty, and the demonstrations
/// text (likewise) when there is one. Both slots collapse cleanly to nothing,
/// leaving no double spaces or trailing whitespace.
pub fn system_prompt(task: &TaskSpec, slm_names: &[String], demonstrations_text: &str) -> String {
    let mention = match slm_mention_sentence(slm_names) {
        Some(sentence) => format!(" {sentence}"),
        None => String::new(),
    };
    let demonstrations = if demonstrations_text.is_empty() {
        String::new()
    } else {
        format!(" {demonstrations_text}")
    };
    fill_template(&task.system_template, |name| match name {
        "slm_sentence" => Some(mention.as_str()),
        "demonstrations" => Some(demonstrations.as_str()),
        _ => None,
    })
}

fn annotation_lines(annotations: &AnnotationSet, flags: &AblationFlags, out: &mut Vec<String>) {
    for a in annotations.annotations() {
        if flags.include_confidences {
            out.push(format!(
                "{} prediction: {} (confidence: {})",
                a.model_id,
                a.predicted_label,
                format_confidence(a.confidence)
            ));
        } else {
            out.push(format!("{} prediction: {}", a.model_id, a.predicted_label));
        }
    }
}

/// Render one demonstration: input block, then (if enabled) one prediction
/// line per ensemble member in ensemble order, then the gold label.
pub fn render_demonstration(block: &DemonstrationBlock, flags: &AblationFlags) -> String {
    let mut lines = vec![block.rendered_input.clone()];
    if flags.include_context_predictions {
        annotation_lines(&block.annotations, flags, &mut lines);
    }
    lines.push(format!("{ANSWER_SLOT}{}", block.gold_label));
    lines.join("\n")
}

/// Render the test block: input, (if enabled) the ensemble's predictions on
/// it, and the open answer slot. Always ends with `"Label: "`.
pub fn render_test(
    rendered_input: &str,
    annotations: &AnnotationSet,
    flags: &AblationFlags,
) -> String {
    let mut lines = vec![rendered_input.to_string()];
    if flags.include_test_predictions {
        annotation_lines(annotations, flags, &mut lines);
    }
    lines.push(ANSWER_SLOT.to_string());
    lines.join("\n")
}

/// Assemble the full prompt for one test example. Demonstrations are joined
/// by blank lines inside the system text; the test block is the user text.
pub fn build_prompt(
    task: &TaskSpec,
    demonstrations: &[DemonstrationBlock],
    test_rendered_input: &str,
    test_annotations: &AnnotationSet,
    slm_names: &[String],
    flags: &AblationFlags,
) -> PromptBundle {
    let demos_text = demonstrations
        .iter()
        .map(|b| render_demonstration(b, flags))
        .collect::<Vec<_>>()
        .join("\n\n");
    let system_text = system_prompt(task, slm_names, &demos_text);
    let user_text = render_test(test_rendered_input, test_annotations, flags);
    let prompt_hash = prompt_hash(&system_text, &user_text);
    PromptBundle {
        system_text,
        user_text,
        prompt_hash,
    }
}

/// SHA-256 over the two prompt parts, each length-prefixed (u64 LE byte
/// count) so ("ab", "c") and ("a", "bc") cannot collide. Lowercase hex.
pub fn prompt_hash(system_text: &str, user_text: &str) -> String {
    let mut hasher = Sha256::new();
    for part in [system_text, user_text] {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hex::encode(hasher.finalize())
}
