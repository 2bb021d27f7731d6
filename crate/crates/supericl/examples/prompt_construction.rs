//! Assembling full prompts: system text, demonstrations, classifier hints,
//! the answer slot, and the effect of each ablation flag.
//!
//! Run with: `cargo run --example prompt_construction`

use supericl::backend::LogitVector;
use supericl::dataset::render_input;
use supericl::ensemble::{annotate, AnnotationSet, ConfidenceMode};
use supericl::prompt::{build_prompt, AblationFlags, DemonstrationBlock};

#[path = "support/mod.rs"]
mod support;

fn annotations_for(
    task: &supericl::dataset::TaskSpec,
    logit_pairs: &[(&str, [f64; 2])],
) -> AnnotationSet {
    let annotations = logit_pairs
        .iter()
        .map(|(model, values)| {
            annotate(
                &LogitVector::new(values.to_vec()).unwrap(),
                &task.label_space,
                model,
                ConfidenceMode::Sigmoid,
            )
            .unwrap()
        })
        .collect();
    AnnotationSet::new(annotations).unwrap()
}

fn main() {
    let data = support::synthetic_sentiment(4, 2);
    let task = &data.task;
    let slm_names = vec!["RoBERTa-Large".to_string(), "ELECTRA-Large".to_string()];

    // One demonstration, annotated by both classifiers.
    let demo_example = &data.train.examples()[0];
    let demo = DemonstrationBlock {
        rendered_input: render_input(demo_example, task),
        annotations: annotations_for(
            task,
            &[
                ("RoBERTa-Large", [4.6, -4.6]),
                ("ELECTRA-Large", [3.4, -3.4]),
            ],
        ),
        gold_label: demo_example.gold_label.clone().unwrap(),
    };

    // The test example, with its own annotations.
    let test_example = &data.eval.examples()[1];
    let test_input = render_input(test_example, task);
    let test_annotations = annotations_for(
        task,
        &[
            ("RoBERTa-Large", [-3.9, 3.9]),
            ("ELECTRA-Large", [-2.9, 2.9]),
        ],
    );

    println!("# Full prompt (all components on)\n");
    let full = build_prompt(
        task,
        std::slice::from_ref(&demo),
        &test_input,
        &test_annotations,
        &slm_names,
        &AblationFlags::all_enabled(),
    );
    println!("--- system ---\n{}\n", full.system_text);
    println!("--- user ---\n{}", full.user_text);
    println!("--- hash ---\n{}\n", full.prompt_hash);

    println!("# The same prompt under each ablation variant\n");
    let variants = [
        (
            "test predictions only",
            AblationFlags {
                include_context_predictions: false,
                include_confidences: false,
                include_test_predictions: true,
            },
        ),
        (
            "+ demonstration predictions",
            AblationFlags {
                include_context_predictions: true,
                include_confidences: false,
                include_test_predictions: true,
            },
        ),
        (
            "+ confidences",
            AblationFlags {
                include_context_predictions: false,
                include_confidences: true,
                include_test_predictions: true,
            },
        ),
        ("full prompt", AblationFlags::all_enabled()),
    ];
    for (name, flags) in &variants {
        let bundle = build_prompt(
            task,
            std::slice::from_ref(&demo),
            &test_input,
            &test_annotations,
            &slm_names,
            flags,
        );
        println!(
            "{name:<28} [{}]  hash {}...",
            flags.describe(),
            &bundle.prompt_hash[..12]
        );
    }

    println!("\n# Classifier-free prompt (plain in-context learning)\n");
    let plain = build_prompt(
        task,
        &[DemonstrationBlock {
            rendered_input: demo.rendered_input.clone(),
            annotations: AnnotationSet::empty(),
            gold_label: demo.gold_label.clone(),
        }],
        &test_input,
        &AnnotationSet::empty(),
        &[],
        &AblationFlags::none(),
    );
    println!("--- system ---\n{}\n", plain.system_text);
    println!("--- user ---\n{}", plain.user_text);
    println!(
        "\nNote: without classifiers the system text drops the model-mention\n\
         sentence entirely, and no `prediction:` lines appear anywhere."
    );
}
