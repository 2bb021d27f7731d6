//! How classifier logits become prompt annotations, and how ensembles vote.
//!
//! Run with: `cargo run --example annotations_and_votes`

use supericl::backend::LogitVector;
use supericl::dataset::builtin_task;
use supericl::ensemble::{annotate, majority_vote, weighted_vote, AnnotationSet, ConfidenceMode};

fn main() {
    let task = builtin_task("sst2").unwrap();
    let labels = &task.label_space;

    println!("# From logits to an annotation\n");
    let logits = LogitVector::new(vec![2.1972246, -1.0]).unwrap();
    for mode in [ConfidenceMode::Sigmoid, ConfidenceMode::Softmax] {
        let annotation = annotate(&logits, labels, "RoBERTa-Large", mode).unwrap();
        println!(
            "logits {:?} under {mode}: predicted `{}` with confidence {:.4}",
            logits.values(),
            annotation.predicted_label,
            annotation.confidence,
        );
    }
    println!("(sigmoid squashes the winning logit alone; ln(9) = 2.1972... gives 0.9)\n");

    println!("# Ensemble voting\n");
    // Two hesitant supporters of `positive` (winning logits below zero, so
    // sigmoid confidence lands under 0.5) against one confident dissenter.
    let set = AnnotationSet::new(vec![
        annotate(
            &LogitVector::new(vec![-0.3, -2.0]).unwrap(),
            labels,
            "RoBERTa-Large",
            ConfidenceMode::Sigmoid,
        )
        .unwrap(),
        annotate(
            &LogitVector::new(vec![-0.2, -1.5]).unwrap(),
            labels,
            "ELECTRA-Large",
            ConfidenceMode::Sigmoid,
        )
        .unwrap(),
        annotate(
            &LogitVector::new(vec![-3.5, 3.5]).unwrap(),
            labels,
            "DeBERTa-Large",
            ConfidenceMode::Sigmoid,
        )
        .unwrap(),
    ])
    .unwrap();

    for a in set.annotations() {
        println!(
            "  {:<14} says {:<8} (confidence {:.2})",
            a.model_id, a.predicted_label, a.confidence
        );
    }
    let majority = majority_vote(&set.predicted_labels()).unwrap();
    let weighted = weighted_vote(&set).unwrap();
    println!("\nmajority vote:   {majority} (two of three, confidence ignored)");
    println!("weighted vote:   {weighted} (one confident dissenter can win)");
    println!(
        "\nThe prompts built by this crate hand the LLM the raw annotations and\n\
         let it arbitrate; these vote rules are reference combiners for analysis."
    );
}
