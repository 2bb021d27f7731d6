//! How much the demonstration sample matters: one configuration re-run under
//! several seeds, with the sample variance of the score.
//!
//! Run with: `cargo run --example seed_sensitivity`

use std::sync::Arc;

use supericl::backend::BackendRegistry;
use supericl::config::DEFAULT_SEEDS;
use supericl::experiment::{seed_sensitivity, ExperimentConfig};
use supericl::store::{render_report, ReportShape, Stores};

#[path = "support/mod.rs"]
mod support;

fn run_for(
    label: &str,
    config: &ExperimentConfig,
    data: &supericl::experiment::ExperimentData,
    backends: &BackendRegistry,
    stores: &Stores,
) {
    let outcome =
        seed_sensitivity(config, data, backends, stores, &DEFAULT_SEEDS).expect("seed study runs");
    println!("## {label}\n");
    for (seed, value) in DEFAULT_SEEDS.iter().zip(&outcome.percent_values) {
        println!("  seed {seed:>2}: {value:.2}");
    }
    println!(
        "  sample variance: {:.2}\n",
        outcome.variance.expect("five seeds give a variance"),
    );

    let manifests: Vec<_> = outcome.runs.iter().map(|r| r.manifest.clone()).collect();
    let table = render_report(&manifests, ReportShape::Seeds).expect("render seeds table");
    println!("{table}");
}

fn main() {
    let data = support::synthetic_sentiment(60, 40);
    let mut backends = BackendRegistry::new();
    backends.register_slm(Arc::new(support::gold_reader_slm(
        "slm-roberta",
        "RoBERTa-Large",
        7,
    )));
    backends.register_slm(Arc::new(support::gold_reader_slm(
        "slm-electra",
        "ELECTRA-Large",
        9,
    )));
    backends.register_llm(Arc::new(support::hint_reader_llm(
        "llm",
        "scripted-chat",
        &["positive", "negative"],
    )));

    let workdir = tempfile::tempdir().expect("create a scratch directory");
    let stores = Stores::open(&workdir.path().join("cache"), &workdir.path().join("runs"))
        .expect("open stores");

    println!(
        "Default seeds: {DEFAULT_SEEDS:?}. The seed controls which training\n\
         examples become demonstrations; everything else is held fixed.\n"
    );

    // Classifier-free in-context learning: the scripted chat model guesses
    // from the prompt hash, so its score swings with the demonstrations.
    let icl = ExperimentConfig::new("sst2", "llm")
        .with_shots(8)
        .with_parallelism(4);
    run_for("Plain in-context learning", &icl, &data, &backends, &stores);

    // With the two-classifier ensemble the hints dominate: scores flatten and
    // the variance collapses — the stabilizing effect the ensemble is for.
    let ensembled = icl.clone().with_ensemble(["slm-roberta", "slm-electra"]);
    run_for(
        "Two-classifier ensemble",
        &ensembled,
        &data,
        &backends,
        &stores,
    );
}
