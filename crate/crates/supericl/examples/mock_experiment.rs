//! A complete offline run: synthetic data, scripted backends, caches, the
//! run store, and the rendered report — then a rerun to show cache reuse.
//!
//! Run with: `cargo run --example mock_experiment`

use std::sync::Arc;

use supericl::backend::BackendRegistry;
use supericl::experiment::{run_experiment, ExperimentConfig};
use supericl::store::{render_report, ReportShape, Stores};

#[path = "support/mod.rs"]
mod support;

fn main() {
    let data = support::synthetic_sentiment(60, 40);

    // Two classifiers with different error patterns, and a chat model that
    // weighs their hints.
    let roberta = Arc::new(support::gold_reader_slm("slm-roberta", "RoBERTa-Large", 7));
    let electra = Arc::new(support::gold_reader_slm("slm-electra", "ELECTRA-Large", 9));
    let llm = Arc::new(support::hint_reader_llm(
        "llm",
        "scripted-chat",
        &["positive", "negative"],
    ));
    let mut backends = BackendRegistry::new();
    backends.register_slm(roberta.clone());
    backends.register_slm(electra.clone());
    backends.register_llm(llm.clone());

    let workdir = tempfile::tempdir().expect("create a scratch directory");
    let stores = Stores::open(&workdir.path().join("cache"), &workdir.path().join("runs"))
        .expect("open stores");

    let config = ExperimentConfig::new("sst2", "llm")
        .with_shots(8)
        .with_seed(42)
        .with_ensemble(["slm-roberta", "slm-electra"])
        .with_parallelism(4);

    println!("# First run (cold caches)\n");
    let outcome = run_experiment(&config, &data, &backends, &stores).expect("run succeeds");
    println!(
        "run `{}`: {} = {} on {} examples ({} parse failures)",
        outcome.run_id,
        outcome.report.metric,
        outcome.manifest.metric.as_ref().unwrap().percent,
        outcome.report.n_eval,
        outcome.report.n_parse_failures,
    );
    println!(
        "backend traffic: {} + {} classifier calls, {} chat calls",
        roberta.calls(),
        electra.calls(),
        llm.calls(),
    );
    println!(
        "artifacts: {}/ holds manifest.json, records.jsonl, report.md",
        stores.runs.run_dir(&outcome.run_id).display(),
    );

    println!("\n# Sample records\n");
    for record in outcome.records.iter().take(3) {
        println!(
            "  {}: gold {:<8} -> parsed {:<8} correct={} (prompt {}...)",
            record.example_id,
            record.gold_label,
            record.parsed_label.as_deref().unwrap_or("-"),
            record.correct,
            &record.prompt_hash[..12],
        );
    }

    println!("\n# Rendered report\n");
    let report = render_report(std::slice::from_ref(&outcome.manifest), ReportShape::Main)
        .expect("render report");
    println!("{report}");

    println!("# Second run (warm caches)\n");
    let calls_before = (roberta.calls(), electra.calls(), llm.calls());
    let rerun = run_experiment(&config, &data, &backends, &stores).expect("rerun succeeds");
    let calls_after = (roberta.calls(), electra.calls(), llm.calls());
    println!(
        "score unchanged: {} (run `{}`)",
        rerun.manifest.metric.as_ref().unwrap().percent,
        rerun.run_id,
    );
    println!(
        "new backend calls: {} classifier, {} chat — every result came from cache",
        (calls_after.0 - calls_before.0) + (calls_after.1 - calls_before.1),
        calls_after.2 - calls_before.2,
    );
    assert_eq!(
        calls_before, calls_after,
        "warm rerun must not call backends"
    );
}
