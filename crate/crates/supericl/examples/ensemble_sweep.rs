//! Sweeping every classifier combination against every shot setting, and
//! rendering the grid — the search that finds a task's best ensemble.
//!
//! Run with: `cargo run --example ensemble_sweep`

use std::sync::Arc;

use supericl::backend::BackendRegistry;
use supericl::experiment::{combination_label, enumerate_ensembles, sweep, ExperimentConfig};
use supericl::store::{render_report, ReportShape, Stores};

#[path = "support/mod.rs"]
mod support;

fn main() {
    let data = support::synthetic_sentiment(60, 40);

    // Three classifiers of decreasing reliability (wrong every 13th, 7th, and
    // 3rd example), so combinations genuinely differ.
    let mut backends = BackendRegistry::new();
    backends.register_slm(Arc::new(support::gold_reader_slm(
        "slm-roberta",
        "RoBERTa-Large",
        13,
    )));
    backends.register_slm(Arc::new(support::gold_reader_slm(
        "slm-deberta",
        "DeBERTa-Large",
        7,
    )));
    backends.register_slm(Arc::new(support::gold_reader_slm(
        "slm-electra",
        "ELECTRA-Large",
        3,
    )));
    backends.register_llm(Arc::new(support::hint_reader_llm(
        "llm",
        "scripted-chat",
        &["positive", "negative"],
    )));

    let slm_ids = vec![
        "slm-roberta".to_string(),
        "slm-deberta".to_string(),
        "slm-electra".to_string(),
    ];
    let mut ensembles = enumerate_ensembles(&slm_ids, 2, 3).expect("enumerate combinations");
    // Prepend the classifier-free baseline so the grid shows it too.
    ensembles.insert(0, Vec::new());

    println!("# Combinations under sweep\n");
    for ensemble in &ensembles {
        let names: Vec<String> = ensemble
            .iter()
            .map(|id| id.replace("slm-", "").to_uppercase())
            .collect();
        println!(
            "  {:<24} ({} members)",
            if ensemble.is_empty() {
                "ICL".to_string()
            } else {
                combination_label(&names)
            },
            ensemble.len(),
        );
    }

    let workdir = tempfile::tempdir().expect("create a scratch directory");
    let stores = Stores::open(&workdir.path().join("cache"), &workdir.path().join("runs"))
        .expect("open stores");

    let base = ExperimentConfig::new("sst2", "llm")
        .with_seed(42)
        .with_parallelism(4);
    let shot_settings = [0usize, 8];

    println!(
        "\n# Running {} cells...\n",
        ensembles.len() * shot_settings.len()
    );
    let outcome = sweep(&base, &data, &ensembles, &shot_settings, &backends, &stores)
        .expect("sweep completes");

    for cell in &outcome.cells {
        match (&cell.result, &cell.run_id) {
            (Ok(report), Some(run_id)) => println!(
                "  {:<10} {} shots -> {:>7.2} ({run_id})",
                cell.label,
                cell.shots,
                report.value * 100.0,
            ),
            (Err(e), _) => println!("  {:<10} {} shots -> failed: {e}", cell.label, cell.shots),
            (Ok(_), None) => unreachable!("successful cells carry a run id"),
        }
    }

    // Re-render the grid from the persisted manifests.
    let manifests: Vec<_> = outcome
        .cells
        .iter()
        .filter_map(|c| c.run_id.as_ref())
        .map(|run_id| stores.runs.load_manifest(run_id).expect("manifest exists"))
        .collect();
    let grid = render_report(&manifests, ReportShape::Sweep).expect("render sweep grid");
    println!("\n{grid}");
    println!("Every cell above is backed by a manifest + records under the runs directory;");
    println!(
        "repeated sweeps reuse the caches, so adding one shot setting only runs the new cells."
    );
}
