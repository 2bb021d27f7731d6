//! Evaluation harness for in-context learning with small-model ensemble
//! annotations: each prompt carries a few demonstrations plus the predicted
//! label and confidence of one or more fine-tuned classifiers, and a chat
//! model answers with greedy decoding.
//!
//! The crate covers the full experimental loop:
//!
//! - [`dataset`] — built-in task descriptions (SST-2, MRPC, MNLI, CoLA,
//!   MedMCQA), TSV/JSONL split loading, and seeded demonstration sampling
//!   with a stable shuffle.
//! - [`ensemble`] — logits to (label, confidence) annotations, plus majority
//!   and confidence-weighted voting baselines.
//! - [`prompt`] — deterministic prompt assembly with component toggles
//!   (demonstration predictions, confidences, test predictions) and a
//!   content hash for caching.
//! - [`backend`] — pluggable chat and classifier backends: HTTP endpoints,
//!   file-backed fixtures, and scripted in-process test doubles.
//! - [`experiment`] — the run loop (sample, annotate, prompt, complete,
//!   parse, score), grid sweeps over ensembles and shot counts, the
//!   four-variant prompt-component ablation, and seed-sensitivity studies.
//! - [`store`] — checksummed annotation/completion caches that make reruns
//!   byte-replayable, run records and manifests, and markdown reporting.
//! - [`config`] / [`cli`] — a TOML experiment file plus the `supericl`
//!   binary's subcommands (`tasks`, `annotate`, `run`, `sweep`, `ablate`,
//!   `seeds`, `report`).
//!
//! # Where to start
//!
//! Each major capability has a runnable walkthrough under `examples/`:
//!
//! ```text
//! cargo run --example tasks_and_datasets     # task specs, loading, sampling
//! cargo run --example annotations_and_votes  # logits -> annotations, voting
//! cargo run --example prompt_construction    # full prompt text, ablations
//! cargo run --example mock_experiment        # an end-to-end run, replayed
//! cargo run --example ensemble_sweep         # the (ensemble, shots) grid
//! cargo run --example ablation_study         # prompt-component variants
//! cargo run --example seed_sensitivity       # variance across seeds
//! cargo run --example live_endpoints         # wiring real HTTP backends
//! ```
//!
//! The same flows are scriptable through the binary; see `supericl --help`.

pub mod backend;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod prompt;
pub mod store;

pub use error::Error;
