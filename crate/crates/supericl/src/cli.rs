//! Command-line surface: `tasks`, `annotate`, `run`, `sweep`, `ablate`,
//! `seeds`, and `report`, all driven by one TOML experiment file plus flag
//! overrides. Every cache- or run-mutating invocation leaves a manifest.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{LoadedExperiment, Overrides};
use crate::dataset::{builtin_task, builtin_task_specs, Metric};
use crate::error::{exit_code, Error};
use crate::experiment::{
    ablation_suite, run_experiment, seed_sensitivity, sweep, warm_annotations, RunOutcome,
};
use crate::prompt::system_prompt;
use crate::store::{
    render_report, unix_ms, MetricSummary, ReportShape, RunCounts, RunManifest, RunStatus, RunStore,
};

/// Prints a line to stdout, exiting quietly when the reader has gone away
/// (`supericl report | head` closes the pipe early; that is not an error).
/// SIGPIPE stays ignored process-wide so dropped backend connections surface
/// as retryable I/O errors instead of killing the process.
macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        if let Err(e) = writeln!(std::io::stdout(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(exit_code::SUCCESS);
            }
            panic!("failed printing to stdout: {e}");
        }
    }};
}

#[derive(Debug, Parser)]
#[command(
    name = "supericl",
    version,
    about = "Run language-model evaluations with small-model ensemble annotations"
)]
pub struct Cli {
    /// Experiment file (TOML).
    #[arg(long, global = true, default_value = "experiment.toml")]
    pub config: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

/// Flag-level overrides of the experiment file's `[run]` section.
#[derive(Debug, Default, Args)]
pub struct OverrideArgs {
    /// Task id to run (defaults to the file's choice).
    #[arg(long)]
    pub task: Option<String>,

    /// Number of in-context demonstrations.
    #[arg(long)]
    pub shots: Option<usize>,

    /// Demonstration sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Comma-separated classifier backend ids; "" forces the plain baseline.
    #[arg(long)]
    pub ensemble: Option<String>,

    /// Include classifier predictions on the demonstrations.
    #[arg(long)]
    pub context_predictions: Option<bool>,

    /// Include confidence scores next to predictions.
    #[arg(long)]
    pub confidences: Option<bool>,

    /// Include classifier predictions on the test input.
    #[arg(long)]
    pub test_predictions: Option<bool>,

    /// Evaluate only the first N eval examples.
    #[arg(long)]
    pub limit: Option<usize>,

    /// Maximum concurrent backend calls.
    #[arg(long)]
    pub parallelism: Option<usize>,
}

impl OverrideArgs {
    fn to_overrides(&self) -> Overrides {
        Overrides {
            task: self.task.clone(),
            shots: self.shots,
            seed: self.seed,
            ensemble: self.ensemble.as_deref().map(parse_id_list),
            context_predictions: self.context_predictions,
            confidences: self.confidences,
            test_predictions: self.test_predictions,
            eval_limit: self.limit,
            parallelism: self.parallelism,
        }
    }
}

fn parse_id_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(String::from)
        .collect()
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List the built-in tasks.
    Tasks,

    /// Warm the annotation cache for the configured run, without the LLM.
    Annotate {
        #[command(flatten)]
        overrides: OverrideArgs,
    },

    /// Run one experiment end to end.
    Run {
        #[command(flatten)]
        overrides: OverrideArgs,
    },

    /// Run every (ensemble, shots) cell of the configured grid.
    Sweep {
        #[command(flatten)]
        overrides: OverrideArgs,
    },

    /// Run the four prompt-component variants around the configured run.
    Ablate {
        #[command(flatten)]
        overrides: OverrideArgs,
    },

    /// Re-run the configured experiment under several sampling seeds.
    Seeds {
        #[command(flatten)]
        overrides: OverrideArgs,

        /// Comma-separated seed list (defaults to the file's, or 42,0,1,2,3).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },

    /// Render a markdown report over recorded runs.
    Report {
        /// Comma-separated run ids (defaults to every run on disk).
        #[arg(long, value_delimiter = ',')]
        runs: Option<Vec<String>>,

        /// Table layout: main, ablation, sweep, or seeds.
        #[arg(long, default_value = "main")]
        shape: String,

        /// Also print the system prompt each run's prompts were built from.
        #[arg(long)]
        show_prompts: bool,

        /// Read runs from this directory instead of the configured one.
        #[arg(long)]
        runs_dir: Option<PathBuf>,
    },
}

/// Parse argv and execute; returns a process exit code.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let uses_stderr = e.use_stderr();
            let _ = e.print();
            return if uses_stderr {
                exit_code::CONFIG
            } else {
                exit_code::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => exit_code::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}

/// Execute one parsed invocation.
pub fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Tasks => cmd_tasks(&cli.config),
        Command::Annotate { overrides } => cmd_annotate(&cli.config, &overrides.to_overrides()),
        Command::Run { overrides } => cmd_run(&cli.config, &overrides.to_overrides()),
        Command::Sweep { overrides } => cmd_sweep(&cli.config, &overrides.to_overrides()),
        Command::Ablate { overrides } => cmd_ablate(&cli.config, &overrides.to_overrides()),
        Command::Seeds { overrides, seeds } => {
            cmd_seeds(&cli.config, &overrides.to_overrides(), seeds.clone())
        }
        Command::Report {
            runs,
            shape,
            show_prompts,
            runs_dir,
        } => cmd_report(
            &cli.config,
            runs.clone(),
            shape,
            *show_prompts,
            runs_dir.clone(),
        ),
    }
}

fn metric_long_name(metric: Metric) -> &'static str {
    match metric {
        Metric::Accuracy => "accuracy",
        Metric::MatthewsCorrelation => "matthews correlation",
    }
}

fn cmd_tasks(config_path: &Path) -> Result<(), Error> {
    for task in builtin_task_specs() {
        let eval_n = task
            .reference_eval_size
            .map(|n| n.to_string())
            .unwrap_or_else(|| "-".into());
        outln!(
            "{:<8} metric: {:<20} fields: {:<22} labels: {:<40} reference eval n: {}",
            task.task_id,
            metric_long_name(task.metric),
            task.input_fields.join(", "),
            task.label_space.describe(),
            eval_n
        );
    }
    if config_path.exists() {
        let loaded = LoadedExperiment::load(config_path)?;
        let declared = loaded.task_ids();
        if !declared.is_empty() {
            outln!(
                "\ndata declared in {}: {}",
                config_path.display(),
                declared.join(", ")
            );
        }
    }
    Ok(())
}

fn cmd_annotate(config_path: &Path, overrides: &Overrides) -> Result<(), Error> {
    let loaded = LoadedExperiment::load(config_path)?;
    let config = loaded.effective_config(overrides)?;
    let data = loaded.load_data(&config.task_id)?;
    let registry = loaded.build_registry()?;
    let stores = loaded.open_stores()?;

    let mut model_names = Vec::new();
    for id in &config.ensemble {
        model_names.push(registry.slm(id)?.model_name().to_string());
    }

    let started_unix_ms = unix_ms();
    let before = stores.annotations.stats();
    let summary = warm_annotations(&config, &data, &registry, &stores)?;
    let delta = stores.annotations.stats() - before;

    let run_id = stores
        .runs
        .allocate_run_id(&format!("{}-annotate", config.task_id))?;
    let manifest = RunManifest {
        run_id: run_id.clone(),
        config: config.clone(),
        ensemble_model_names: model_names,
        started_unix_ms,
        finished_unix_ms: unix_ms(),
        status: RunStatus::Complete,
        counts: RunCounts {
            eval_examples: summary.eval_examples,
            demonstrations: summary.demonstration_ids.len(),
            annotation_cache_hits: delta.hits,
            annotation_cache_misses: delta.misses,
            ..RunCounts::default()
        },
        metric: None,
        demonstration_ids: summary.demonstration_ids,
        shots_standard: crate::dataset::is_standard_shot_count(config.shots),
        ensemble_standard: config.ensemble.len() <= 5,
        records_file: None,
    };
    stores.runs.write_manifest(&manifest)?;

    outln!(
        "annotated {} example(s) for {} with {} model(s): {} cache hit(s), {} miss(es)",
        summary.sets_fetched,
        config.task_id,
        config.ensemble.len(),
        delta.hits,
        delta.misses
    );
    outln!("manifest: {}", stores.runs.manifest_path(&run_id).display());
    Ok(())
}

fn summarize_run(outcome: &RunOutcome) -> String {
    let metric = outcome
        .manifest
        .metric
        .as_ref()
        .map(|m: &MetricSummary| format!("{} {}", m.metric, m.percent))
        .unwrap_or_else(|| "-".into());
    format!(
        "run {}: {} over {} example(s), {} parse failure(s), {} truncated",
        outcome.run_id,
        metric,
        outcome.report.n_eval,
        outcome.report.n_parse_failures,
        outcome.manifest.counts.truncated
    )
}

/// Fail the invocation when most completions did not parse: that pattern
/// means the prompt and backend disagree, not that the model is weak.
fn check_parse_catastrophe(outcome: &RunOutcome) -> Result<(), Error> {
    if outcome.report.n_parse_failures * 2 > outcome.report.n_eval {
        return Err(Error::ParseCatastrophe {
            run_id: outcome.run_id.clone(),
            failures: outcome.report.n_parse_failures,
            total: outcome.report.n_eval,
        });
    }
    Ok(())
}

fn cmd_run(config_path: &Path, overrides: &Overrides) -> Result<(), Error> {
    let loaded = LoadedExperiment::load(config_path)?;
    let config = loaded.effective_config(overrides)?;
    let data = loaded.load_data(&config.task_id)?;
    let registry = loaded.build_registry()?;
    let stores = loaded.open_stores()?;

    let outcome = run_experiment(&config, &data, &registry, &stores)?;
    let markdown = render_report(std::slice::from_ref(&outcome.manifest), ReportShape::Main)?;
    let report_path = stores.runs.write_report(&outcome.run_id, &markdown)?;

    outln!("{markdown}");
    outln!("{}", summarize_run(&outcome));
    outln!("report: {}", report_path.display());
    check_parse_catastrophe(&outcome)
}

fn cmd_sweep(config_path: &Path, overrides: &Overrides) -> Result<(), Error> {
    let loaded = LoadedExperiment::load(config_path)?;
    let base = loaded.effective_config(overrides)?;
    let plan = loaded.sweep_plan()?;
    let data = loaded.load_data(&base.task_id)?;
    let registry = loaded.build_registry()?;
    let stores = loaded.open_stores()?;

    let outcome = sweep(
        &base,
        &data,
        &plan.ensembles,
        &plan.shots,
        &registry,
        &stores,
    )?;
    let mut manifests = Vec::new();
    for cell in &outcome.cells {
        if let Some(run_id) = &cell.run_id {
            manifests.push(stores.runs.load_manifest(run_id)?);
        }
        if let Err(message) = &cell.result {
            eprintln!(
                "cell {} @ {}-shot failed: {message}",
                cell.label, cell.shots
            );
        }
    }
    if manifests.is_empty() {
        return Err(Error::Invalid("every sweep cell failed".into()));
    }
    let markdown = render_report(&manifests, ReportShape::Sweep)?;
    let report_path = stores
        .runs
        .write_summary_report(&format!("sweep-{}", base.task_id), &markdown)?;
    outln!("{markdown}");
    outln!(
        "{} cell(s), {} failed; report: {}",
        outcome.cells.len(),
        outcome.failed_cells(),
        report_path.display()
    );
    Ok(())
}

fn cmd_ablate(config_path: &Path, overrides: &Overrides) -> Result<(), Error> {
    let loaded = LoadedExperiment::load(config_path)?;
    let base = loaded.effective_config(overrides)?;
    let data = loaded.load_data(&base.task_id)?;
    let registry = loaded.build_registry()?;
    let stores = loaded.open_stores()?;

    let outcome = ablation_suite(&base, &data, &registry, &stores)?;
    let manifests: Vec<RunManifest> = outcome
        .variants
        .iter()
        .map(|(_, run)| run.manifest.clone())
        .collect();
    let markdown = render_report(&manifests, ReportShape::Ablation)?;
    let report_path = stores
        .runs
        .write_summary_report(&format!("ablation-{}", base.task_id), &markdown)?;
    outln!("{markdown}");
    for (label, run) in &outcome.variants {
        outln!("{label}: {}", summarize_run(run));
    }
    outln!("report: {}", report_path.display());
    for (_, run) in &outcome.variants {
        check_parse_catastrophe(run)?;
    }
    Ok(())
}

fn cmd_seeds(
    config_path: &Path,
    overrides: &Overrides,
    seeds: Option<Vec<u64>>,
) -> Result<(), Error> {
    let loaded = LoadedExperiment::load(config_path)?;
    let base = loaded.effective_config(overrides)?;
    let seeds = seeds.unwrap_or_else(|| loaded.seeds());
    let data = loaded.load_data(&base.task_id)?;
    let registry = loaded.build_registry()?;
    let stores = loaded.open_stores()?;

    let outcome = seed_sensitivity(&base, &data, &registry, &stores, &seeds)?;
    let manifests: Vec<RunManifest> = outcome
        .runs
        .iter()
        .map(|run| run.manifest.clone())
        .collect();
    let markdown = render_report(&manifests, ReportShape::Seeds)?;
    let report_path = stores
        .runs
        .write_summary_report(&format!("seeds-{}", base.task_id), &markdown)?;
    outln!("{markdown}");
    for (seed, run) in seeds.iter().zip(&outcome.runs) {
        outln!("seed {seed}: {}", summarize_run(run));
    }
    match outcome.variance {
        Some(v) => outln!("sample variance (x100 scale): {v:.2}"),
        None => outln!("sample variance: undefined for a single seed"),
    }
    outln!("report: {}", report_path.display());
    for run in &outcome.runs {
        check_parse_catastrophe(run)?;
    }
    Ok(())
}

fn cmd_report(
    config_path: &Path,
    runs: Option<Vec<String>>,
    shape: &str,
    show_prompts: bool,
    runs_dir: Option<PathBuf>,
) -> Result<(), Error> {
    let shape = ReportShape::parse(shape).ok_or_else(|| {
        Error::Config(format!(
            "unknown report shape `{shape}` (expected main, ablation, sweep, or seeds)"
        ))
    })?;
    let runs_dir = match runs_dir {
        Some(dir) => dir,
        None => LoadedExperiment::load(config_path)?.runs_dir(),
    };
    let store = RunStore::open(&runs_dir)?;
    let run_ids = match runs {
        Some(ids) => ids,
        None => store.list_runs()?,
    };
    let mut manifests = Vec::new();
    for run_id in &run_ids {
        manifests.push(store.load_manifest(run_id)?);
    }
    let markdown = render_report(&manifests, shape)?;
    outln!("{markdown}");

    if show_prompts {
        let mut seen = std::collections::BTreeSet::new();
        for manifest in &manifests {
            let key = (
                manifest.config.task_id.clone(),
                manifest.ensemble_model_names.clone(),
            );
            if !seen.insert(key) {
                continue;
            }
            let task = builtin_task(&manifest.config.task_id)?;
            let system = system_prompt(
                &task,
                &manifest.ensemble_model_names,
                "[in-context examples]",
            );
            let models = if manifest.ensemble_model_names.is_empty() {
                "no ensemble".to_string()
            } else {
                manifest.ensemble_model_names.join(", ")
            };
            outln!("--- system prompt for {} ({models}) ---", task.task_id);
            outln!("{system}");
            outln!("--- user text skeleton ---");
            outln!("[test example]");
            outln!("Label: ");
        }
    }
    Ok(())
}
