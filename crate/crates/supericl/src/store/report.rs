//! Markdown tables rendered from run manifests. Rendering is a pure function
//! of the manifests, so reports can be regenerated at any time.

use std::collections::BTreeSet;

use crate::dataset::Metric;
use crate::error::StoreError;
use crate::experiment::{combination_label, sample_variance};

use super::{RunManifest, RunStatus};

/// Table layout to render.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportShape {
    /// One row per run: mode, shots, ensemble, metric.
    Main,
    /// Component ablation: which prompt parts were on, per variant.
    Ablation,
    /// Ensemble-by-shots grid.
    Sweep,
    /// One column per seed, plus the sample variance.
    Seeds,
}

impl ReportShape {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "main" => Some(ReportShape::Main),
            "ablation" => Some(ReportShape::Ablation),
            "sweep" => Some(ReportShape::Sweep),
            "seeds" => Some(ReportShape::Seeds),
            _ => None,
        }
    }
}

/// Render manifests into a markdown report of the given shape.
pub fn render_report(manifests: &[RunManifest], shape: ReportShape) -> Result<String, StoreError> {
    if manifests.is_empty() {
        return Err(StoreError::Report("no runs to report on".into()));
    }
    let task_id = &manifests[0].config.task_id;
    if manifests.iter().any(|m| &m.config.task_id != task_id) {
        return Err(StoreError::Report(
            "all runs in one report must share a task".into(),
        ));
    }
    match shape {
        ReportShape::Main => render_main(task_id, manifests),
        ReportShape::Ablation => render_ablation(task_id, manifests),
        ReportShape::Sweep => render_sweep(task_id, manifests),
        ReportShape::Seeds => render_seeds(task_id, manifests),
    }
}

fn metric_header(metric: Metric) -> &'static str {
    match metric {
        Metric::Accuracy => "Acc (%)",
        Metric::MatthewsCorrelation => "Mcc (x100)",
    }
}

fn metric_of(manifests: &[RunManifest]) -> Metric {
    manifests
        .iter()
        .find_map(|m| m.metric.as_ref().map(|s| s.metric))
        .unwrap_or(Metric::Accuracy)
}

fn percent_cell(manifest: &RunManifest) -> String {
    match (&manifest.status, &manifest.metric) {
        (RunStatus::Aborted { .. }, _) => "failed".to_string(),
        (_, Some(summary)) => summary.percent.clone(),
        (_, None) => "-".to_string(),
    }
}

fn ensemble_cell(manifest: &RunManifest) -> String {
    combination_label(&manifest.ensemble_model_names)
}

fn mode_cell(manifest: &RunManifest) -> &'static str {
    match manifest.config.ensemble.len() {
        0 => "ICL",
        1 => "SuperICL",
        _ => "Ensemble SuperICL",
    }
}

fn render_main(task_id: &str, manifests: &[RunManifest]) -> Result<String, StoreError> {
    let metric = metric_of(manifests);
    // Bold the best finished value; ties are all bolded.
    let best = manifests
        .iter()
        .filter(|m| matches!(m.status, RunStatus::Complete))
        .filter_map(|m| m.metric.as_ref().map(|s| s.value))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("## {task_id}: runs\n\n");
    out.push_str(&format!(
        "| Run | Mode | Shots | Ensemble | {} | Eval N | Parse failures |\n",
        metric_header(metric)
    ));
    out.push_str("|---|---|---:|---|---:|---:|---:|\n");
    for m in manifests {
        let mut cell = percent_cell(m);
        if let Some(summary) = &m.metric {
            if matches!(m.status, RunStatus::Complete) && summary.value == best {
                cell = format!("**{cell}**");
            }
        }
        let shots = if m.shots_standard {
            m.config.shots.to_string()
        } else {
            // Flag non-standard settings so tables are not misread.
            format!("{} (non-standard)", m.config.shots)
        };
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            m.run_id,
            mode_cell(m),
            shots,
            ensemble_cell(m),
            cell,
            m.counts.eval_examples,
            m.counts.parse_failures,
        ));
    }
    Ok(out)
}

fn check(on: bool) -> &'static str {
    if on {
        "yes"
    } else {
        "-"
    }
}

fn render_ablation(task_id: &str, manifests: &[RunManifest]) -> Result<String, StoreError> {
    let metric = metric_of(manifests);
    // Canonical variant order: test only, +context, +confidence, all.
    let variant_rank = |m: &RunManifest| {
        let f = &m.config.flags;
        match (
            f.include_context_predictions,
            f.include_confidences,
            f.include_test_predictions,
        ) {
            (false, false, true) => 0,
            (true, false, true) => 1,
            (false, true, true) => 2,
            (true, true, true) => 3,
            _ => 4,
        }
    };
    let mut ordered: Vec<&RunManifest> = manifests.iter().collect();
    ordered.sort_by_key(|m| variant_rank(m));
    let mut out = format!("## {task_id}: component ablation\n\n");
    out.push_str(&format!(
        "| Variant | Demo predictions | Confidences | Test predictions | {} |\n",
        metric_header(metric)
    ));
    out.push_str("|---|:-:|:-:|:-:|---:|\n");
    for (i, m) in ordered.iter().enumerate() {
        let f = &m.config.flags;
        out.push_str(&format!(
            "| ({}) | {} | {} | {} | {} |\n",
            i + 1,
            check(f.include_context_predictions),
            check(f.include_confidences),
            check(f.include_test_predictions),
            percent_cell(m),
        ));
    }
    Ok(out)
}

fn render_sweep(task_id: &str, manifests: &[RunManifest]) -> Result<String, StoreError> {
    let metric = metric_of(manifests);
    let shot_settings: BTreeSet<usize> = manifests.iter().map(|m| m.config.shots).collect();
    // Rows: one per ensemble, ordered by size then label.
    let mut rows: Vec<(usize, String)> = manifests
        .iter()
        .map(|m| (m.config.ensemble.len(), ensemble_cell(m)))
        .collect();
    rows.sort();
    rows.dedup();
    let mut out = format!(
        "## {task_id}: ensemble sweep ({})\n\n",
        metric_header(metric)
    );
    out.push_str("| Ensemble | Size |");
    for shots in &shot_settings {
        out.push_str(&format!(" {shots}-shot |"));
    }
    out.push('\n');
    out.push_str("|---|---:|");
    for _ in &shot_settings {
        out.push_str("---:|");
    }
    out.push('\n');
    for (size, label) in &rows {
        out.push_str(&format!("| {label} | {size} |"));
        for shots in &shot_settings {
            let cell = manifests
                .iter()
                .find(|m| m.config.shots == *shots && &ensemble_cell(m) == label)
                .map(percent_cell)
                .unwrap_or_else(|| "-".to_string());
            out.push_str(&format!(" {cell} |"));
        }
        out.push('\n');
    }
    Ok(out)
}

fn render_seeds(task_id: &str, manifests: &[RunManifest]) -> Result<String, StoreError> {
    let metric = metric_of(manifests);
    // Group rows by everything except the seed.
    let row_key = |m: &RunManifest| (ensemble_cell(m), m.config.shots, m.config.flags.describe());
    let mut row_keys: Vec<(String, usize, String)> = Vec::new();
    let mut seeds: Vec<u64> = Vec::new();
    for m in manifests {
        let key = row_key(m);
        if !row_keys.contains(&key) {
            row_keys.push(key);
        }
        if !seeds.contains(&m.config.seed) {
            seeds.push(m.config.seed);
        }
    }
    let mut out = format!(
        "## {task_id}: seed sensitivity ({})\n\n",
        metric_header(metric)
    );
    out.push_str("| Ensemble | Shots |");
    for seed in &seeds {
        out.push_str(&format!(" Seed {seed} |"));
    }
    out.push_str(" Var |\n");
    out.push_str("|---|---:|");
    for _ in &seeds {
        out.push_str("---:|");
    }
    out.push_str("---:|\n");
    for key in &row_keys {
        out.push_str(&format!("| {} | {} |", key.0, key.1));
        let mut percents = Vec::new();
        for seed in &seeds {
            let found = manifests
                .iter()
                .find(|m| &row_key(m) == key && m.config.seed == *seed);
            match found {
                Some(m) => {
                    if let (RunStatus::Complete, Some(summary)) = (&m.status, &m.metric) {
                        percents.push(summary.value * 100.0);
                    }
                    out.push_str(&format!(" {} |", percent_cell(m)));
                }
                None => out.push_str(" - |"),
            }
        }
        let var_cell = sample_variance(&percents)
            .map(|v| format!("{v:.2}"))
            .unwrap_or_else(|| "-".to_string());
        out.push_str(&format!(" {var_cell} |\n"));
    }
    Ok(out)
}
