//! Experiment orchestration: sample demonstrations, annotate with the SLM
//! ensemble, build prompts, complete them, parse and score — plus the sweep,
//! ablation, and seed-sensitivity drivers built on top.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendRegistry, DecodeParams, SlmBackend};
use crate::dataset::{
    is_standard_shot_count, render_input, sample_demonstrations, DatasetSplit, Example, LabelSpace,
    Metric, SplitName, TaskSpec,
};
use crate::ensemble::{annotate, AnnotationSet, ConfidenceMode};
use crate::error::Error;
use crate::prompt::{build_prompt, format_percent, AblationFlags, DemonstrationBlock, ANSWER_SLOT};
use crate::store::{
    unix_ms, AnnotationKey, AnnotationValue, CompletionKey, MetricSummary, RunCounts, RunManifest,
    RunStatus, Stores,
};

/// Everything that determines a run's outputs. Snapshotted into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task_id: String,
    /// Number of in-context demonstrations.
    pub shots: usize,
    /// Seed for demonstration sampling.
    pub seed: u64,
    /// SLM backend ids, in prompt order. Empty means plain in-context
    /// learning; 1 is the single-model method; 2-5 is the ensemble setting.
    pub ensemble: Vec<String>,
    pub flags: AblationFlags,
    pub llm_backend_id: String,
    pub confidence_mode: ConfidenceMode,
    pub max_new_tokens: u32,
    /// Evaluate only the first N eval examples, when set.
    pub eval_limit: Option<usize>,
    /// Upper bound on concurrent backend calls.
    pub parallelism: usize,
}

impl ExperimentConfig {
    pub fn new(task_id: impl Into<String>, llm_backend_id: impl Into<String>) -> Self {
        ExperimentConfig {
            task_id: task_id.into(),
            shots: 0,
            seed: 42,
            ensemble: Vec::new(),
            flags: AblationFlags::none(),
            llm_backend_id: llm_backend_id.into(),
            confidence_mode: ConfidenceMode::Sigmoid,
            max_new_tokens: 8,
            eval_limit: None,
            parallelism: 1,
        }
    }

    pub fn with_shots(mut self, shots: usize) -> Self {
        self.shots = shots;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_ensemble<I, S>(mut self, ensemble: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.ensemble = ensemble.into_iter().map(Into::into).collect();
        self.flags = if self.ensemble.is_empty() {
            AblationFlags::none()
        } else {
            AblationFlags::all_enabled()
        };
        self
    }

    pub fn with_flags(mut self, flags: AblationFlags) -> Self {
        self.flags = flags;
        self
    }

    pub fn with_eval_limit(mut self, limit: usize) -> Self {
        self.eval_limit = Some(limit);
        self
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism;
        self
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.ensemble.is_empty() && self.flags.any() {
            return Err(Error::Config(
                "prompt flags are enabled but the ensemble is empty; \
                 there are no predictions to include"
                    .into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &self.ensemble {
            if !seen.insert(id.as_str()) {
                return Err(Error::Config(format!("duplicate ensemble member `{id}`")));
            }
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }

    /// Method family implied by the ensemble size.
    pub fn mode_label(&self) -> &'static str {
        match self.ensemble.len() {
            0 => "ICL",
            1 => "SuperICL",
            _ => "Ensemble SuperICL",
        }
    }

    pub fn decode(&self) -> DecodeParams {
        DecodeParams::greedy(self.max_new_tokens)
    }
}

/// The task and its two splits, resolved and loaded.
pub struct ExperimentData {
    pub task: TaskSpec,
    pub train: DatasetSplit,
    pub eval: DatasetSplit,
}

impl ExperimentData {
    pub fn new(task: TaskSpec, train: DatasetSplit, eval: DatasetSplit) -> Result<Self, Error> {
        for (split, expected) in [(&train, SplitName::Train), (&eval, SplitName::Eval)] {
            if split.task_id != task.task_id {
                return Err(Error::Config(format!(
                    "{expected} split belongs to task `{}`, not `{}`",
                    split.task_id, task.task_id
                )));
            }
        }
        Ok(ExperimentData { task, train, eval })
    }
}

/// Per-example outcome, written to the run's records file in dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub example_id: String,
    pub prompt_hash: String,
    /// The ensemble's annotations on this example (empty for plain ICL).
    pub slm_annotations: AnnotationSet,
    /// Raw completion text, unmodified.
    pub llm_raw: String,
    /// Canonical label parsed from the completion; None when unparseable.
    pub parsed_label: Option<String>,
    pub gold_label: String,
    pub correct: bool,
    pub parse_failure: bool,
    pub truncated: bool,
}

/// Scored summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metric: Metric,
    /// Raw value: accuracy in [0,1], Matthews correlation in [-1,1].
    pub value: f64,
    pub n_eval: usize,
    pub n_parse_failures: usize,
    pub config: ExperimentConfig,
}

/// A completed run: its id, score, records, and manifest.
pub struct RunOutcome {
    pub run_id: String,
    pub report: MetricsReport,
    pub records: Vec<RunRecord>,
    pub manifest: RunManifest,
}

/// k-by-k confusion counts, `counts[gold][predicted]`, over a label space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    /// Binary matrix with label index 0 as the positive class.
    pub fn binary(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionMatrix {
            labels: vec!["positive".into(), "negative".into()],
            counts: vec![vec![tp, fn_], vec![fp, tn]],
        }
    }

    /// Tally records against a label space. A record whose completion did not
    /// parse has no predicted class; it is deliberately booked under a wrong
    /// class for its gold row, so parse failures score as errors and the
    /// counts still sum to the number of records.
    pub fn from_records(records: &[RunRecord], label_space: &LabelSpace) -> Result<Self, Error> {
        let k = label_space.len();
        let mut counts = vec![vec![0u64; k]; k];
        for record in records {
            let gold = label_space.index_of(&record.gold_label).ok_or_else(|| {
                Error::Invalid(format!(
                    "record `{}`: gold label `{}` is outside the label space",
                    record.example_id, record.gold_label
                ))
            })?;
            let predicted = record
                .parsed_label
                .as_deref()
                .and_then(|l| label_space.index_of(l))
                .unwrap_or((gold + 1) % k);
            counts[gold][predicted] += 1;
        }
        Ok(ConfusionMatrix {
            labels: label_space.labels().to_vec(),
            counts,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn count(&self, gold: usize, predicted: usize) -> u64 {
        self.counts[gold][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// (tp, tn, fp, fn) for binary matrices, with label 0 positive.
    pub fn binary_counts(&self) -> Option<(u64, u64, u64, u64)> {
        if self.labels.len() != 2 {
            return None;
        }
        Some((
            self.counts[0][0],
            self.counts[1][1],
            self.counts[1][0],
            self.counts[0][1],
        ))
    }

    /// Diagonal mass over total.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.labels.len()).map(|i| self.counts[i][i]).sum();
        diag as f64 / total as f64
    }
}

/// Fraction of records answered correctly.
pub fn accuracy(records: &[RunRecord]) -> Result<f64, Error> {
    if records.is_empty() {
        return Err(Error::Invalid("accuracy over zero records".into()));
    }
    let correct = records.iter().filter(|r| r.correct).count();
    Ok(correct as f64 / records.len() as f64)
}

/// Matthews correlation coefficient for a binary confusion matrix:
/// (tp*tn - fp*fn) / sqrt((tp+fp)(tp+fn)(tn+fp)(tn+fn)).
/// When any denominator factor is zero the coefficient is defined as 0.
pub fn matthews_correlation(cm: &ConfusionMatrix) -> Result<f64, Error> {
    let (tp, tn, fp, fn_) = cm.binary_counts().ok_or_else(|| {
        Error::Invalid(format!(
            "Matthews correlation needs a binary matrix, got {} labels",
            cm.labels().len()
        ))
    })?;
    let (tp, tn, fp, fn_) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.iter().any(|&f| f == 0.0) {
        return Ok(0.0);
    }
    let numerator = tp * tn - fp * fn_;
    Ok(numerator / factors.iter().product::<f64>().sqrt())
}

/// Unbiased sample variance, sum((x - mean)^2) / (n - 1). None below n = 2.
pub fn sample_variance(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Some(ss / (n - 1.0))
}

// Punctuation stripped from the end of a completion before label matching.
const TERMINAL_PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\'', '`'];

/// Recover a label from raw completion text. Looks after the last answer
/// slot if the model echoed one, trims whitespace and terminal punctuation,
/// then matches case-insensitively — exactly first, else as the unique
/// prefix of one label. Anything else is a parse failure, never a guess.
pub fn parse_label(llm_raw: &str, label_space: &LabelSpace) -> Option<String> {
    let tail = match llm_raw.rfind(ANSWER_SLOT.trim_end()) {
        Some(i) => &llm_raw[i + ANSWER_SLOT.trim_end().len()..],
        None => llm_raw,
    };
    let trimmed = tail
        .trim()
        .trim_end_matches(TERMINAL_PUNCTUATION)
        .trim_end();
    if trimmed.is_empty() {
        return None;
    }
    if let Some(label) = label_space.canonicalize(trimmed) {
        return Some(label.to_string());
    }
    let lower = trimmed.to_lowercase();
    let mut matches = label_space
        .labels()
        .iter()
        .filter(|l| l.to_lowercase().starts_with(&lower));
    match (matches.next(), matches.next()) {
        (Some(label), None) => Some(label.clone()),
        _ => None,
    }
}

/// All ensembles of sizes `min_size..=max_size` drawn from `slm_ids`, in
/// combination order (sizes ascending, members in input order within each).
pub fn enumerate_ensembles(
    slm_ids: &[String],
    min_size: usize,
    max_size: usize,
) -> Result<Vec<Vec<String>>, Error> {
    if min_size == 0 {
        return Err(Error::Invalid("min_size must be at least 1".into()));
    }
    if min_size > max_size {
        return Err(Error::Invalid(format!(
            "min_size {min_size} exceeds max_size {max_size}"
        )));
    }
    if max_size > slm_ids.len() {
        return Err(Error::Invalid(format!(
            "max_size {max_size} exceeds the {} available models",
            slm_ids.len()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for id in slm_ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::Invalid(format!("duplicate model id `{id}`")));
        }
    }
    let mut out = Vec::new();
    for size in min_size..=max_size {
        for combo in (0..slm_ids.len()).combinations(size) {
            out.push(combo.into_iter().map(|i| slm_ids[i].clone()).collect());
        }
    }
    Ok(out)
}

/// Short tag for an ensemble: first character of each model name joined with
/// `+` (e.g. `R+D+B+f+E`); the empty ensemble is `ICL`.
pub fn combination_label(model_names: &[String]) -> String {
    if model_names.is_empty() {
        return "ICL".to_string();
    }
    model_names
        .iter()
        .map(|name| name.chars().next().unwrap_or('?').to_string())
        .collect::<Vec<_>>()
        .join("+")
}

/// Run `f` over items with at most `parallelism` worker threads, collecting
/// results by input index. After the first error no new items start; the
/// error with the lowest index is returned alongside whatever completed.
fn parallel_map<T, R, F>(items: &[T], parallelism: usize, f: F) -> (Vec<Option<R>>, Option<Error>)
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R, Error> + Sync,
{
    let n = items.len();
    let mut slots: Vec<Option<R>> = Vec::with_capacity(n);
    slots.resize_with(n, || None);
    if n == 0 {
        return (slots, None);
    }
    let slots = Mutex::new(slots);
    let errors: Mutex<Vec<(usize, Error)>> = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let workers = parallelism.max(1).min(n);
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                match f(i, &items[i]) {
                    Ok(r) => {
                        slots.lock().unwrap()[i] = Some(r);
                    }
                    Err(e) => {
                        errors.lock().unwrap().push((i, e));
                        abort.store(true, Ordering::SeqCst);
                    }
                }
            });
        }
    });
    let mut errors = errors.into_inner().unwrap();
    errors.sort_by_key(|(i, _)| *i);
    let first_error = errors.into_iter().next().map(|(_, e)| e);
    (slots.into_inner().unwrap(), first_error)
}

struct ResolvedEnsemble {
    slms: Vec<Arc<dyn SlmBackend>>,
    model_names: Vec<String>,
}

fn resolve_ensemble(
    config: &ExperimentConfig,
    backends: &BackendRegistry,
) -> Result<ResolvedEnsemble, Error> {
    let mut slms = Vec::new();
    let mut model_names = Vec::new();
    for id in &config.ensemble {
        let slm = backends.slm(id)?;
        let name = slm.model_name().to_string();
        if model_names.contains(&name) {
            return Err(Error::Config(format!(
                "two ensemble members share the model name `{name}`; \
                 prediction lines would be indistinguishable"
            )));
        }
        model_names.push(name);
        slms.push(slm.clone());
    }
    Ok(ResolvedEnsemble { slms, model_names })
}

/// Fetch (cache-first) the full annotation set for one example.
fn annotation_set_for(
    task: &TaskSpec,
    example: &Example,
    ensemble: &ResolvedEnsemble,
    mode: ConfidenceMode,
    stores: &Stores,
) -> Result<AnnotationSet, Error> {
    let mut annotations = Vec::with_capacity(ensemble.slms.len());
    for slm in &ensemble.slms {
        let key = AnnotationKey {
            backend_id: slm.id().to_string(),
            task_id: task.task_id.clone(),
            example_id: example.example_id.clone(),
            confidence_mode: mode,
        };
        let (value, _hit) = stores.annotations.get_or_compute(&key, || {
            let logits = slm.classify(task, example)?;
            let annotation = annotate(&logits, &task.label_space, slm.model_name(), mode)?;
            Ok(AnnotationValue {
                logits: logits.values().to_vec(),
                annotation,
            })
        })?;
        annotations.push(value.annotation);
    }
    AnnotationSet::new(annotations)
}

/// What an annotation warm-up covered.
pub struct WarmupSummary {
    pub demonstration_ids: Vec<String>,
    pub eval_examples: usize,
    /// Annotation sets fetched (demonstrations + eval); 0 without an ensemble.
    pub sets_fetched: usize,
}

/// Warm the annotation cache for the demonstrations and the (possibly
/// limited) eval slice, without touching the LLM.
pub fn warm_annotations(
    config: &ExperimentConfig,
    data: &ExperimentData,
    backends: &BackendRegistry,
    stores: &Stores,
) -> Result<WarmupSummary, Error> {
    config.validate()?;
    let demos = sample_demonstrations(&data.train, config.shots, config.seed)?;
    let eval = eval_slice(config, data)?;
    let mut summary = WarmupSummary {
        demonstration_ids: demos.iter().map(|d| d.example_id.clone()).collect(),
        eval_examples: eval.len(),
        sets_fetched: 0,
    };
    if config.ensemble.is_empty() {
        return Ok(summary);
    }
    let ensemble = resolve_ensemble(config, backends)?;
    let mut targets: Vec<&Example> = demos.iter().collect();
    targets.extend(eval);
    let (slots, error) = parallel_map(&targets, config.parallelism, |_, example| {
        annotation_set_for(
            &data.task,
            example,
            &ensemble,
            config.confidence_mode,
            stores,
        )
    });
    if let Some(e) = error {
        return Err(e);
    }
    summary.sets_fetched = slots.len();
    Ok(summary)
}

fn eval_slice<'a>(
    config: &ExperimentConfig,
    data: &'a ExperimentData,
) -> Result<&'a [Example], Error> {
    let all = data.eval.examples();
    let n = config.eval_limit.map_or(all.len(), |l| l.min(all.len()));
    if n == 0 {
        return Err(Error::Invalid("no eval examples to run on".into()));
    }
    Ok(&all[..n])
}

/// Execute one experiment end to end and persist its records and manifest.
///
/// Stages: sample demonstrations from the train split; fetch SLM annotations
/// (cache-first) for the demonstrations and every eval example; build one
/// prompt per eval example; fetch completions (cache-first); parse and score.
/// With warm caches a rerun issues no backend calls and rewrites records
/// byte-identically. On a backend failure, completed records and an aborted
/// manifest are written before the error is returned.
pub fn run_experiment(
    config: &ExperimentConfig,
    data: &ExperimentData,
    backends: &BackendRegistry,
    stores: &Stores,
) -> Result<RunOutcome, Error> {
    config.validate()?;
    if config.task_id != data.task.task_id {
        return Err(Error::Config(format!(
            "config names task `{}` but data is for `{}`",
            config.task_id, data.task.task_id
        )));
    }
    let llm = backends.llm(&config.llm_backend_id)?.clone();
    let ensemble = resolve_ensemble(config, backends)?;
    let annotation_stats_before = stores.annotations.stats();
    let completion_stats_before = stores.completions.stats();

    let demos = sample_demonstrations(&data.train, config.shots, config.seed)?;
    for demo in &demos {
        demo.validate_against(&data.task)?;
        if demo.gold_label.is_none() {
            return Err(Error::Invalid(format!(
                "demonstration `{}` has no gold label",
                demo.example_id
            )));
        }
    }
    let eval = eval_slice(config, data)?;
    for example in eval {
        example.validate_against(&data.task)?;
        if example.gold_label.is_none() {
            return Err(Error::Invalid(format!(
                "eval example `{}` has no gold label; scored runs need a \
                 fully labeled eval split",
                example.example_id
            )));
        }
    }

    let run_id = stores.runs.allocate_run_id(&format!(
        "{}-{}-{}shot-seed{}",
        config.task_id,
        config.mode_label().replace(' ', ""),
        config.shots,
        config.seed
    ))?;
    let started_unix_ms = unix_ms();

    // Annotation stage. Demonstrations are annotated ahead of the eval fan-out
    // because every prompt shares them.
    let mut demo_sets: Vec<AnnotationSet> = Vec::new();
    let mut eval_sets: Vec<AnnotationSet> = vec![AnnotationSet::empty(); eval.len()];
    let mut stage_error: Option<Error> = None;
    if !config.ensemble.is_empty() {
        let (slots, error) = parallel_map(&demos, config.parallelism, |_, example| {
            annotation_set_for(
                &data.task,
                example,
                &ensemble,
                config.confidence_mode,
                stores,
            )
        });
        match error {
            Some(e) => stage_error = Some(e),
            None => demo_sets = slots.into_iter().map(Option::unwrap).collect(),
        }
        if stage_error.is_none() {
            let (slots, error) = parallel_map(eval, config.parallelism, |_, example| {
                annotation_set_for(
                    &data.task,
                    example,
                    &ensemble,
                    config.confidence_mode,
                    stores,
                )
            });
            match error {
                Some(e) => stage_error = Some(e),
                None => eval_sets = slots.into_iter().map(Option::unwrap).collect(),
            }
        }
    } else {
        demo_sets = vec![AnnotationSet::empty(); demos.len()];
    }

    // Abort before any prompt work if annotation failed: write an empty
    // records file and an aborted manifest, then surface the error.
    if let Some(e) = stage_error {
        return abort_run(
            AbortContext {
                config,
                stores,
                run_id,
                started_unix_ms,
                demos: &demos,
                ensemble_model_names: ensemble.model_names.clone(),
                annotation_stats_before,
                completion_stats_before,
                total: eval.len(),
            },
            Vec::new(),
            e,
        );
    }

    let demo_blocks: Vec<DemonstrationBlock> = demos
        .iter()
        .zip(&demo_sets)
        .map(|(demo, set)| DemonstrationBlock {
            rendered_input: render_input(demo, &data.task),
            annotations: if config.flags.include_context_predictions {
                set.clone()
            } else {
                AnnotationSet::empty()
            },
            gold_label: demo.gold_label.clone().unwrap(),
        })
        .collect();

    // Prompt + completion stage.
    let decode = config.decode();
    let indexed_eval: Vec<(usize, &Example)> = eval.iter().enumerate().collect();
    let (slots, error) = parallel_map(&indexed_eval, config.parallelism, |_, (i, example)| {
        let test_annotations = if config.flags.include_test_predictions {
            eval_sets[*i].clone()
        } else {
            AnnotationSet::empty()
        };
        let bundle = build_prompt(
            &data.task,
            &demo_blocks,
            &render_input(example, &data.task),
            &test_annotations,
            &ensemble.model_names,
            &config.flags,
        );
        let key = CompletionKey {
            prompt_hash: bundle.prompt_hash.clone(),
            backend_id: llm.id().to_string(),
            decode,
        };
        let (completion, _hit) = stores.completions.get_or_complete(&key, || {
            Ok(llm.complete_greedy(&bundle.system_text, &bundle.user_text, &decode)?)
        })?;
        let gold = example.gold_label.clone().unwrap();
        let parsed_label = parse_label(&completion.text, &data.task.label_space);
        Ok(RunRecord {
            example_id: example.example_id.clone(),
            prompt_hash: bundle.prompt_hash,
            slm_annotations: eval_sets[*i].clone(),
            llm_raw: completion.text,
            parsed_label: parsed_label.clone(),
            correct: parsed_label.as_deref() == Some(gold.as_str()),
            gold_label: gold,
            parse_failure: parsed_label.is_none(),
            truncated: completion.truncated,
        })
    });

    let abort_context = AbortContext {
        config,
        stores,
        run_id: run_id.clone(),
        started_unix_ms,
        demos: &demos,
        ensemble_model_names: ensemble.model_names.clone(),
        annotation_stats_before,
        completion_stats_before,
        total: eval.len(),
    };
    if let Some(e) = error {
        let completed: Vec<RunRecord> = slots.into_iter().flatten().collect();
        return abort_run(abort_context, completed, e);
    }
    let records: Vec<RunRecord> = slots.into_iter().map(Option::unwrap).collect();

    // Score.
    let value = match data.task.metric {
        Metric::Accuracy => accuracy(&records)?,
        Metric::MatthewsCorrelation => {
            let cm = ConfusionMatrix::from_records(&records, &data.task.label_space)?;
            matthews_correlation(&cm)?
        }
    };
    let report = MetricsReport {
        metric: data.task.metric,
        value,
        n_eval: records.len(),
        n_parse_failures: records.iter().filter(|r| r.parse_failure).count(),
        config: config.clone(),
    };

    stores.runs.write_records(&run_id, &records)?;
    let manifest = RunManifest {
        run_id: run_id.clone(),
        config: config.clone(),
        ensemble_model_names: ensemble.model_names,
        started_unix_ms,
        finished_unix_ms: unix_ms(),
        status: RunStatus::Complete,
        counts: run_counts(
            &records,
            demos.len(),
            stores,
            annotation_stats_before,
            completion_stats_before,
        ),
        metric: Some(MetricSummary {
            metric: report.metric,
            value: report.value,
            percent: format_percent(report.value),
        }),
        demonstration_ids: demos.iter().map(|d| d.example_id.clone()).collect(),
        shots_standard: is_standard_shot_count(config.shots),
        ensemble_standard: config.ensemble.len() <= 5,
        records_file: Some("records.jsonl".into()),
    };
    stores.runs.write_manifest(&manifest)?;

    Ok(RunOutcome {
        run_id,
        report,
        records,
        manifest,
    })
}

fn run_counts(
    records: &[RunRecord],
    demonstrations: usize,
    stores: &Stores,
    annotation_before: crate::store::CacheStats,
    completion_before: crate::store::CacheStats,
) -> RunCounts {
    let annotation = stores.annotations.stats() - annotation_before;
    let completion = stores.completions.stats() - completion_before;
    RunCounts {
        eval_examples: records.len(),
        demonstrations,
        parse_failures: records.iter().filter(|r| r.parse_failure).count(),
        truncated: records.iter().filter(|r| r.truncated).count(),
        annotation_cache_hits: annotation.hits,
        annotation_cache_misses: annotation.misses,
        completion_cache_hits: completion.hits,
        completion_cache_misses: completion.misses,
    }
}

struct AbortContext<'a> {
    config: &'a ExperimentConfig,
    stores: &'a Stores,
    run_id: String,
    started_unix_ms: u64,
    demos: &'a [Example],
    ensemble_model_names: Vec<String>,
    annotation_stats_before: crate::store::CacheStats,
    completion_stats_before: crate::store::CacheStats,
    total: usize,
}

/// Persist what completed, mark the manifest aborted, and wrap the error.
fn abort_run(
    ctx: AbortContext<'_>,
    completed: Vec<RunRecord>,
    error: Error,
) -> Result<RunOutcome, Error> {
    let AbortContext {
        config,
        stores,
        run_id,
        started_unix_ms,
        demos,
        ensemble_model_names,
        annotation_stats_before,
        completion_stats_before,
        total,
    } = ctx;
    stores.runs.write_records(&run_id, &completed)?;
    let manifest = RunManifest {
        run_id: run_id.clone(),
        config: config.clone(),
        ensemble_model_names,
        started_unix_ms,
        finished_unix_ms: unix_ms(),
        status: RunStatus::Aborted {
            error: error.to_string(),
        },
        counts: run_counts(
            &completed,
            demos.len(),
            stores,
            annotation_stats_before,
            completion_stats_before,
        ),
        metric: None,
        demonstration_ids: demos.iter().map(|d| d.example_id.clone()).collect(),
        shots_standard: is_standard_shot_count(config.shots),
        ensemble_standard: config.ensemble.len() <= 5,
        records_file: Some("records.jsonl".into()),
    };
    stores.runs.write_manifest(&manifest)?;
    Err(Error::RunAborted {
        run_id,
        completed: completed.len(),
        total,
        source: Box::new(error),
    })
}

/// One cell of a sweep: an (ensemble, shots) setting and how it went.
pub struct SweepCell {
    pub ensemble: Vec<String>,
    pub label: String,
    pub shots: usize,
    /// Present whenever the run got far enough to write a manifest.
    pub run_id: Option<String>,
    pub result: Result<MetricsReport, String>,
}

/// Outcome of a full grid sweep.
pub struct SweepOutcome {
    pub cells: Vec<SweepCell>,
}

impl SweepOutcome {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.result.is_err()).count()
    }
}

/// Run every (ensemble, shots) combination. A failed cell is marked and the
/// sweep continues; shared caches mean repeated settings cost nothing new.
pub fn sweep(
    base: &ExperimentConfig,
    data: &ExperimentData,
    ensembles: &[Vec<String>],
    shot_settings: &[usize],
    backends: &BackendRegistry,
    stores: &Stores,
) -> Result<SweepOutcome, Error> {
    if ensembles.is_empty() || shot_settings.is_empty() {
        return Err(Error::Invalid(
            "sweep needs at least one ensemble and one shot setting".into(),
        ));
    }
    let mut cells = Vec::new();
    for ensemble in ensembles {
        for &shots in shot_settings {
            let mut config = base.clone();
            config.ensemble = ensemble.clone();
            config.shots = shots;
            if ensemble.is_empty() {
                config.flags = AblationFlags::none();
            }
            let label = match resolve_ensemble(&config, backends) {
                Ok(resolved) => combination_label(&resolved.model_names),
                Err(e) => {
                    cells.push(SweepCell {
                        ensemble: ensemble.clone(),
                        label: combination_label(ensemble),
                        shots,
                        run_id: None,
                        result: Err(e.to_string()),
                    });
                    continue;
                }
            };
            match run_experiment(&config, data, backends, stores) {
                Ok(outcome) => cells.push(SweepCell {
                    ensemble: ensemble.clone(),
                    label,
                    shots,
                    run_id: Some(outcome.run_id),
                    result: Ok(outcome.report),
                }),
                Err(Error::RunAborted { run_id, source, .. }) => cells.push(SweepCell {
                    ensemble: ensemble.clone(),
                    label,
                    shots,
                    run_id: Some(run_id),
                    result: Err(source.to_string()),
                }),
                Err(e) => cells.push(SweepCell {
                    ensemble: ensemble.clone(),
                    label,
                    shots,
                    run_id: None,
                    result: Err(e.to_string()),
                }),
            }
        }
    }
    Ok(SweepOutcome { cells })
}

/// The four prompt-component variants, in canonical order: predictions on the
/// test input only; plus demonstration predictions; plus confidences; all.
pub fn ablation_variants() -> [(&'static str, AblationFlags); 4] {
    [
        (
            "(1) test predictions only",
            AblationFlags {
                include_context_predictions: false,
                include_confidences: false,
                include_test_predictions: true,
            },
        ),
        (
            "(2) + demonstration predictions",
            AblationFlags {
                include_context_predictions: true,
                include_confidences: false,
                include_test_predictions: true,
            },
        ),
        (
            "(3) + confidences",
            AblationFlags {
                include_context_predictions: false,
                include_confidences: true,
                include_test_predictions: true,
            },
        ),
        ("(4) full prompt", AblationFlags::all_enabled()),
    ]
}

/// Outcome of the four-variant ablation.
pub struct AblationOutcome {
    pub variants: Vec<(&'static str, RunOutcome)>,
}

/// Run the component ablation around a base configuration, reusing its
/// demonstrations and caches. Needs a non-empty ensemble and at least one
/// shot, or the variants would collapse into each other.
pub fn ablation_suite(
    base: &ExperimentConfig,
    data: &ExperimentData,
    backends: &BackendRegistry,
    stores: &Stores,
) -> Result<AblationOutcome, Error> {
    if base.ensemble.is_empty() {
        return Err(Error::Config("ablation needs a non-empty ensemble".into()));
    }
    if base.shots == 0 {
        return Err(Error::Config(
            "ablation needs at least one demonstration; with zero shots the \
             demonstration variants are indistinguishable"
                .into(),
        ));
    }
    let mut variants = Vec::new();
    for (label, flags) in ablation_variants() {
        let mut config = base.clone();
        config.flags = flags;
        let outcome = run_experiment(&config, data, backends, stores)?;
        variants.push((label, outcome));
    }
    Ok(AblationOutcome { variants })
}

/// Outcome of a seed-sensitivity study.
pub struct SeedOutcome {
    pub runs: Vec<RunOutcome>,
    /// Metric values on the x100 scale, in seed order.
    pub percent_values: Vec<f64>,
    /// Unbiased sample variance of `percent_values`; None for a single seed.
    pub variance: Option<f64>,
}

/// Re-run one configuration under each seed and report the variance of the
/// metric on the x100 scale.
pub fn seed_sensitivity(
    base: &ExperimentConfig,
    data: &ExperimentData,
    backends: &BackendRegistry,
    stores: &Stores,
    seeds: &[u64],
) -> Result<SeedOutcome, Error> {
    if seeds.is_empty() {
        return Err(Error::Invalid("seed study needs at least one seed".into()));
    }
    let mut runs = Vec::new();
    let mut percent_values = Vec::new();
    for &seed in seeds {
        let mut config = base.clone();
        config.seed = seed;
        let outcome = run_experiment(&config, data, backends, stores)?;
        percent_values.push(outcome.report.value * 100.0);
        runs.push(outcome);
    }
    Ok(SeedOutcome {
        variance: sample_variance(&percent_values),
        runs,
        percent_values,
    })
}
