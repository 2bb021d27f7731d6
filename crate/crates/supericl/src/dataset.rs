//! Tasks, label spaces, dataset splits, and deterministic demonstration sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IngestError};
use crate::prompt::{DEMONSTRATIONS_SLOT, SLM_SENTENCE_SLOT};

/// Shot counts used throughout the reference experiments.
pub const STANDARD_SHOT_COUNTS: [usize; 5] = [0, 8, 16, 24, 32];

/// Whether `k` is one of the standard shot counts. Other values run fine but
/// are flagged in the run manifest so reports can call them out.
pub fn is_standard_shot_count(k: usize) -> bool {
    STANDARD_SHOT_COUNTS.contains(&k)
}

/// Ordered, duplicate-free set of class labels. Order is meaningful: logit
/// vectors index into it, and ties resolve toward the lower index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSpace {
    labels: Vec<String>,
}

impl LabelSpace {
    pub fn new<I, S>(labels: I) -> Result<Self, IngestError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(IngestError::InvalidSpec("label space is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for label in &labels {
            if !seen.insert(label.to_lowercase()) {
                return Err(IngestError::InvalidSpec(format!(
                    "duplicate label `{label}` in label space"
                )));
            }
        }
        Ok(LabelSpace { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Index of an exact label string.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Map a raw value onto a label: trims whitespace, matches
    /// case-insensitively, and returns the canonical spelling.
    pub fn canonicalize(&self, raw: &str) -> Option<&str> {
        let trimmed = raw.trim();
        self.labels
            .iter()
            .find(|l| l.eq_ignore_ascii_case(trimmed))
            .map(String::as_str)
    }

    /// Labels joined for error messages.
    pub fn describe(&self) -> String {
        self.labels.join(", ")
    }
}

/// How a task is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MatthewsCorrelation,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Accuracy => write!(f, "Acc"),
            Metric::MatthewsCorrelation => write!(f, "Mcc"),
        }
    }
}

/// A classification task: its input fields, label space, metric, and the
/// templates used to render inputs and the system prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    /// Field names every example must provide, in render order.
    pub input_fields: Vec<String>,
    pub label_space: LabelSpace,
    pub metric: Metric,
    /// Template for one example's input block, with `{field}` placeholders.
    pub input_template: String,
    /// Template for the system prompt. Must contain the `{slm_sentence}` and
    /// `{demonstrations}` slots exactly once each.
    pub system_template: String,
    /// Size of the reference evaluation split, when known.
    pub reference_eval_size: Option<usize>,
}

impl TaskSpec {
    pub fn new(
        task_id: impl Into<String>,
        input_fields: Vec<String>,
        label_space: LabelSpace,
        metric: Metric,
        input_template: impl Into<String>,
        system_template: impl Into<String>,
        reference_eval_size: Option<usize>,
    ) -> Result<Self, IngestError> {
        let spec = TaskSpec {
            task_id: task_id.into(),
            input_fields,
            label_space,
            metric,
            input_template: input_template.into(),
            system_template: system_template.into(),
            reference_eval_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<(), IngestError> {
        if self.task_id.is_empty() {
            return Err(IngestError::InvalidSpec("empty task_id".into()));
        }
        if self.input_fields.is_empty() {
            return Err(IngestError::InvalidSpec(format!(
                "task `{}` has no input fields",
                self.task_id
            )));
        }
        for slot in [SLM_SENTENCE_SLOT, DEMONSTRATIONS_SLOT] {
            if self.system_template.matches(slot).count() != 1 {
                return Err(IngestError::InvalidSpec(format!(
                    "task `{}`: system template must contain `{slot}` exactly once",
                    self.task_id
                )));
            }
        }
        for field in &self.input_fields {
            if !self.input_template.contains(&format!("{{{field}}}")) {
                return Err(IngestError::InvalidSpec(format!(
                    "task `{}`: input template does not reference field `{field}`",
                    self.task_id
                )));
            }
        }
        Ok(())
    }
}

fn glue_system_template(task_sentence: &str) -> String {
    format!(
        "{task_sentence}{SLM_SENTENCE_SLOT} Fill in your answer after `Label: ' \
         at the end of the prompt.{DEMONSTRATIONS_SLOT}"
    )
}

/// The five built-in tasks.
pub fn builtin_task_specs() -> Vec<TaskSpec> {
    let specs = vec![
        TaskSpec::new(
            "sst2",
            vec!["sentence".into()],
            LabelSpace::new(["positive", "negative"]).unwrap(),
            Metric::Accuracy,
            "Sentence: {sentence}",
            glue_system_template(
                "You are tasked with predicting the sentiment of a given sentence \
                 (positive or negative).",
            ),
            Some(872),
        ),
        TaskSpec::new(
            "mrpc",
            vec!["sentence1".into(), "sentence2".into()],
            LabelSpace::new(["equivalent", "not_equivalent"]).unwrap(),
            Metric::Accuracy,
            "Sentence 1: {sentence1}\nSentence 2: {sentence2}",
            glue_system_template(
                "You are tasked with determining whether two sentences are semantically \
                 equivalent (equivalent or not_equivalent).",
            ),
            Some(408),
        ),
        TaskSpec::new(
            "mnli",
            vec!["premise".into(), "hypothesis".into()],
            LabelSpace::new(["entailment", "neutral", "contradiction"]).unwrap(),
            Metric::Accuracy,
            "Premise: {premise}\nHypothesis: {hypothesis}",
            glue_system_template(
                "You are tasked with determining the relationship between a pair of \
                 sentences as entailment (the hypothesis is a true conclusion from the \
                 premise), contradiction (the hypothesis contradicts the premise), or \
                 neutral (the hypothesis neither necessarily follows from nor contradicts \
                 the premise).",
            ),
            Some(9815),
        ),
        TaskSpec::new(
            "cola",
            vec!["sentence".into()],
            LabelSpace::new(["acceptable", "unacceptable"]).unwrap(),
            Metric::MatthewsCorrelation,
            "Sentence: {sentence}",
            glue_system_template(
                "You are tasked with determining whether the grammar of a given sentence \
                 is correct (acceptable or unacceptable).",
            ),
            Some(1043),
        ),
        TaskSpec::new(
            "medmcqa",
            vec!["question".into()],
            LabelSpace::new(["Dental", "Surgery"]).unwrap(),
            Metric::Accuracy,
            "Question: {question}",
            glue_system_template(
                "You are tasked with determining the medical subject that a given \
                 question belongs to (Dental or Surgery).",
            ),
            Some(700),
        ),
    ];
    specs
        .into_iter()
        .map(|spec| spec.expect("builtin task specs are valid"))
        .collect()
}

/// Look up a built-in task by id.
pub fn builtin_task(task_id: &str) -> Result<TaskSpec, Error> {
    builtin_task_specs()
        .into_iter()
        .find(|t| t.task_id == task_id)
        .ok_or_else(|| {
            let known: Vec<String> = builtin_task_specs()
                .into_iter()
                .map(|t| t.task_id)
                .collect();
            Error::Config(format!(
                "unknown task `{task_id}` (built-in tasks: {})",
                known.join(", ")
            ))
        })
}

/// One classification example. `field_values` must cover the task's input
/// fields; `gold_label`, when present, must be a canonical label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub example_id: String,
    pub field_values: BTreeMap<String, String>,
    pub gold_label: Option<String>,
}

impl Example {
    pub fn new(
        example_id: impl Into<String>,
        field_values: BTreeMap<String, String>,
        gold_label: Option<String>,
    ) -> Self {
        Example {
            example_id: example_id.into(),
            field_values,
            gold_label,
        }
    }

    /// Check this example against a task: all input fields present, gold label
    /// (if any) in the label space.
    pub fn validate_against(&self, task: &TaskSpec) -> Result<(), IngestError> {
        for field in &task.input_fields {
            if !self.field_values.contains_key(field) {
                return Err(IngestError::InvalidSpec(format!(
                    "example `{}` is missing field `{field}` required by task `{}`",
                    self.example_id, task.task_id
                )));
            }
        }
        if let Some(gold) = &self.gold_label {
            if task.label_space.index_of(gold).is_none() {
                return Err(IngestError::InvalidSpec(format!(
                    "example `{}` has gold label `{gold}` outside the label space [{}]",
                    self.example_id,
                    task.label_space.describe()
                )));
            }
        }
        Ok(())
    }
}

/// Render an example's input block from the task template. Substitution is
/// single-pass, so placeholder-like text inside field values is left alone.
/// The result carries no trailing whitespace.
pub fn render_input(example: &Example, task: &TaskSpec) -> String {
    let rendered = fill_template(&task.input_template, |name| {
        example.field_values.get(name).map(String::as_str)
    });
    rendered.trim_end().to_string()
}

/// Replace `{name}` tokens in one left-to-right pass. Unresolved tokens are
/// kept literally so a bad template is visible in output rather than hidden.
pub(crate) fn fill_template<'a>(
    template: &str,
    lookup: impl Fn(&str) -> Option<&'a str>,
) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start..];
        match after.find('}') {
            Some(end) => {
                let name = &after[1..end];
                match lookup(name) {
                    Some(value) => out.push_str(value),
                    None => out.push_str(&after[..=end]),
                }
                rest = &after[end + 1..];
            }
            None => {
                out.push_str(after);
                return out;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Which half of a dataset a split holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Eval,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitName::Train => write!(f, "train"),
            SplitName::Eval => write!(f, "eval"),
        }
    }
}

/// An ordered collection of examples with unique ids. Order is the file
/// order and is preserved through sampling, annotation, and records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub task_id: String,
    pub split_name: SplitName,
    examples: Vec<Example>,
}

impl DatasetSplit {
    pub fn new(
        task_id: impl Into<String>,
        split_name: SplitName,
        examples: Vec<Example>,
    ) -> Result<Self, IngestError> {
        let split = DatasetSplit {
            task_id: task_id.into(),
            split_name,
            examples,
        };
        let mut seen = BTreeSet::new();
        for ex in &split.examples {
            if !seen.insert(ex.example_id.as_str()) {
                return Err(IngestError::DuplicateId {
                    example_id: ex.example_id.clone(),
                    split: split.split_name.to_string(),
                });
            }
        }
        Ok(split)
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Source file layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Tsv,
    Jsonl,
}

/// Maps task input fields to source columns (TSV header names or JSON keys),
/// plus where to find the label and, optionally, a stable id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    /// input field name -> source column name
    pub fields: BTreeMap<String, String>,
    pub label_column: Option<String>,
    pub id_column: Option<String>,
}

impl ColumnMap {
    /// Columns named exactly like the task fields, label in `label`.
    pub fn identity(task: &TaskSpec) -> Self {
        ColumnMap {
            fields: task
                .input_fields
                .iter()
                .map(|f| (f.clone(), f.clone()))
                .collect(),
            label_column: Some("label".into()),
            id_column: None,
        }
    }
}

/// Load a split from disk. Labels are canonicalized against the task's label
/// space; anything that doesn't map is an error naming the row and value.
/// Rows without an id column get `r<row>` ids (0-based data row).
pub fn load_split(
    path: &Path,
    format: FileFormat,
    columns: &ColumnMap,
    task: &TaskSpec,
    split_name: SplitName,
) -> Result<DatasetSplit, IngestError> {
    for field in &task.input_fields {
        if !columns.fields.contains_key(field) {
            return Err(IngestError::InvalidSpec(format!(
                "column map does not cover task field `{field}`"
            )));
        }
    }
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let examples = match format {
        FileFormat::Tsv => parse_tsv(&text, path, columns, task)?,
        FileFormat::Jsonl => parse_jsonl(&text, path, columns, task)?,
    };
    DatasetSplit::new(task.task_id.clone(), split_name, examples)
}

fn canonical_label(
    raw: &str,
    task: &TaskSpec,
    path: &Path,
    row: usize,
) -> Result<String, IngestError> {
    task.label_space
        .canonicalize(raw)
        .map(str::to_string)
        .ok_or_else(|| IngestError::UnknownLabel {
            path: path.to_path_buf(),
            row,
            value: raw.to_string(),
            labels: task.label_space.describe(),
        })
}

/// GLUE-style TSV: tab-separated, no quoting or escaping, first line is the
/// header. The `csv` crate's quote handling corrupts such files, so cells are
/// split on raw tabs.
fn parse_tsv(
    text: &str,
    path: &Path,
    columns: &ColumnMap,
    task: &TaskSpec,
) -> Result<Vec<Example>, IngestError> {
    let mut lines = text.lines();
    let header_line = match lines.next() {
        Some(h) => h,
        None => return Ok(Vec::new()),
    };
    let header: Vec<&str> = header_line.split('\t').collect();
    let col_index = |column: &str| -> Result<usize, IngestError> {
        header
            .iter()
            .position(|h| *h == column)
            .ok_or_else(|| IngestError::MissingColumn {
                path: path.to_path_buf(),
                column: column.to_string(),
                header: header.join(", "),
            })
    };

    let mut field_cols = Vec::new();
    for field in &task.input_fields {
        let column = &columns.fields[field];
        field_cols.push((field.clone(), column.clone(), col_index(column)?));
    }
    let label_col = match &columns.label_column {
        Some(c) => Some((c.clone(), col_index(c)?)),
        None => None,
    };
    let id_col = match &columns.id_column {
        Some(c) => Some((c.clone(), col_index(c)?)),
        None => None,
    };

    let mut examples = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        let cell = |column: &str, idx: usize| -> Result<&str, IngestError> {
            cells
                .get(idx)
                .copied()
                .ok_or_else(|| IngestError::MissingValue {
                    path: path.to_path_buf(),
                    row,
                    column: column.to_string(),
                })
        };
        let mut field_values = BTreeMap::new();
        for (field, column, idx) in &field_cols {
            field_values.insert(field.clone(), cell(column, *idx)?.to_string());
        }
        let gold_label = match &label_col {
            Some((column, idx)) => Some(canonical_label(cell(column, *idx)?, task, path, row)?),
            None => None,
        };
        let example_id = match &id_col {
            Some((column, idx)) => cell(column, *idx)?.to_string(),
            None => format!("r{row}"),
        };
        examples.push(Example::new(example_id, field_values, gold_label));
    }
    Ok(examples)
}

fn parse_jsonl(
    text: &str,
    path: &Path,
    columns: &ColumnMap,
    task: &TaskSpec,
) -> Result<Vec<Example>, IngestError> {
    let malformed = |row: usize, message: String| IngestError::Malformed {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut examples = Vec::new();
    let mut row = 0usize;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| malformed(row, format!("invalid JSON: {e}")))?;
        let object = value
            .as_object()
            .ok_or_else(|| malformed(row, "line is not a JSON object".into()))?;
        let scalar = |column: &str| -> Result<Option<String>, IngestError> {
            match object.get(column) {
                None | Some(serde_json::Value::Null) => Ok(None),
                Some(serde_json::Value::String(s)) => Ok(Some(s.clone())),
                Some(v @ serde_json::Value::Number(_)) | Some(v @ serde_json::Value::Bool(_)) => {
                    Ok(Some(v.to_string()))
                }
                Some(_) => Err(malformed(row, format!("column `{column}` is not a scalar"))),
            }
        };
        let required = |column: &str| -> Result<String, IngestError> {
            scalar(column)?.ok_or_else(|| IngestError::MissingValue {
                path: path.to_path_buf(),
                row,
                column: column.to_string(),
            })
        };

        let mut field_values = BTreeMap::new();
        for field in &task.input_fields {
            let column = &columns.fields[field];
            field_values.insert(field.clone(), required(column)?);
        }
        let gold_label = match &columns.label_column {
            Some(column) => Some(canonical_label(&required(column)?, task, path, row)?),
            None => None,
        };
        let example_id = match &columns.id_column {
            Some(column) => required(column)?,
            None => format!("r{row}"),
        };
        examples.push(Example::new(example_id, field_values, gold_label));
        row += 1;
    }
    Ok(examples)
}

/// Draw an unbiased sample in `[0, bound)` by rejection. Implemented here,
/// rather than via a distributions crate, so the byte stream consumed from
/// the seeded generator is pinned by this crate alone: sampled demonstration
/// ids must stay identical across platforms and dependency upgrades.
fn uniform_below(rng: &mut impl Rng, bound: u64) -> u64 {
    debug_assert!(bound > 0);
    // Reject the low region so the remaining range is a multiple of `bound`.
    let threshold = bound.wrapping_neg() % bound;
    loop {
        let v = rng.next_u64();
        if v >= threshold {
            return v % bound;
        }
    }
}

/// Sample `k` demonstrations without replacement, deterministically in `seed`.
/// A Fisher-Yates shuffle of the whole split is taken and truncated, so for a
/// fixed seed the k=8 sample is a prefix of the k=16 sample, and the same
/// demonstrations are shared across every experiment on the dataset.
pub fn sample_demonstrations(
    split: &DatasetSplit,
    k: usize,
    seed: u64,
) -> Result<Vec<Example>, crate::Error> {
    if k > split.len() {
        return Err(crate::Error::Invalid(format!(
            "cannot sample {k} demonstrations from a split of {} examples",
            split.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = split.len();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = uniform_below(&mut rng, (i + 1) as u64) as usize;
        order.swap(i, j);
    }
    Ok(order[..k]
        .iter()
        .map(|&i| split.examples[i].clone())
        .collect())
}
