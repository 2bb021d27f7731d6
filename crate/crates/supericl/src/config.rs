//! TOML experiment files: task data locations, backend declarations, run
//! settings, and the sweep/seed study plans, with CLI-style overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::backend::{BackendKind, BackendRegistry, BackendSpec};
use crate::dataset::{
    builtin_task, load_split, ColumnMap, FileFormat, SplitName, TaskSpec, STANDARD_SHOT_COUNTS,
};
use crate::ensemble::ConfidenceMode;
use crate::error::Error;
use crate::experiment::{enumerate_ensembles, ExperimentConfig, ExperimentData};
use crate::prompt::AblationFlags;
use crate::store::Stores;

pub const DEFAULT_SEEDS: [u64; 5] = [42, 0, 1, 2, 3];

/// Where one task's data lives.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskFile {
    id: String,
    train_path: String,
    /// `tsv` or `jsonl`; inferred from the extension when omitted.
    train_format: Option<String>,
    eval_path: String,
    eval_format: Option<String>,
    columns: Option<ColumnsFile>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ColumnsFile {
    /// Task field name -> source column/key name.
    #[serde(default)]
    fields: BTreeMap<String, String>,
    label: Option<String>,
    id: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlagsFile {
    context_predictions: Option<bool>,
    confidences: Option<bool>,
    test_predictions: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    /// Task id to run; defaults to the first declared task.
    task: Option<String>,
    shots: Option<usize>,
    seed: Option<u64>,
    /// SLM backend ids, in prompt order; empty or omitted means plain ICL.
    #[serde(default)]
    ensemble: Vec<String>,
    /// Defaults to the only chat-capable backend when unambiguous.
    llm_backend: Option<String>,
    /// `sigmoid` (default) or `softmax`.
    confidence_mode: Option<String>,
    max_new_tokens: Option<u32>,
    eval_limit: Option<usize>,
    parallelism: Option<usize>,
    flags: Option<FlagsFile>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathsFile {
    cache_dir: Option<String>,
    runs_dir: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    /// Backend ids to combine; defaults to every declared classifier.
    models: Option<Vec<String>>,
    /// Smallest ensemble size; defaults to 2 (pairs and up).
    min_size: Option<usize>,
    /// Largest ensemble size; defaults to the full model list.
    max_size: Option<usize>,
    /// Shot settings; defaults to the standard ladder.
    shots: Option<Vec<usize>>,
    /// Also run the no-ensemble baseline at each shot setting.
    include_baseline: Option<bool>,
}

/// Parsed experiment file, paths unresolved.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    task: Option<TaskFile>,
    #[serde(default)]
    tasks: Vec<TaskFile>,
    #[serde(default)]
    run: RunFile,
    #[serde(default)]
    backends: Vec<BackendSpec>,
    #[serde(default)]
    paths: PathsFile,
    sweep: Option<SweepFile>,
    seeds: Option<Vec<u64>>,
}

/// CLI-level overrides layered on top of the file's `[run]` section.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub task: Option<String>,
    pub shots: Option<usize>,
    pub seed: Option<u64>,
    /// `Some(vec![])` forces the no-ensemble baseline.
    pub ensemble: Option<Vec<String>>,
    pub context_predictions: Option<bool>,
    pub confidences: Option<bool>,
    pub test_predictions: Option<bool>,
    pub eval_limit: Option<usize>,
    pub parallelism: Option<usize>,
}

/// The planned grid for a sweep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepPlan {
    pub ensembles: Vec<Vec<String>>,
    pub shots: Vec<usize>,
}

/// An experiment file plus the directory its relative paths resolve against.
#[derive(Debug)]
pub struct LoadedExperiment {
    file: ExperimentFile,
    base_dir: PathBuf,
}

fn parse_format(value: &str) -> Result<FileFormat, Error> {
    match value {
        "tsv" => Ok(FileFormat::Tsv),
        "jsonl" => Ok(FileFormat::Jsonl),
        other => Err(Error::Config(format!(
            "unknown file format `{other}` (expected `tsv` or `jsonl`)"
        ))),
    }
}

fn infer_format(path: &str, explicit: Option<&str>) -> Result<FileFormat, Error> {
    if let Some(value) = explicit {
        return parse_format(value);
    }
    match Path::new(path).extension().and_then(|e| e.to_str()) {
        Some("tsv") => Ok(FileFormat::Tsv),
        Some("jsonl") | Some("json") => Ok(FileFormat::Jsonl),
        _ => Err(Error::Config(format!(
            "cannot infer a file format from `{path}`; set the format explicitly"
        ))),
    }
}

fn parse_confidence_mode(value: &str) -> Result<ConfidenceMode, Error> {
    match value {
        "sigmoid" => Ok(ConfidenceMode::Sigmoid),
        "softmax" => Ok(ConfidenceMode::Softmax),
        other => Err(Error::Config(format!(
            "unknown confidence mode `{other}` (expected `sigmoid` or `softmax`)"
        ))),
    }
}

impl LoadedExperiment {
    /// Read and parse an experiment file. Relative paths inside it resolve
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read `{}`: {e}", path.display())))?;
        let file: ExperimentFile = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("`{}`: {e}", path.display())))?;
        let base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let loaded = LoadedExperiment { file, base_dir };
        loaded.check_declarations()?;
        Ok(loaded)
    }

    fn check_declarations(&self) -> Result<(), Error> {
        let mut task_ids = std::collections::BTreeSet::new();
        for task in self.task_files() {
            if !task_ids.insert(task.id.as_str()) {
                return Err(Error::Config(format!(
                    "task `{}` is declared twice",
                    task.id
                )));
            }
        }
        let mut backend_ids = std::collections::BTreeSet::new();
        for backend in &self.file.backends {
            if !backend_ids.insert(backend.backend_id.as_str()) {
                return Err(Error::Config(format!(
                    "backend `{}` is declared twice",
                    backend.backend_id
                )));
            }
        }
        Ok(())
    }

    fn task_files(&self) -> impl Iterator<Item = &TaskFile> {
        self.file.task.iter().chain(self.file.tasks.iter())
    }

    fn task_file(&self, task_id: &str) -> Result<&TaskFile, Error> {
        self.task_files().find(|t| t.id == task_id).ok_or_else(|| {
            let known: Vec<&str> = self.task_files().map(|t| t.id.as_str()).collect();
            Error::Config(if known.is_empty() {
                format!("task `{task_id}` requested but the file declares no tasks")
            } else {
                format!(
                    "task `{task_id}` is not declared (declared: {})",
                    known.join(", ")
                )
            })
        })
    }

    /// Ids of every declared task, in declaration order.
    pub fn task_ids(&self) -> Vec<String> {
        self.task_files().map(|t| t.id.clone()).collect()
    }

    pub fn backend_specs(&self) -> &[BackendSpec] {
        &self.file.backends
    }

    fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn default_llm_backend(&self) -> Result<String, Error> {
        let candidates: Vec<&BackendSpec> = self
            .file
            .backends
            .iter()
            .filter(|b| matches!(b.kind, BackendKind::LlmChat | BackendKind::Fixture))
            .collect();
        match candidates.as_slice() {
            [only] => Ok(only.backend_id.clone()),
            [] => Err(Error::Config(
                "no chat-capable backend is declared; add an `llm_chat` or \
                 `fixture` entry under [[backends]]"
                    .into(),
            )),
            _ => Err(Error::Config(
                "several chat-capable backends are declared; set run.llm_backend".into(),
            )),
        }
    }

    fn backend_spec(&self, id: &str) -> Result<&BackendSpec, Error> {
        self.file
            .backends
            .iter()
            .find(|b| b.backend_id == id)
            .ok_or_else(|| Error::Config(format!("backend `{id}` is not declared")))
    }

    /// The run configuration after layering `[run]` and the overrides over
    /// the defaults, validated.
    pub fn effective_config(&self, overrides: &Overrides) -> Result<ExperimentConfig, Error> {
        let run = &self.file.run;
        let task_id = overrides
            .task
            .clone()
            .or_else(|| run.task.clone())
            .or_else(|| self.task_files().next().map(|t| t.id.clone()))
            .ok_or_else(|| Error::Config("no tasks are declared and none was requested".into()))?;
        self.task_file(&task_id)?;

        let llm_backend_id = match &run.llm_backend {
            Some(id) => {
                let spec = self.backend_spec(id)?;
                if spec.kind == BackendKind::SlmClassifier {
                    return Err(Error::Config(format!(
                        "run.llm_backend `{id}` is a classifier backend"
                    )));
                }
                id.clone()
            }
            None => self.default_llm_backend()?,
        };

        let ensemble_forced_empty = matches!(&overrides.ensemble, Some(ids) if ids.is_empty());
        let ensemble = overrides
            .ensemble
            .clone()
            .unwrap_or_else(|| run.ensemble.clone());
        for id in &ensemble {
            let spec = self.backend_spec(id)?;
            if spec.kind == BackendKind::LlmChat {
                return Err(Error::Config(format!(
                    "ensemble member `{id}` is a chat backend, not a classifier"
                )));
            }
        }

        // Flags default to everything when there is an ensemble to draw on.
        let mut flags = if ensemble.is_empty() {
            AblationFlags::none()
        } else {
            AblationFlags::all_enabled()
        };
        if let (Some(file_flags), false) = (&run.flags, ensemble_forced_empty) {
            if let Some(v) = file_flags.context_predictions {
                flags.include_context_predictions = v;
            }
            if let Some(v) = file_flags.confidences {
                flags.include_confidences = v;
            }
            if let Some(v) = file_flags.test_predictions {
                flags.include_test_predictions = v;
            }
        }
        if let Some(v) = overrides.context_predictions {
            flags.include_context_predictions = v;
        }
        if let Some(v) = overrides.confidences {
            flags.include_confidences = v;
        }
        if let Some(v) = overrides.test_predictions {
            flags.include_test_predictions = v;
        }

        let confidence_mode = match &run.confidence_mode {
            Some(value) => parse_confidence_mode(value)?,
            None => ConfidenceMode::Sigmoid,
        };

        let config = ExperimentConfig {
            task_id,
            shots: overrides.shots.or(run.shots).unwrap_or(0),
            seed: overrides.seed.or(run.seed).unwrap_or(42),
            ensemble,
            flags,
            llm_backend_id,
            confidence_mode,
            max_new_tokens: run.max_new_tokens.unwrap_or(8),
            eval_limit: overrides.eval_limit.or(run.eval_limit),
            parallelism: overrides.parallelism.or(run.parallelism).unwrap_or(1),
        };
        config.validate()?;
        Ok(config)
    }

    /// Load one task's train and eval splits from the declared files.
    pub fn load_data(&self, task_id: &str) -> Result<ExperimentData, Error> {
        let task_file = self.task_file(task_id)?;
        let task = builtin_task(task_id)?;
        let columns = match &task_file.columns {
            Some(c) => {
                let mut map = ColumnMap::identity(&task);
                for (field, column) in &c.fields {
                    if !task.input_fields.iter().any(|f| f == field) {
                        return Err(Error::Config(format!(
                            "task `{task_id}` has no field `{field}` (fields: {})",
                            task.input_fields.join(", ")
                        )));
                    }
                    map.fields.insert(field.clone(), column.clone());
                }
                if let Some(label) = &c.label {
                    map.label_column = Some(label.clone());
                }
                map.id_column = c.id.clone();
                map
            }
            None => ColumnMap::identity(&task),
        };
        let train = load_split(
            &self.resolve(&task_file.train_path),
            infer_format(&task_file.train_path, task_file.train_format.as_deref())?,
            &columns,
            &task,
            SplitName::Train,
        )?;
        let eval = load_split(
            &self.resolve(&task_file.eval_path),
            infer_format(&task_file.eval_path, task_file.eval_format.as_deref())?,
            &columns,
            &task,
            SplitName::Eval,
        )?;
        ExperimentData::new(task, train, eval)
    }

    /// The builtin task description for one declared task.
    pub fn task_spec(&self, task_id: &str) -> Result<TaskSpec, Error> {
        self.task_file(task_id)?;
        builtin_task(task_id)
    }

    /// Build live/fixture backends from the declarations. Fixture paths are
    /// resolved against the config file's directory.
    pub fn build_registry(&self) -> Result<BackendRegistry, Error> {
        let mut specs = self.file.backends.clone();
        for spec in &mut specs {
            if spec.kind == BackendKind::Fixture {
                spec.endpoint_url = self.resolve(&spec.endpoint_url).display().to_string();
            }
        }
        Ok(BackendRegistry::from_specs(&specs)?)
    }

    /// Open the annotation/completion caches and the run store at the
    /// configured (or default `cache`/`runs`) locations.
    pub fn open_stores(&self) -> Result<Stores, Error> {
        let cache_dir = self.resolve(self.file.paths.cache_dir.as_deref().unwrap_or("cache"));
        let runs_dir = self.resolve(self.file.paths.runs_dir.as_deref().unwrap_or("runs"));
        Ok(Stores::open(&cache_dir, &runs_dir)?)
    }

    /// Directory the run store writes into.
    pub fn runs_dir(&self) -> PathBuf {
        self.resolve(self.file.paths.runs_dir.as_deref().unwrap_or("runs"))
    }

    /// The ensemble/shots grid for `sweep`, from the `[sweep]` section or
    /// its defaults: every classifier backend, sizes 2 and up, the standard
    /// shot ladder.
    pub fn sweep_plan(&self) -> Result<SweepPlan, Error> {
        let sweep = self.file.sweep.clone().unwrap_or_default();
        let models = match sweep.models {
            Some(models) => {
                for id in &models {
                    let spec = self.backend_spec(id)?;
                    if spec.kind == BackendKind::LlmChat {
                        return Err(Error::Config(format!(
                            "sweep model `{id}` is a chat backend, not a classifier"
                        )));
                    }
                }
                models
            }
            None => {
                let llm = self
                    .file
                    .run
                    .llm_backend
                    .clone()
                    .or_else(|| self.default_llm_backend().ok());
                self.file
                    .backends
                    .iter()
                    .filter(|b| b.kind != BackendKind::LlmChat)
                    .filter(|b| Some(&b.backend_id) != llm.as_ref())
                    .map(|b| b.backend_id.clone())
                    .collect()
            }
        };
        if models.is_empty() {
            return Err(Error::Config(
                "the sweep has no classifier backends to combine".into(),
            ));
        }
        let min_size = sweep.min_size.unwrap_or_else(|| 2.min(models.len()));
        let max_size = sweep.max_size.unwrap_or(models.len());
        let mut ensembles = Vec::new();
        if sweep.include_baseline.unwrap_or(false) {
            ensembles.push(Vec::new());
        }
        ensembles.extend(enumerate_ensembles(&models, min_size, max_size)?);
        let shots = sweep.shots.unwrap_or_else(|| STANDARD_SHOT_COUNTS.to_vec());
        if shots.is_empty() {
            return Err(Error::Config("the sweep has no shot settings".into()));
        }
        Ok(SweepPlan { ensembles, shots })
    }

    /// Seeds for the seed-sensitivity study; `[seeds]` or 42,0,1,2,3.
    pub fn seeds(&self) -> Vec<u64> {
        self.file
            .seeds
            .clone()
            .unwrap_or_else(|| DEFAULT_SEEDS.to_vec())
    }
}
