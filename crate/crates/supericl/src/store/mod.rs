//! Persistence: append-only, checksummed JSONL caches for annotations and
//! completions, and a run store holding records, manifests, and reports.
//!
//! Cache lines carry a SHA-256 of their payload. A line that fails its
//! checksum, or an attempt to rewrite a key with different content, is a hard
//! integrity error — the engine never silently recomputes over corrupt state.

mod report;

pub use report::{render_report, ReportShape};

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{Completion, DecodeParams};
use crate::dataset::Metric;
use crate::ensemble::{ConfidenceMode, SlmAnnotation};
use crate::error::StoreError;
use crate::experiment::{ExperimentConfig, RunRecord};

/// Milliseconds since the Unix epoch.
pub fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Cache key for one SLM verdict. The confidence mode is part of the key:
/// sigmoid and softmax scores must never shadow each other.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationKey {
    pub backend_id: String,
    pub task_id: String,
    pub example_id: String,
    pub confidence_mode: ConfidenceMode,
}

/// Cached SLM output: the raw logits and the annotation derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationValue {
    pub logits: Vec<f64>,
    pub annotation: SlmAnnotation,
}

/// Cache key for one completion: the prompt hash plus everything else that
/// could change the answer (backend and decode parameters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionKey {
    pub prompt_hash: String,
    pub backend_id: String,
    pub decode: DecodeParams,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

impl std::ops::Sub for CacheStats {
    type Output = CacheStats;
    fn sub(self, rhs: CacheStats) -> CacheStats {
        CacheStats {
            hits: self.hits - rhs.hits,
            misses: self.misses - rhs.misses,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Entry<K, V> {
    key: K,
    value: V,
}

#[derive(Serialize, Deserialize)]
struct Line<K, V> {
    entry: Entry<K, V>,
    sha256: String,
}

fn payload_checksum(entry_json: &str) -> String {
    hex::encode(Sha256::digest(entry_json.as_bytes()))
}

/// Advisory lock: a sibling `.lock` file created exclusively and removed on
/// drop. Two processes appending to one cache would interleave lines.
#[derive(Debug)]
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(cache_path: &Path) -> Result<Self, StoreError> {
        let mut name = cache_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "cache".into());
        name.push_str(".lock");
        let path = cache_path.with_file_name(name);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(LockGuard { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(StoreError::Locked { path })
            }
            Err(source) => Err(StoreError::Io { path, source }),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug)]
struct CacheInner<V> {
    /// canonical key JSON -> (value, canonical value JSON)
    index: HashMap<String, (V, String)>,
    writer: File,
}

/// Append-only JSONL cache with per-line checksums. Values are compared by
/// their canonical JSON, so replaying an identical insert is a no-op while a
/// conflicting one is an integrity error.
#[derive(Debug)]
struct JsonlCache<K, V> {
    path: PathBuf,
    inner: Mutex<CacheInner<V>>,
    hits: AtomicU64,
    misses: AtomicU64,
    _lock: LockGuard,
    _key: PhantomData<K>,
}

impl<K, V> JsonlCache<K, V>
where
    K: Serialize + DeserializeOwned,
    V: Serialize + DeserializeOwned + Clone,
{
    fn open(path: &Path) -> Result<Self, StoreError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| StoreError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        let lock = LockGuard::acquire(path)?;
        let mut index = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|source| StoreError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            for (line_no, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let integrity = |message: String| StoreError::Integrity {
                    path: path.to_path_buf(),
                    message: format!("line {}: {message}", line_no + 1),
                };
                let parsed: Line<K, V> = serde_json::from_str(line)
                    .map_err(|e| integrity(format!("unreadable cache line: {e}")))?;
                let entry_json = serde_json::to_string(&parsed.entry)
                    .map_err(|e| integrity(format!("cannot reserialize entry: {e}")))?;
                if payload_checksum(&entry_json) != parsed.sha256 {
                    return Err(integrity("checksum mismatch".into()));
                }
                let key_json = serde_json::to_string(&parsed.entry.key)
                    .map_err(|e| integrity(format!("cannot reserialize key: {e}")))?;
                let value_json = serde_json::to_string(&parsed.entry.value)
                    .map_err(|e| integrity(format!("cannot reserialize value: {e}")))?;
                index.insert(key_json, (parsed.entry.value, value_json));
            }
        }
        let writer = OpenOptions::new()
            .append(true)
            .create(true)
            .open(path)
            .map_err(|source| StoreError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(JsonlCache {
            path: path.to_path_buf(),
            inner: Mutex::new(CacheInner { index, writer }),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            _lock: lock,
            _key: PhantomData,
        })
    }

    fn key_json(&self, key: &K) -> Result<String, StoreError> {
        serde_json::to_string(key).map_err(|e| StoreError::Integrity {
            path: self.path.clone(),
            message: format!("unserializable key: {e}"),
        })
    }

    fn get(&self, key: &K) -> Result<Option<V>, StoreError> {
        let key_json = self.key_json(key)?;
        let inner = self.inner.lock().unwrap();
        Ok(inner.index.get(&key_json).map(|(v, _)| v.clone()))
    }

    /// Insert, tolerating byte-identical replays and rejecting conflicts.
    fn insert(&self, key: &K, value: &V) -> Result<(), StoreError> {
        let key_json = self.key_json(key)?;
        self.insert_with_json(key_json, key, value)
    }

    fn insert_with_json(&self, key_json: String, key: &K, value: &V) -> Result<(), StoreError> {
        let integrity = |message: String| StoreError::Integrity {
            path: self.path.clone(),
            message,
        };
        let value_json = serde_json::to_string(value)
            .map_err(|e| integrity(format!("unserializable value: {e}")))?;
        let mut inner = self.inner.lock().unwrap();
        if let Some((_, existing_json)) = inner.index.get(&key_json) {
            if *existing_json == value_json {
                return Ok(());
            }
            return Err(integrity(format!(
                "conflicting value for key {key_json}: cached {existing_json}, new {value_json}"
            )));
        }
        let entry_json = format!("{{\"key\":{key_json},\"value\":{value_json}}}");
        debug_assert_eq!(
            entry_json,
            serde_json::to_string(&Entry { key, value }).unwrap()
        );
        let sha256 = payload_checksum(&entry_json);
        let line = format!("{{\"entry\":{entry_json},\"sha256\":\"{sha256}\"}}\n");
        inner
            .writer
            .write_all(line.as_bytes())
            .and_then(|_| inner.writer.flush())
            .map_err(|source| StoreError::Io {
                path: self.path.clone(),
                source,
            })?;
        inner.index.insert(key_json, (value.clone(), value_json));
        Ok(())
    }

    /// Cache-first lookup. The compute closure runs outside the cache lock,
    /// so slow backend calls do not serialize unrelated lookups.
    fn get_or_compute(
        &self,
        key: &K,
        compute: impl FnOnce() -> Result<V, crate::Error>,
    ) -> Result<(V, bool), crate::Error> {
        if let Some(value) = self.get(key)? {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok((value, true));
        }
        let value = compute()?;
        self.misses.fetch_add(1, Ordering::SeqCst);
        self.insert(key, &value)?;
        Ok((value, false))
    }

    fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
        }
    }

    fn len(&self) -> usize {
        self.inner.lock().unwrap().index.len()
    }
}

/// Cache of SLM annotations keyed by (backend, task, example, mode).
#[derive(Debug)]
pub struct AnnotationStore {
    cache: JsonlCache<AnnotationKey, AnnotationValue>,
}

impl AnnotationStore {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        Ok(AnnotationStore {
            cache: JsonlCache::open(path)?,
        })
    }

    pub fn get(&self, key: &AnnotationKey) -> Result<Option<AnnotationValue>, StoreError> {
        self.cache.get(key)
    }

    /// Returns the value and whether it was a cache hit.
    pub fn get_or_compute(
        &self,
        key: &AnnotationKey,
        compute: impl FnOnce() -> Result<AnnotationValue, crate::Error>,
    ) -> Result<(AnnotationValue, bool), crate::Error> {
        self.cache.get_or_compute(key, compute)
    }

    pub fn stats(&self) -> CacheStats {
        self.cache.stats()
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cache of LLM completions keyed by (prompt hash, backend, decode params).
#[derive(Debug)]
pub struct CompletionStore {
    cache: JsonlCache<CompletionKey, Completion>,
}

impl CompletionStore {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        Ok(CompletionStore {
            cache: JsonlCache::open(path)?,
        })
    }

    pub fn get(&self, key: &CompletionKey) -> Result<Option<Completion>, StoreError> {
        self.cache.get(key)
    }

    /// Returns the completion and whether it was a cache hit.
    pub fn get_or_complete(
        &self,
        key: &CompletionKey,
        compute: impl FnOnce() -> Result<Completion, crate::Error>,
    ) -> Result<(Completion, bool), crate::Error> {
        self.cache.get_or_compute(key, compute)
    }

    pub fn stats(&self) -> CacheStats {
        self.cache.stats()
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Outcome of a finished or aborted run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Aborted { error: String },
}

/// Work and cache tallies for one run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub eval_examples: usize,
    pub demonstrations: usize,
    pub parse_failures: usize,
    pub truncated: usize,
    pub annotation_cache_hits: u64,
    pub annotation_cache_misses: u64,
    pub completion_cache_hits: u64,
    pub completion_cache_misses: u64,
}

/// The scored metric, both raw and formatted for tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: Metric,
    /// Raw value: accuracy in [0,1], correlation in [-1,1].
    pub value: f64,
    /// Table form: value x100 at two decimals.
    pub percent: String,
}

/// Everything needed to audit or re-render a run without re-running it.
/// A manifest with `status: complete` references a complete records file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: ExperimentConfig,
    /// Prompt-facing names of the ensemble members, in ensemble order.
    pub ensemble_model_names: Vec<String>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub status: RunStatus,
    pub counts: RunCounts,
    pub metric: Option<MetricSummary>,
    /// Example ids of the sampled demonstrations, in prompt order.
    pub demonstration_ids: Vec<String>,
    /// Whether the shot count is one of the standard settings.
    pub shots_standard: bool,
    /// Whether the ensemble size is in the standard 0..=5 range.
    pub ensemble_standard: bool,
    /// Records file name inside the run directory, when records were written.
    pub records_file: Option<String>,
}

/// Directory of runs: `<root>/<run_id>/{manifest.json, records.jsonl, report.md}`.
#[derive(Debug)]
pub struct RunStore {
    root: PathBuf,
}

const RECORDS_FILE: &str = "records.jsonl";
const MANIFEST_FILE: &str = "manifest.json";
const REPORT_FILE: &str = "report.md";

impl RunStore {
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(root).map_err(|source| StoreError::Io {
            path: root.to_path_buf(),
            source,
        })?;
        Ok(RunStore {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    pub fn records_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join(RECORDS_FILE)
    }

    pub fn manifest_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join(MANIFEST_FILE)
    }

    /// Reserve a unique run id derived from `hint` and create its directory.
    pub fn allocate_run_id(&self, hint: &str) -> Result<String, StoreError> {
        let base: String = hint
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c.to_ascii_lowercase()
                } else {
                    '-'
                }
            })
            .collect();
        let base = if base.is_empty() {
            "run".to_string()
        } else {
            base
        };
        let mut candidate = base.clone();
        let mut n = 1;
        loop {
            let dir = self.run_dir(&candidate);
            match fs::create_dir(&dir) {
                Ok(()) => return Ok(candidate),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    n += 1;
                    candidate = format!("{base}-{n}");
                }
                Err(source) => return Err(StoreError::Io { path: dir, source }),
            }
        }
    }

    /// Write records as plain JSONL in the given order, replacing any
    /// previous file atomically (write to a temp name, then rename).
    pub fn write_records(&self, run_id: &str, records: &[RunRecord]) -> Result<(), StoreError> {
        let path = self.records_path(run_id);
        let io_err = |path: &Path, source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut text = String::new();
        for record in records {
            let json = serde_json::to_string(record).map_err(|e| StoreError::Integrity {
                path: path.clone(),
                message: format!("unserializable record: {e}"),
            })?;
            text.push_str(&json);
            text.push('\n');
        }
        let tmp = path.with_extension("jsonl.tmp");
        fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
        Ok(())
    }

    pub fn load_records(&self, run_id: &str) -> Result<Vec<RunRecord>, StoreError> {
        let path = self.records_path(run_id);
        if !path.exists() {
            return Err(StoreError::RunNotFound {
                run_id: run_id.to_string(),
            });
        }
        let text = fs::read_to_string(&path).map_err(|source| StoreError::Io {
            path: path.clone(),
            source,
        })?;
        let mut records = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(line).map_err(|e| StoreError::Integrity {
                path: path.clone(),
                message: format!("line {}: unreadable record: {e}", line_no + 1),
            })?;
            records.push(record);
        }
        Ok(records)
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), StoreError> {
        let path = self.manifest_path(&manifest.run_id);
        let json = serde_json::to_string_pretty(manifest).map_err(|e| StoreError::Integrity {
            path: path.clone(),
            message: format!("unserializable manifest: {e}"),
        })?;
        fs::write(&path, json + "\n").map_err(|source| StoreError::Io { path, source })
    }

    pub fn load_manifest(&self, run_id: &str) -> Result<RunManifest, StoreError> {
        let path = self.manifest_path(run_id);
        if !path.exists() {
            return Err(StoreError::RunNotFound {
                run_id: run_id.to_string(),
            });
        }
        let text = fs::read_to_string(&path).map_err(|source| StoreError::Io {
            path: path.clone(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| StoreError::Integrity {
            path,
            message: format!("unreadable manifest: {e}"),
        })
    }

    pub fn write_report(&self, run_id: &str, markdown: &str) -> Result<PathBuf, StoreError> {
        let path = self.run_dir(run_id).join(REPORT_FILE);
        fs::write(&path, markdown).map_err(|source| StoreError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }

    /// Write a cross-run report at the top of the runs directory.
    pub fn write_summary_report(&self, name: &str, markdown: &str) -> Result<PathBuf, StoreError> {
        let path = self.root.join(format!("{name}.md"));
        fs::write(&path, markdown).map_err(|source| StoreError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }

    /// Run ids present on disk, sorted.
    pub fn list_runs(&self) -> Result<Vec<String>, StoreError> {
        let mut runs = Vec::new();
        let entries = fs::read_dir(&self.root).map_err(|source| StoreError::Io {
            path: self.root.clone(),
            source,
        })?;
        for entry in entries.flatten() {
            if entry.path().join(MANIFEST_FILE).exists() {
                runs.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        runs.sort();
        Ok(runs)
    }
}

/// The three persistence surfaces an experiment needs, opened together.
pub struct Stores {
    pub annotations: AnnotationStore,
    pub completions: CompletionStore,
    pub runs: RunStore,
}

impl Stores {
    pub fn open(cache_dir: &Path, runs_dir: &Path) -> Result<Self, StoreError> {
        Ok(Stores {
            annotations: AnnotationStore::open(&cache_dir.join("annotations.jsonl"))?,
            completions: CompletionStore::open(&cache_dir.join("completions.jsonl"))?,
            runs: RunStore::open(runs_dir)?,
        })
    }
}
