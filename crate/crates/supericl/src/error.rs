//! Error types shared across the crate, and their mapping to process exit codes.

use std::path::PathBuf;

use thiserror::Error;

/// Top-level error for engine operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (files, overrides, task wiring).
    #[error("config: {0}")]
    Config(String),

    /// Dataset file could not be ingested.
    #[error(transparent)]
    Ingest(#[from] IngestError),

    /// A model backend failed (transport, protocol, auth, missing fixture).
    #[error(transparent)]
    Backend(#[from] BackendError),

    /// Cache or run-store failure.
    #[error(transparent)]
    Store(#[from] StoreError),

    /// A run stopped early; completed records and an aborted manifest were written.
    #[error("run `{run_id}` aborted after {completed} of {total} examples: {source}")]
    RunAborted {
        run_id: String,
        completed: usize,
        total: usize,
        #[source]
        source: Box<Error>,
    },

    /// More than half of the completions failed to parse into a label.
    #[error(
        "{failures} of {total} completions failed to parse into a label; \
         the prompt and backend are likely mismatched (run `{run_id}`)"
    )]
    ParseCatastrophe {
        run_id: String,
        failures: usize,
        total: usize,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Precondition violation on an engine operation (bad bounds, empty input, ...).
    #[error("{0}")]
    Invalid(String),
}

/// Exit codes used by the command-line entry point. Each failure class gets a
/// distinct code so callers can branch without scraping stderr.
pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const GENERIC: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const BACKEND: i32 = 3;
    pub const CACHE_INTEGRITY: i32 = 4;
    pub const PARSE_CATASTROPHE: i32 = 5;
}

impl Error {
    /// The process exit code this error maps to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Ingest(_) | Error::Invalid(_) => exit_code::CONFIG,
            Error::Backend(_) => exit_code::BACKEND,
            Error::Store(e) => e.exit_code(),
            Error::RunAborted { source, .. } => source.exit_code(),
            Error::ParseCatastrophe { .. } => exit_code::PARSE_CATASTROPHE,
            Error::Io(_) => exit_code::GENERIC,
        }
    }
}

/// Failure while reading a dataset file into a split.
#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: cannot read: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: missing column `{column}` (header has: {header})")]
    MissingColumn {
        path: PathBuf,
        column: String,
        header: String,
    },

    #[error("{path} row {row}: missing value for column `{column}`")]
    MissingValue {
        path: PathBuf,
        row: usize,
        column: String,
    },

    #[error("{path} row {row}: label `{value}` is not in the label space [{labels}]")]
    UnknownLabel {
        path: PathBuf,
        row: usize,
        value: String,
        labels: String,
    },

    #[error("{path} row {row}: {message}")]
    Malformed {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("duplicate example id `{example_id}` in {split} split")]
    DuplicateId { example_id: String, split: String },

    #[error("{0}")]
    InvalidSpec(String),
}

/// Failure while talking to a model backend.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend `{backend_id}`: transport failure after {attempts} attempt(s) to {endpoint}: {message}")]
    Transport {
        backend_id: String,
        endpoint: String,
        attempts: u32,
        message: String,
    },

    #[error("backend `{backend_id}`: HTTP {status} from {endpoint}: {body_excerpt}")]
    Http {
        backend_id: String,
        endpoint: String,
        status: u16,
        body_excerpt: String,
    },

    /// The server answered, but not in the shape the protocol requires.
    #[error("backend `{backend_id}`: protocol error: {message}")]
    Protocol { backend_id: String, message: String },

    #[error("backend `{backend_id}`: fixture has no entry for {key}")]
    FixtureMiss { backend_id: String, key: String },

    #[error("backend `{backend_id}`: auth env var `{var}` is not set")]
    MissingAuth { backend_id: String, var: String },

    #[error("backend `{backend_id}`: {message}")]
    Init { backend_id: String, message: String },

    #[error("unknown backend id `{0}`")]
    Unknown(String),
}

/// Failure in the annotation/completion caches or the run store.
#[derive(Debug, Error)]
pub enum StoreError {
    /// Checksum mismatch, unparseable line, or an attempt to rewrite a cached
    /// value with different content. Never silently recovered.
    #[error("cache integrity: {path}: {message}")]
    Integrity { path: PathBuf, message: String },

    /// Another process holds the cache lock.
    #[error("cache locked: {path} exists; remove it if no other process is running")]
    Locked { path: PathBuf },

    #[error("unknown run id `{run_id}`")]
    RunNotFound { run_id: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Report(String),
}

impl StoreError {
    fn exit_code(&self) -> i32 {
        match self {
            StoreError::Integrity { .. } | StoreError::Locked { .. } => exit_code::CACHE_INTEGRITY,
            StoreError::RunNotFound { .. } | StoreError::Report(_) => exit_code::CONFIG,
            StoreError::Io { .. } => exit_code::GENERIC,
        }
    }
}
