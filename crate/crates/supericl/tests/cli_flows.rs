//! End-to-end flows through the compiled binary: every subcommand runs
//! against fixture backends in a temporary directory, and the exit-code
//! contract is checked for config errors and parse catastrophes.
//!
//! Fixture completions are keyed by prompt hash, so these tests rebuild each
//! expected prompt with the library exactly the way the engine does and
//! record the answer the scripted model should give.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use supericl::backend::LogitVector;
use supericl::dataset::{
    builtin_task, load_split, render_input, sample_demonstrations, ColumnMap, DatasetSplit,
    Example, FileFormat, SplitName, TaskSpec,
};
use supericl::ensemble::{annotate, AnnotationSet, ConfidenceMode};
use supericl::experiment::ablation_variants;
use supericl::prompt::{build_prompt, AblationFlags, DemonstrationBlock};

const BIN: &str = env!("CARGO_BIN_EXE_supericl");
const SLM_MODEL: &str = "Fixture-SLM";

// ---------------------------------------------------------------------------
// Scenario construction
// ---------------------------------------------------------------------------

/// (id, sentence, gold) rows with alternating labels, starting positive.
fn rows(prefix: &str, n: usize) -> Vec<(String, String, String)> {
    (0..n)
        .map(|i| {
            let gold = if i % 2 == 0 { "positive" } else { "negative" };
            (
                format!("{prefix}{i}"),
                format!("fixture review {prefix}{i} leaning {gold}"),
                gold.to_string(),
            )
        })
        .collect()
}

fn write_tsv(path: &Path, rows: &[(String, String, String)]) {
    let mut text = String::from("id\tsentence\tlabel\n");
    for (id, sentence, gold) in rows {
        text.push_str(&format!("{id}\t{sentence}\t{gold}\n"));
    }
    fs::write(path, text).unwrap();
}

struct Corpus {
    task: TaskSpec,
    train: DatasetSplit,
    eval: DatasetSplit,
}

/// Write train/eval TSVs (with explicit id columns, so train and eval ids
/// never collide in the annotation cache) and load them back through the
/// production loader.
fn write_data(dir: &Path) -> Corpus {
    write_tsv(&dir.join("train.tsv"), &rows("t", 8));
    write_tsv(&dir.join("eval.tsv"), &rows("e", 6));
    let task = builtin_task("sst2").unwrap();
    let columns = ColumnMap {
        fields: BTreeMap::from([("sentence".to_string(), "sentence".to_string())]),
        label_column: Some("label".to_string()),
        id_column: Some("id".to_string()),
    };
    let train = load_split(
        &dir.join("train.tsv"),
        FileFormat::Tsv,
        &columns,
        &task,
        SplitName::Train,
    )
    .unwrap();
    let eval = load_split(
        &dir.join("eval.tsv"),
        FileFormat::Tsv,
        &columns,
        &task,
        SplitName::Eval,
    )
    .unwrap();
    Corpus { task, train, eval }
}

/// Experiment file with two fixture backends sharing one replay file.
fn write_config(dir: &Path, run_toml: &str, extra_toml: &str) -> PathBuf {
    let text = format!(
        r#"[task]
id = "sst2"
train_path = "train.tsv"
eval_path = "eval.tsv"
columns = {{ id = "id", label = "label", fields = {{ sentence = "sentence" }} }}

[paths]
cache_dir = "cache"
runs_dir = "runs"

[run]
llm_backend = "fx-llm"
{run_toml}

{extra_toml}

[[backends]]
backend_id = "fx-llm"
kind = "fixture"
endpoint_url = "fixture.jsonl"
model_name = "Fixture-LLM"

[[backends]]
backend_id = "fx-slm"
kind = "fixture"
endpoint_url = "fixture.jsonl"
model_name = "Fixture-SLM"
"#
    );
    let path = dir.join("experiment.toml");
    fs::write(&path, text).unwrap();
    path
}

// ---------------------------------------------------------------------------
// Fixture content
// ---------------------------------------------------------------------------

fn logits_for(gold: &str) -> Vec<f64> {
    if gold == "positive" {
        vec![2.5, -2.5]
    } else {
        vec![-2.5, 2.5]
    }
}

fn flip(gold: &str) -> &'static str {
    if gold == "positive" {
        "negative"
    } else {
        "positive"
    }
}

fn annotations_for(task: &TaskSpec, example: &Example) -> AnnotationSet {
    let gold = example.gold_label.as_deref().unwrap();
    AnnotationSet::new(vec![annotate(
        &LogitVector::new(logits_for(gold)).unwrap(),
        &task.label_space,
        SLM_MODEL,
        ConfidenceMode::Sigmoid,
    )
    .unwrap()])
    .unwrap()
}

/// Mirror of the engine's per-example prompt assembly; `ensembled` toggles
/// between the single-classifier setting and the plain baseline.
fn prompt_hash_for(
    corpus: &Corpus,
    demos: &[Example],
    example: &Example,
    flags: &AblationFlags,
    ensembled: bool,
) -> String {
    let task = &corpus.task;
    let blocks: Vec<DemonstrationBlock> = demos
        .iter()
        .map(|demo| DemonstrationBlock {
            rendered_input: render_input(demo, task),
            annotations: if flags.include_context_predictions {
                annotations_for(task, demo)
            } else {
                AnnotationSet::empty()
            },
            gold_label: demo.gold_label.clone().unwrap(),
        })
        .collect();
    let test_annotations = if flags.include_test_predictions {
        annotations_for(task, example)
    } else {
        AnnotationSet::empty()
    };
    let model_names: Vec<String> = if ensembled {
        vec![SLM_MODEL.to_string()]
    } else {
        Vec::new()
    };
    build_prompt(
        task,
        &blocks,
        &render_input(example, task),
        &test_annotations,
        &model_names,
        flags,
    )
    .prompt_hash
}

#[derive(Default)]
struct Fixture {
    logit_lines: Vec<String>,
    completions: BTreeMap<String, String>,
}

impl Fixture {
    /// Classifier logits for every train and eval example.
    fn with_logits(corpus: &Corpus) -> Self {
        let mut fixture = Fixture::default();
        for example in corpus.train.examples().iter().chain(corpus.eval.examples()) {
            let gold = example.gold_label.as_deref().unwrap();
            fixture.logit_lines.push(
                serde_json::json!({
                    "backend_id": "fx-slm",
                    "task_id": "sst2",
                    "example_id": example.example_id,
                    "logits": logits_for(gold),
                })
                .to_string(),
            );
        }
        fixture
    }

    fn completion(&mut self, prompt_hash: String, text: &str) {
        if let Some(old) = self.completions.insert(prompt_hash, text.to_string()) {
            assert_eq!(old, text, "two scenarios scripted one prompt differently");
        }
    }

    /// Script every eval completion for one (demos, flags, ensembled)
    /// setting via `answer(index, gold)`.
    fn script_eval(
        &mut self,
        corpus: &Corpus,
        demos: &[Example],
        flags: &AblationFlags,
        ensembled: bool,
        answer: impl Fn(usize, &str) -> String,
    ) {
        for (i, example) in corpus.eval.examples().iter().enumerate() {
            let hash = prompt_hash_for(corpus, demos, example, flags, ensembled);
            let gold = example.gold_label.as_deref().unwrap();
            self.completion(hash, &answer(i, gold));
        }
    }

    fn write(&self, path: &Path) {
        let mut lines = self.logit_lines.clone();
        for (hash, completion) in &self.completions {
            lines.push(
                serde_json::json!({"prompt_hash": hash, "completion": completion}).to_string(),
            );
        }
        fs::write(path, lines.join("\n") + "\n").unwrap();
    }
}

// ---------------------------------------------------------------------------
// Process helpers
// ---------------------------------------------------------------------------

fn run_cli(config: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_success(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        stdout_of(out),
        stderr_of(out)
    );
    stdout_of(out)
}

fn assert_exit_code(out: &Output, expected: i32) {
    assert_eq!(
        out.status.code(),
        Some(expected),
        "stdout:\n{}\nstderr:\n{}",
        stdout_of(out),
        stderr_of(out)
    );
}

/// The path printed after `prefix` on its own stdout line.
fn printed_path(stdout: &str, prefix: &str) -> PathBuf {
    let line = stdout
        .lines()
        .find(|l| l.starts_with(prefix))
        .unwrap_or_else(|| panic!("no `{prefix}` line in:\n{stdout}"));
    PathBuf::from(line[prefix.len()..].trim())
}

/// Run directory names under `<dir>/runs`, sorted.
fn run_dirs(dir: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs
}

// ---------------------------------------------------------------------------
// Flows
// ---------------------------------------------------------------------------

#[test]
fn tasks_lists_builtins_and_declared_data() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_data(dir.path());
    Fixture::with_logits(&corpus).write(&dir.path().join("fixture.jsonl"));
    let config = write_config(dir.path(), "shots = 0\nensemble = [\"fx-slm\"]", "");

    let stdout = assert_success(&run_cli(&config, &["tasks"]));
    for task_id in ["sst2", "mrpc", "mnli", "cola", "medmcqa"] {
        assert!(stdout.contains(task_id), "missing {task_id} in:\n{stdout}");
    }
    assert!(stdout.contains("matthews correlation"));
    assert!(stdout.contains("data declared in"));

    // Without an experiment file the builtin listing still works.
    let stdout = assert_success(&run_cli(Path::new("no-such-experiment.toml"), &["tasks"]));
    assert!(stdout.contains("medmcqa"));
    assert!(!stdout.contains("data declared in"));
}

#[test]
fn annotate_warms_the_cache_and_reruns_hit_it() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_data(dir.path());
    Fixture::with_logits(&corpus).write(&dir.path().join("fixture.jsonl"));
    let config = write_config(
        dir.path(),
        "shots = 2\nseed = 42\nensemble = [\"fx-slm\"]",
        "",
    );

    // 2 demonstrations + 6 eval examples, one classifier: 8 cold fetches.
    let stdout = assert_success(&run_cli(&config, &["annotate"]));
    assert!(
        stdout.contains(
            "annotated 8 example(s) for sst2 with 1 model(s): 0 cache hit(s), 8 miss(es)"
        ),
        "unexpected annotate summary:\n{stdout}"
    );
    let manifest_path = printed_path(&stdout, "manifest: ");
    assert!(manifest_path.is_file());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
    assert_eq!(manifest["status"]["state"], "complete");
    assert_eq!(manifest["counts"]["annotation_cache_misses"], 8);
    assert_eq!(manifest["demonstration_ids"].as_array().unwrap().len(), 2);

    // Same settings again: everything comes from the cache.
    let stdout = assert_success(&run_cli(&config, &["annotate"]));
    assert!(
        stdout.contains(
            "annotated 8 example(s) for sst2 with 1 model(s): 8 cache hit(s), 0 miss(es)"
        ),
        "rerun did not hit the cache:\n{stdout}"
    );
}

#[test]
fn run_scores_the_fixture_and_reruns_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_data(dir.path());
    let demos = sample_demonstrations(&corpus.train, 2, 42).unwrap();
    let mut fixture = Fixture::with_logits(&corpus);
    // Gold answers except the last eval example: 5/6 correct.
    fixture.script_eval(
        &corpus,
        &demos,
        &AblationFlags::all_enabled(),
        true,
        |i, gold| {
            if i == 5 {
                flip(gold).to_string()
            } else {
                gold.to_string()
            }
        },
    );
    fixture.write(&dir.path().join("fixture.jsonl"));
    let config = write_config(
        dir.path(),
        "shots = 2\nseed = 42\nensemble = [\"fx-slm\"]",
        "",
    );

    let stdout = assert_success(&run_cli(&config, &["run"]));
    assert!(
        stdout.contains("| Run | Mode | Shots | Ensemble | Acc (%) | Eval N | Parse failures |")
    );
    assert!(
        stdout.contains("**83.33**"),
        "missing bold accuracy:\n{stdout}"
    );
    assert!(stdout.contains("| SuperICL |"));
    assert!(
        stdout.contains("2 (non-standard)"),
        "2-shot should be flagged:\n{stdout}"
    );
    assert!(stdout.contains("Acc 83.33 over 6 example(s), 0 parse failure(s), 0 truncated"));
    let report_path = printed_path(&stdout, "report: ");
    assert!(report_path.is_file());

    let dirs = run_dirs(dir.path());
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].join("manifest.json").is_file());
    assert!(dirs[0].join("records.jsonl").is_file());

    // Warm rerun: a new run directory, byte-identical records.
    let stdout = assert_success(&run_cli(&config, &["run"]));
    assert!(stdout.contains("**83.33**"));
    let dirs = run_dirs(dir.path());
    assert_eq!(dirs.len(), 2);
    let first = fs::read(dirs[0].join("records.jsonl")).unwrap();
    let second = fs::read(dirs[1].join("records.jsonl")).unwrap();
    assert_eq!(first, second, "warm rerun changed the records");
}

#[test]
fn report_renders_recorded_runs_and_rejects_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_data(dir.path());
    let demos = sample_demonstrations(&corpus.train, 2, 42).unwrap();
    let mut fixture = Fixture::with_logits(&corpus);
    fixture.script_eval(
        &corpus,
        &demos,
        &AblationFlags::all_enabled(),
        true,
        |_, gold| gold.to_string(),
    );
    fixture.write(&dir.path().join("fixture.jsonl"));
    let config = write_config(
        dir.path(),
        "shots = 2\nseed = 42\nensemble = [\"fx-slm\"]",
        "",
    );
    assert_success(&run_cli(&config, &["run"]));
    let run_id = run_dirs(dir.path())[0]
        .file_name()
        .unwrap()
        .to_string_lossy()
        .into_owned();

    // Default: every recorded run, main shape.
    let stdout = assert_success(&run_cli(&config, &["report"]));
    assert!(stdout.contains("## sst2: runs"));
    assert!(stdout.contains(&run_id));

    // Explicit run list plus the prompt dump.
    let stdout = assert_success(&run_cli(
        &config,
        &["report", "--runs", &run_id, "--show-prompts"],
    ));
    assert!(stdout.contains("--- system prompt for sst2 (Fixture-SLM) ---"));
    assert!(stdout.contains("Fill in your answer after"));
    assert!(stdout.contains("--- user text skeleton ---"));

    // The runs directory flag works without any experiment file.
    let runs_dir = dir.path().join("runs");
    let out = Command::new(BIN)
        .args(["report", "--runs-dir"])
        .arg(&runs_dir)
        .output()
        .unwrap();
    assert!(assert_success(&out).contains("## sst2: runs"));

    // Unknown shape and unknown run id are config errors.
    let out = run_cli(&config, &["report", "--shape", "bogus"]);
    assert_exit_code(&out, 2);
    assert!(stderr_of(&out).contains("unknown report shape `bogus`"));

    let out = run_cli(&config, &["report", "--runs", "ghost"]);
    assert_exit_code(&out, 2);
    assert!(stderr_of(&out).contains("unknown run id `ghost`"));
}

#[test]
fn sweep_runs_the_grid_and_forced_baseline_reuses_it() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_data(dir.path());
    let mut fixture = Fixture::with_logits(&corpus);
    // Zero-shot cells: the single-classifier setting and the plain baseline.
    fixture.script_eval(
        &corpus,
        &[],
        &AblationFlags::all_enabled(),
        true,
        |_, gold| gold.to_string(),
    );
    fixture.script_eval(&corpus, &[], &AblationFlags::none(), false, |_, gold| {
        gold.to_string()
    });
    fixture.write(&dir.path().join("fixture.jsonl"));
    let config = write_config(
        dir.path(),
        "shots = 0\nensemble = [\"fx-slm\"]",
        "[sweep]\nmodels = [\"fx-slm\"]\nshots = [0]\ninclude_baseline = true",
    );

    let stdout = assert_success(&run_cli(&config, &["sweep"]));
    assert!(stdout.contains("## sst2: ensemble sweep (Acc (%))"));
    assert!(stdout.contains("| Ensemble | Size |"));
    assert!(stdout.contains("0-shot |"));
    assert!(stdout.contains("100.00"));
    assert!(stdout.contains("2 cell(s), 0 failed"));
    assert!(printed_path(&stdout, "2 cell(s), 0 failed; report: ").is_file());

    // `--ensemble ""` forces the plain baseline through the same caches.
    let stdout = assert_success(&run_cli(&config, &["run", "--ensemble", ""]));
    assert!(
        stdout.contains("| ICL |"),
        "forced baseline should report ICL:\n{stdout}"
    );
    assert!(stdout.contains("**100.00**"));
}

#[test]
fn ablate_runs_all_four_prompt_variants() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_data(dir.path());
    let demos = sample_demonstrations(&corpus.train, 2, 42).unwrap();
    let mut fixture = Fixture::with_logits(&corpus);
    for (_, flags) in ablation_variants() {
        fixture.script_eval(&corpus, &demos, &flags, true, |_, gold| gold.to_string());
    }
    fixture.write(&dir.path().join("fixture.jsonl"));
    let config = write_config(
        dir.path(),
        "shots = 2\nseed = 42\nensemble = [\"fx-slm\"]",
        "",
    );

    let stdout = assert_success(&run_cli(&config, &["ablate"]));
    assert!(stdout.contains("## sst2: component ablation"));
    assert!(stdout
        .contains("| Variant | Demo predictions | Confidences | Test predictions | Acc (%) |"));
    for row in ["| (1) |", "| (2) |", "| (3) |", "| (4) |"] {
        assert!(stdout.contains(row), "missing {row} in:\n{stdout}");
    }
    assert!(stdout.contains("(1) test predictions only: run "));
    assert!(stdout.contains("(4) full prompt: run "));
    assert!(printed_path(&stdout, "report: ").is_file());
}

#[test]
fn seeds_reports_per_seed_runs_and_variance() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_data(dir.path());
    let mut fixture = Fixture::with_logits(&corpus);
    for seed in [42, 0] {
        let demos = sample_demonstrations(&corpus.train, 2, seed).unwrap();
        fixture.script_eval(
            &corpus,
            &demos,
            &AblationFlags::all_enabled(),
            true,
            |_, gold| gold.to_string(),
        );
    }
    fixture.write(&dir.path().join("fixture.jsonl"));
    let config = write_config(
        dir.path(),
        "shots = 2\nseed = 42\nensemble = [\"fx-slm\"]",
        "",
    );

    let stdout = assert_success(&run_cli(&config, &["seeds", "--seeds", "42,0"]));
    assert!(stdout.contains("## sst2: seed sensitivity (Acc (%))"));
    assert!(stdout.contains("Seed 42"));
    assert!(stdout.contains("Seed 0"));
    assert!(stdout.contains("seed 42: run "));
    assert!(stdout.contains("seed 0: run "));
    // Both seeds answer gold everywhere, so the variance is exactly zero.
    assert!(stdout.contains("sample variance (x100 scale): 0.00"));
}

#[test]
fn mostly_unparseable_completions_exit_five_after_persisting() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_data(dir.path());
    let mut fixture = Fixture::with_logits(&corpus);
    // 4 of 6 completions carry no label at all.
    fixture.script_eval(
        &corpus,
        &[],
        &AblationFlags::all_enabled(),
        true,
        |i, gold| {
            if i < 2 {
                gold.to_string()
            } else {
                "hmm".to_string()
            }
        },
    );
    fixture.write(&dir.path().join("fixture.jsonl"));
    let config = write_config(dir.path(), "shots = 0\nensemble = [\"fx-slm\"]", "");

    let out = run_cli(&config, &["run"]);
    assert_exit_code(&out, 5);
    assert!(stderr_of(&out).contains("4 of 6 completions failed to parse"));

    // The run is persisted before the failure is raised: the table still
    // prints and the manifest and records are on disk.
    let stdout = stdout_of(&out);
    assert!(
        stdout.contains("| Run | Mode | Shots | Ensemble | Acc (%) | Eval N | Parse failures |")
    );
    assert!(stdout.contains("4 parse failure(s)"));
    let dirs = run_dirs(dir.path());
    assert_eq!(dirs.len(), 1);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dirs[0].join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"]["state"], "complete");
    assert_eq!(manifest["counts"]["parse_failures"], 4);
    let records = fs::read_to_string(dirs[0].join("records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 6);
}

#[test]
fn config_problems_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path());

    // Missing experiment file.
    let out = run_cli(&dir.path().join("absent.toml"), &["run"]);
    assert_exit_code(&out, 2);
    assert!(stderr_of(&out).contains("cannot read"));

    // Unparseable TOML.
    let broken = dir.path().join("broken.toml");
    fs::write(&broken, "run = [unclosed").unwrap();
    let out = run_cli(&broken, &["run"]);
    assert_exit_code(&out, 2);
    assert!(stderr_of(&out).contains("error:"));

    // An ensemble member that no [[backends]] entry declares.
    let config = write_config(dir.path(), "shots = 0\nensemble = [\"ghost\"]", "");
    let out = run_cli(&config, &["run"]);
    assert_exit_code(&out, 2);
    assert!(stderr_of(&out).contains("backend `ghost` is not declared"));

    // Unknown subcommands are usage errors; --help is a success.
    let out = run_cli(&config, &["no-such-command"]);
    assert_exit_code(&out, 2);
    let out = run_cli(&config, &["--help"]);
    assert_success(&out);
}

/// A reader hanging up early (`supericl report | head`) must not crash the
/// process. The read end of the pipe is closed before the child spawns, so
/// its very first stdout write sees a broken pipe — no race with buffering.
#[cfg(unix)]
#[test]
fn a_closed_stdout_pipe_is_not_an_error() {
    use std::os::unix::io::FromRawFd;
    use std::process::Stdio;

    let mut fds = [0i32; 2];
    assert_eq!(unsafe { libc::pipe(fds.as_mut_ptr()) }, 0);
    assert_eq!(unsafe { libc::close(fds[0]) }, 0);
    let dead_pipe = unsafe { Stdio::from_raw_fd(fds[1]) };

    let status = Command::new(BIN)
        .args(["--config", "absent.toml", "tasks"])
        .stdout(dead_pipe)
        .stderr(Stdio::null())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0), "broken pipe must exit quietly");
}
