//! Running against real HTTP model endpoints: what the shipped configs
//! declare, what the two wire protocols look like, and a connectivity probe
//! that only fires when you opt in.
//!
//! Run with: `cargo run --example live_endpoints [-- path/to/config.toml]`
//! Probe the declared endpoints with: `LIVE_PROBE=1 cargo run --example live_endpoints`

use std::collections::BTreeMap;

use supericl::backend::BackendKind;
use supericl::config::LoadedExperiment;
use supericl::dataset::Example;

fn main() {
    let config_path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| format!("{}/configs/sst2.toml", env!("CARGO_MANIFEST_DIR")));

    println!("# Declared backends ({config_path})\n");
    let loaded = match LoadedExperiment::load(&config_path) {
        Ok(loaded) => loaded,
        Err(e) => {
            eprintln!("cannot load {config_path}: {e}");
            std::process::exit(1);
        }
    };
    for spec in loaded.backend_specs() {
        println!(
            "  {:<14} {:<16} {} (model: {}{})",
            spec.backend_id,
            format!("{:?}", spec.kind),
            spec.endpoint_url,
            spec.model_name,
            spec.auth_env_var
                .as_deref()
                .map(|v| format!(", bearer token from ${v}"))
                .unwrap_or_default(),
        );
    }

    println!("\n# Wire protocols\n");
    println!("Chat endpoints (kind `llm_chat`) receive OpenAI-style JSON:");
    println!(
        "  POST {{\"model\": ..., \"messages\": [{{\"role\": \"system\", ...}}, {{\"role\": \"user\", ...}}],"
    );
    println!("        \"temperature\": 0, \"max_tokens\": N}}");
    println!("and must answer {{\"choices\": [{{\"message\": {{\"content\": ...}}, \"finish_reason\": ...}}]}}.");
    println!();
    println!("Classifier endpoints (kind `slm_classifier`) receive:");
    println!("  POST {{\"model\": ..., \"task_id\": ..., \"inputs\": [{{\"example_id\": ..., \"fields\": {{...}}}}],");
    println!("        \"labels\": [...]}}");
    println!(
        "and must answer {{\"results\": [{{\"example_id\": ..., \"logits\": [...]}}]}} — one logit"
    );
    println!("per declared label, any result order; responses are matched by example id.");
    println!();
    println!("Transient failures (HTTP 5xx/429, transport errors) are retried with");
    println!("backoff up to each backend's max_retries; 4xx fails fast. If a backend");
    println!("declares auth_env_var, requests carry `Authorization: Bearer $VAR`.");

    if std::env::var("LIVE_PROBE").as_deref() != Ok("1") {
        println!("\n# Connectivity probe: skipped\n");
        println!("Set LIVE_PROBE=1 to send one classify request to each declared");
        println!("classifier endpoint. Until your endpoints are up, everything else");
        println!("works offline: see the mock_experiment example and the fixture");
        println!("backend kind for cache- and file-backed runs.");
        return;
    }

    println!("\n# Connectivity probe\n");
    let registry = match loaded.build_registry() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("cannot build backends: {e}");
            std::process::exit(1);
        }
    };
    let task_id = loaded
        .task_ids()
        .into_iter()
        .next()
        .expect("config declares at least one task");
    let task = loaded.task_spec(&task_id).expect("declared task is known");
    let mut fields = BTreeMap::new();
    for field in &task.input_fields {
        fields.insert(field.clone(), format!("probe text for {field}"));
    }
    let probe = Example::new("probe0", fields, None);
    let mut failures = 0;
    for spec in loaded.backend_specs() {
        if spec.kind != BackendKind::SlmClassifier {
            continue;
        }
        match registry.slm(&spec.backend_id) {
            Ok(slm) => match slm.classify(&task, &probe) {
                Ok(logits) => println!(
                    "  {:<14} ok: {} logits {:?}",
                    spec.backend_id,
                    logits.len(),
                    logits.values(),
                ),
                Err(e) => {
                    failures += 1;
                    println!("  {:<14} FAILED: {e}", spec.backend_id);
                }
            },
            Err(e) => {
                failures += 1;
                println!("  {:<14} FAILED: {e}", spec.backend_id);
            }
        }
    }
    if failures > 0 {
        println!("\n{failures} endpoint(s) unreachable. Start your serving stack (or edit");
        println!("the endpoint URLs in the config), then re-run this probe.");
        std::process::exit(1);
    }
    println!("\nAll classifier endpoints answered. You can now run experiments");
    println!("against this config with the CLI: `supericl --config {config_path} run`.");
}
