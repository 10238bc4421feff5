//! End-to-end tests of the `orchestra` binary: exit codes, outputs, and
//! file artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn assets_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/assets/bench")
}

fn orchestra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orchestra"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn q01_text() -> String {
    "Patient Q01 presented for cognitive assessment; structured records are available through \
     the ehr tool. What is the most likely diagnosis for this patient: AD, MCI, or NC?"
        .to_string()
}

#[test]
fn run_executes_a_case_and_writes_traces() {
    let out = tempfile::tempdir().unwrap();
    let output = orchestra(&[
        "run",
        "--registry",
        assets_dir().join("registry.json").to_str().unwrap(),
        "--script",
        assets_dir().join("script.jsonl").to_str().unwrap(),
        "--question",
        &q01_text(),
        "--labels",
        "AD,MCI,NC",
        "--k",
        "5",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert_eq!(stdout.trim(), "AD");
    let traces = out.path().join("traces/interactive.jsonl");
    let records = orchestra_core::trace::read_trace_file(&traces).unwrap();
    assert_eq!(records.len(), 5);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("case_summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["aggregated_answer"], "AD");
}

#[test]
fn run_with_missing_registry_exits_one_naming_the_path() {
    let output = orchestra(&[
        "run",
        "--registry",
        "/nonexistent/registry.json",
        "--script",
        "/nonexistent/script.jsonl",
        "--question",
        "q",
    ]);
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("/nonexistent/registry.json"), "{stderr}");
}

#[test]
fn run_exits_two_when_every_trajectory_exhausts_its_budget() {
    use orchestra_core::backend::ScriptedBackend;
    let dir = tempfile::tempdir().unwrap();
    // Registry with one echo tool and a script that never concludes.
    let registry = serde_json::json!({
        "system_preamble": "p",
        "answer_instructions": "a",
        "tools": [{
            "name": "ping", "description": "d", "kind": "builtin", "agent_id": "echo"
        }]
    });
    let registry_path = dir.path().join("registry.json");
    std::fs::write(&registry_path, registry.to_string()).unwrap();
    let mut backend = ScriptedBackend::new();
    let query = "<|begin_ping_query|>again<|end_ping_query|>";
    backend.stage("loop forever", 0, query);
    for step in 1..16 {
        backend.stage(
            &orchestra_core::marker::render_result("ping", "again").unwrap(),
            step,
            query,
        );
    }
    let script_path = dir.path().join("script.jsonl");
    let lines: Vec<String> = backend
        .entries()
        .iter()
        .map(|e| serde_json::to_string(e).unwrap())
        .collect();
    std::fs::write(&script_path, lines.join("\n")).unwrap();

    let out = tempfile::tempdir().unwrap();
    let output = orchestra(&[
        "run",
        "--registry",
        registry_path.to_str().unwrap(),
        "--script",
        script_path.to_str().unwrap(),
        "--question",
        "loop forever",
        "--max-steps",
        "4",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2), "{}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn bench_writes_deterministic_reports() {
    let out = tempfile::tempdir().unwrap();
    let output = orchestra(&[
        "bench",
        "--registry",
        assets_dir().join("registry.json").to_str().unwrap(),
        "--script",
        assets_dir().join("script.jsonl").to_str().unwrap(),
        "--dataset",
        assets_dir().join("dataset.jsonl").to_str().unwrap(),
        "--k",
        "5",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("best@1"));
    assert!(stdout.contains("majority@5"));
    assert!(stdout.contains("best@5"));
    let report = std::fs::read_to_string(out.path().join("report.json")).unwrap();
    let golden = std::fs::read_to_string(assets_dir().join("golden_report.json")).unwrap();
    assert_eq!(report, golden);
}

#[test]
fn bench_rejects_bad_dataset_lines_before_any_generation() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("bad.jsonl");
    std::fs::write(
        &dataset,
        concat!(
            "{\"id\":\"q1\",\"text\":\"t\",\"label_set\":[\"A\"],\"gold\":\"A\"}\n",
            "{\"id\":\"q2\",\"text\":\"t\",\"label_set\":[\"A\"],\"gold\":\"Z\"}\n",
        ),
    )
    .unwrap();
    let out = tempfile::tempdir().unwrap();
    let output = orchestra(&[
        "bench",
        "--registry",
        assets_dir().join("registry.json").to_str().unwrap(),
        "--script",
        assets_dir().join("script.jsonl").to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("line 2"), "{stderr}");
    assert!(!out.path().join("report.json").exists());
}

#[test]
fn trace_show_renders_turns_and_handles_edge_cases() {
    // Produce a trace with a tool call (q16 routes through the ehr tool).
    let out = tempfile::tempdir().unwrap();
    let q16 = "Patient Q16 presented for cognitive assessment; structured records are available \
               through the ehr tool. What is the most likely diagnosis for this patient: AD, \
               MCI, or NC?";
    let output = orchestra(&[
        "run",
        "--registry",
        assets_dir().join("registry.json").to_str().unwrap(),
        "--script",
        assets_dir().join("script.jsonl").to_str().unwrap(),
        "--question",
        q16,
        "--labels",
        "AD,MCI,NC",
        "--k",
        "1",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let trace_file = out.path().join("traces/interactive.jsonl");
    let output = orchestra(&["trace", "show", "--file", trace_file.to_str().unwrap()]);
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("Turn 1"), "{stdout}");
    assert!(stdout.contains("Conclusion"));
    assert!(stdout.contains("[ehr] query:"));

    // Empty file: a notice, exit 0.
    let empty = out.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let output = orchestra(&["trace", "show", "--file", empty.to_str().unwrap()]);
    assert!(output.status.success());
    assert!(String::from_utf8_lossy(&output.stdout).contains("no trajectories"));

    // Corrupt line: exit 1 naming the line.
    let corrupt = out.path().join("corrupt.jsonl");
    let good = std::fs::read_to_string(&trace_file).unwrap();
    std::fs::write(&corrupt, format!("{}{{broken\n", good)).unwrap();
    let output = orchestra(&["trace", "show", "--file", corrupt.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("line 2"));

    // Unknown question id filters everything out.
    let output = orchestra(&[
        "trace", "show",
        "--file", trace_file.to_str().unwrap(),
        "--question-id", "missing",
    ]);
    assert!(output.status.success());
    assert!(String::from_utf8_lossy(&output.stdout).contains("no trajectories"));
}

#[test]
fn tools_validate_checks_the_registry() {
    let output = orchestra(&[
        "tools",
        "validate",
        "--registry",
        assets_dir().join("registry.json").to_str().unwrap(),
    ]);
    assert!(output.status.success());
    assert!(String::from_utf8_lossy(&output.stdout).contains("1 tool(s)"));

    let dir = tempfile::tempdir().unwrap();
    let dup = dir.path().join("dup.json");
    std::fs::write(
        &dup,
        serde_json::json!({
            "system_preamble": "p",
            "answer_instructions": "a",
            "tools": [
                {"name": "sql", "description": "d", "kind": "builtin", "agent_id": "echo"},
                {"name": "sql", "description": "d", "kind": "builtin", "agent_id": "echo"}
            ]
        })
        .to_string(),
    )
    .unwrap();
    let output = orchestra(&["tools", "validate", "--registry", dup.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("sql"));
}
