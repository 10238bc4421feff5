//! Implementations of the one-shot CLI commands.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use orchestra_core::bench::run_benchmark;
use orchestra_core::engine::{run_case, validate_wiring, CaseResult, FailureSummary};
use orchestra_core::eval::load_dataset;
use orchestra_core::registry::{Registry, ToolKind};
use orchestra_core::trace::{read_trace_file, render_trace, Question, TraceWriter};
use orchestra_agents::build_agent_map;

use crate::config::Settings;

/// Exit codes for `run`: 0 success, 1 config error (mapped by main), 2
/// when every trajectory exhausted its budget.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_BUDGET: i32 = 2;

#[derive(Serialize)]
struct CaseSummary<'a> {
    question_id: &'a str,
    aggregated_answer: Option<String>,
    normalized_answers: &'a [orchestra_core::eval::NormalizedAnswer],
    vote_fractions: &'a std::collections::BTreeMap<String, f64>,
    failures: &'a [Option<FailureSummary>],
    trace_file: String,
}

fn aggregated_answer(case: &CaseResult) -> Option<String> {
    match case.majority() {
        orchestra_core::eval::NormalizedAnswer::Label(label) => Some(label),
        orchestra_core::eval::NormalizedAnswer::Abstain => case.modal_raw_answer(),
    }
}

fn write_case_traces(case: &CaseResult, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(format!("{}.jsonl", case.question_id));
    let writer = TraceWriter::create(&path)?;
    for trajectory in &case.trajectories {
        writer.append(trajectory)?;
    }
    Ok(path)
}

pub fn cmd_run(question: Question, settings: &Settings) -> Result<i32> {
    let registry = settings.load_registry()?;
    let backend = settings.build_backend()?;
    let agents = build_agent_map(&registry, backend.clone(), &settings.wiring)?;
    validate_wiring(&registry, &agents)?;
    let cfg = settings.case_config()?;

    let case = run_case(&question, &registry, backend.as_ref(), &agents, &cfg)?;
    let trace_dir = settings.out_dir.join("traces");
    let trace_path = write_case_traces(&case, &trace_dir)?;

    let summary = CaseSummary {
        question_id: &case.question_id,
        aggregated_answer: aggregated_answer(&case),
        normalized_answers: &case.normalized_answers,
        vote_fractions: &case.vote_fractions,
        failures: &case.failures,
        trace_file: trace_path.display().to_string(),
    };
    std::fs::write(
        settings.out_dir.join("case_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;

    match &summary.aggregated_answer {
        Some(answer) => println!("{answer}"),
        None => println!("(abstain)"),
    }
    for (i, failure) in case.failures.iter().enumerate() {
        if let Some(failure) = failure {
            eprintln!("trajectory {i}: {}", failure.detail);
        }
    }

    let all_budget = !case.failures.is_empty()
        && case
            .failures
            .iter()
            .all(|f| f.as_ref().is_some_and(|f| f.code == "budget_exhausted"));
    Ok(if all_budget { EXIT_BUDGET } else { EXIT_OK })
}

pub fn cmd_bench(dataset: &Path, settings: &Settings) -> Result<i32> {
    // Dataset problems abort before any model call.
    let questions = load_dataset(dataset)?;
    let registry = settings.load_registry()?;
    let backend = settings.build_backend()?;
    let agents = build_agent_map(&registry, backend.clone(), &settings.wiring)?;
    validate_wiring(&registry, &agents)?;
    let cfg = settings.case_config()?;

    let trace_dir = settings.out_dir.join("traces");
    std::fs::create_dir_all(&trace_dir)?;
    let outcome = run_benchmark(
        &questions,
        &registry,
        backend.as_ref(),
        &agents,
        &cfg,
        Some(&trace_dir),
    )?;

    std::fs::write(settings.out_dir.join("report.json"), outcome.report_json())?;
    std::fs::write(settings.out_dir.join("report.txt"), outcome.report_table())?;
    print!("{}", outcome.report_table());
    Ok(EXIT_OK)
}

pub fn cmd_trace_show(file: &Path, question_id: Option<&str>) -> Result<i32> {
    let records = read_trace_file(file)?;
    let selected: Vec<_> = records
        .iter()
        .filter(|r| question_id.map_or(true, |id| r.question_id == id))
        .collect();
    if selected.is_empty() {
        println!("no trajectories");
        return Ok(EXIT_OK);
    }
    for record in selected {
        print!("{}", render_trace(record));
        println!();
    }
    Ok(EXIT_OK)
}

pub fn cmd_tools_validate(registry_path: &Path, probe: bool) -> Result<i32> {
    let text = std::fs::read_to_string(registry_path)
        .with_context(|| format!("cannot read registry {}", registry_path.display()))?;
    let registry = Registry::load(&text)?;
    println!("registry ok: {} tool(s)", registry.tools().len());
    if probe {
        for tool in registry.tools() {
            if let ToolKind::External { endpoint, timeout_ms } = &tool.kind {
                orchestra_core::netguard::record_outbound();
                let client = reqwest::blocking::Client::builder()
                    .timeout(std::time::Duration::from_millis(*timeout_ms))
                    .build()?;
                match client.get(endpoint.clone()).send() {
                    Ok(_) => println!("probe ok: {} -> {endpoint}", tool.name),
                    Err(e) => {
                        eprintln!("probe failed: {} -> {endpoint}: {e}", tool.name);
                        return Ok(EXIT_CONFIG);
                    }
                }
            }
        }
    }
    Ok(EXIT_OK)
}
