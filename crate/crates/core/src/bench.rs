//! Benchmark driver: run every dataset question as a k-trajectory case and
//! score the three evaluation strategies.
//!
//! The strategies are best@1 (the first trajectory's answer), majority@k
//! (plurality vote), and best@k (credit when any trajectory hits the gold
//! label; non-hits fall back to the majority vote for the confusion
//! matrix). AUC columns are computed from vote fractions, which are a
//! property of the case rather than the strategy, so all three rows share
//! them.
//!
//! Given a scripted backend and fixed seeds the whole run is deterministic:
//! cases are processed in dataset order, reduced in that order, and the
//! report contains no timing fields, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::engine::{run_case, AgentMap, CaseConfig, CaseResult, EngineConfigError};
use crate::eval::{
    self, render_report_table, EvalError, LabelSet, MetricsReport, NormalizedAnswer,
    ScoredPrediction,
};
use crate::registry::Registry;
use crate::trace::{Question, TraceWriter};
use crate::backend::Backend;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Engine(#[from] EngineConfigError),
    #[error("benchmark requires a gold label for every question; {0:?} has none")]
    MissingGold(String),
    #[error("benchmark requires a shared label set; {0:?} differs from the first question")]
    MixedLabelSets(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything one benchmark run produced.
#[derive(Debug, Serialize)]
pub struct BenchOutcome {
    pub strategies: Vec<StrategyRow>,
    #[serde(skip)]
    pub cases: Vec<CaseResult>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StrategyRow {
    pub strategy: String,
    pub report: MetricsReport,
}

impl BenchOutcome {
    /// Deterministic JSON report (no timing fields).
    pub fn report_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(&self.strategies).expect("report serializes");
        out.push('\n');
        out
    }

    /// Aligned plain-text report table.
    pub fn report_table(&self) -> String {
        let rows: Vec<(String, MetricsReport)> = self
            .strategies
            .iter()
            .map(|row| (row.strategy.clone(), row.report.clone()))
            .collect();
        render_report_table(&rows)
    }
}

/// Run the benchmark. When `trace_dir` is given, each case's trajectories
/// are appended to `<trace_dir>/<question_id>.jsonl`.
pub fn run_benchmark(
    questions: &[Question],
    registry: &Registry,
    backend: &dyn Backend,
    agents: &AgentMap,
    cfg: &CaseConfig,
    trace_dir: Option<&Path>,
) -> Result<BenchOutcome, BenchError> {
    let mut shared_labels: Option<LabelSet> = None;
    for question in questions {
        if question.gold.is_none() {
            return Err(BenchError::MissingGold(question.id.clone()));
        }
        let labels = LabelSet::from_question(question)?;
        match &shared_labels {
            None => shared_labels = Some(labels),
            Some(first) if first.labels() != labels.labels() => {
                return Err(BenchError::MixedLabelSets(question.id.clone()));
            }
            Some(_) => {}
        }
    }

    let mut cases = Vec::with_capacity(questions.len());
    for question in questions {
        let case = run_case(question, registry, backend, agents, cfg)?;
        if let Some(dir) = trace_dir {
            let writer = TraceWriter::create(dir.join(format!("{}.jsonl", question.id)))?;
            for trajectory in &case.trajectories {
                writer.append(trajectory)?;
            }
        }
        cases.push(case);
    }

    let labels = match shared_labels {
        Some(labels) => labels,
        None => {
            return Ok(BenchOutcome { strategies: vec![], cases });
        }
    };
    let strategies = score_cases(&cases, questions, &labels, cfg.k)?;
    Ok(BenchOutcome { strategies, cases })
}

/// Per-strategy prediction for one case.
fn strategy_prediction(
    strategy: Strategy,
    case: &CaseResult,
    gold: &str,
) -> NormalizedAnswer {
    match strategy {
        Strategy::BestAt1 => case
            .normalized_answers
            .first()
            .cloned()
            .unwrap_or(NormalizedAnswer::Abstain),
        Strategy::MajorityAtK => case.majority(),
        Strategy::BestAtK => {
            if eval::best_at_k(&case.normalized_answers, gold) {
                NormalizedAnswer::Label(gold.to_string())
            } else {
                case.majority()
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Strategy {
    BestAt1,
    MajorityAtK,
    BestAtK,
}

fn score_cases(
    cases: &[CaseResult],
    questions: &[Question],
    labels: &LabelSet,
    k: usize,
) -> Result<Vec<StrategyRow>, BenchError> {
    let golds: Vec<String> = questions
        .iter()
        .map(|q| q.gold.clone().expect("validated above"))
        .collect();
    let scored: Vec<ScoredPrediction> = cases
        .iter()
        .zip(&golds)
        .map(|(case, gold)| ScoredPrediction {
            scores: labels
                .labels()
                .iter()
                .map(|label| case.vote_fractions.get(label).copied().unwrap_or(0.0))
                .collect(),
            gold: labels.labels().iter().map(|label| label == gold).collect(),
        })
        .collect();

    let mut rows = Vec::new();
    for (name, strategy) in [
        ("best@1".to_string(), Strategy::BestAt1),
        (format!("majority@{k}"), Strategy::MajorityAtK),
        (format!("best@{k}"), Strategy::BestAtK),
    ] {
        let preds: Vec<NormalizedAnswer> = cases
            .iter()
            .zip(&golds)
            .map(|(case, gold)| strategy_prediction(strategy, case, gold))
            .collect();
        let matrix = eval::confusion(&preds, &golds, labels)?;
        let report = MetricsReport::from_parts(&matrix, &scored)?;
        rows.push(StrategyRow { strategy: name, report });
    }
    Ok(rows)
}

/// Ordered (strategy -> accuracy) view used by tests and summaries.
pub fn accuracies(outcome: &BenchOutcome) -> BTreeMap<String, f64> {
    outcome
        .strategies
        .iter()
        .map(|row| (row.strategy.clone(), row.report.accuracy))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::registry::{RegistryConfig, ToolDescriptor, ToolKindTag};

    fn registry() -> Registry {
        Registry::from_config(RegistryConfig {
            system_preamble: "preamble".into(),
            answer_instructions: "answer".into(),
            tools: vec![ToolDescriptor {
                name: "echo".into(),
                description: "echo".into(),
                input_spec: "text".into(),
                output_spec: "text".into(),
                usage_examples: vec![],
                kind: ToolKindTag::Builtin,
                agent_id: Some("echo".into()),
                endpoint: None,
                timeout_ms: None,
                aliases: vec![],
            }],
            allow_empty: false,
            render_verbosity: Default::default(),
        })
        .unwrap()
    }

    fn question(id: &str, gold: &str) -> Question {
        Question {
            id: id.into(),
            text: format!("question {id}"),
            label_set: vec!["A".into(), "B".into()],
            aliases: Default::default(),
            gold: Some(gold.into()),
            attachments: vec![],
        }
    }

    fn stage(backend: &mut ScriptedBackend, q: &Question, answers: &[&str]) {
        for (i, a) in answers.iter().enumerate() {
            backend.stage_seeded(&q.text, 0, i as u64, &format!("<|begin_answer|>{a}<|end_answer|>"));
        }
    }

    #[test]
    fn scores_three_strategy_rows_deterministically() {
        let registry = registry();
        let questions = vec![question("q1", "A"), question("q2", "B"), question("q3", "A")];
        let mut backend = ScriptedBackend::new();
        // q1: first trajectory wrong, majority wrong, but gold present.
        stage(&mut backend, &questions[0], &["B", "B", "A"]);
        // q2: unanimous correct.
        stage(&mut backend, &questions[1], &["B", "B", "B"]);
        // q3: first correct, majority wrong, gold present.
        stage(&mut backend, &questions[2], &["A", "B", "B"]);
        let cfg = CaseConfig { k: 3, ..Default::default() };
        let outcome =
            run_benchmark(&questions, &registry, &backend, &AgentMap::new(), &cfg, None).unwrap();
        let acc = accuracies(&outcome);
        assert!((acc["best@1"] - 2.0 / 3.0).abs() < 1e-12);
        assert!((acc["majority@3"] - 1.0 / 3.0).abs() < 1e-12);
        assert!((acc["best@3"] - 1.0).abs() < 1e-12);
        // Reruns are byte-identical.
        let again =
            run_benchmark(&questions, &registry, &backend, &AgentMap::new(), &cfg, None).unwrap();
        assert_eq!(outcome.report_json(), again.report_json());
        assert_eq!(outcome.report_table(), again.report_table());
    }

    #[test]
    fn traces_are_written_per_question() {
        let registry = registry();
        let questions = vec![question("q1", "A")];
        let mut backend = ScriptedBackend::new();
        stage(&mut backend, &questions[0], &["A"]);
        let cfg = CaseConfig { k: 1, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        run_benchmark(
            &questions,
            &registry,
            &backend,
            &AgentMap::new(),
            &cfg,
            Some(dir.path()),
        )
        .unwrap();
        let records = crate::trace::read_trace_file(dir.path().join("q1.jsonl")).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].answer.as_deref(), Some("A"));
    }

    #[test]
    fn missing_gold_aborts_before_any_generation() {
        let registry = registry();
        let mut q = question("q1", "A");
        q.gold = None;
        let backend = ScriptedBackend::new();
        let err = run_benchmark(
            &[q],
            &registry,
            &backend,
            &AgentMap::new(),
            &CaseConfig::default(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, BenchError::MissingGold(_)));
        assert_eq!(backend.calls(), 0);
    }
}
