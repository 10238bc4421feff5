//! The reasoning loop: generate, scan for a tool query, route, execute,
//! integrate, repeat until a conclusion.
//!
//! Each trajectory is a strictly sequential conversation. The engine
//! assembles the context (registry render with the strategy preamble,
//! question, then alternating assistant/tool-result turns), generates a
//! segment, and scans it. A tool-query block is routed through the registry
//! to its agent; the output is spliced back as a result block and the loop
//! continues. An answer block (or, in lenient mode, a marker-free segment)
//! finalizes the trajectory. Tool failures are integrated as error result
//! blocks so the model can re-plan; budgets bound steps, wall time, and
//! consecutive failures.
//!
//! Model-emitted query blocks are canonicalized through
//! [`marker::render_query`] before entering the context, which is what
//! makes a finalized record replayable byte-for-byte: the conversation
//! submitted at every generation call is a pure function of
//! (knowledge context, question text, prior steps). The engine records a
//! SHA-256 context hash per call; [`replay_context_hashes`] recomputes them
//! from the record alone.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{
    with_retry, Backend, BackendError, GenerationRequest, Message, RetryPolicy, Role, StopReason,
};
use crate::eval::{self, NormalizedAnswer};
use crate::marker::{self, ParseEvent, ScanLimits};
use crate::registry::{Registry, ToolKind};
use crate::trace::{
    Question, ReasoningStep, StrategyDescriptor, ToolCallRecord, ToolStatus, TrajectoryRecord,
};

/// Hard limits on a single trajectory run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineBudget {
    pub max_steps: usize,
    pub max_wall: Duration,
    pub max_consecutive_tool_failures: usize,
}

impl Default for EngineBudget {
    fn default() -> Self {
        Self {
            max_steps: 16,
            max_wall: Duration::from_secs(300),
            max_consecutive_tool_failures: 3,
        }
    }
}

/// How the engine detects a conclusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnswerMode {
    /// Require a `<|begin_answer|>` block; the default for benchmarks.
    #[default]
    Strict,
    /// Additionally accept a marker-free segment as the conclusion.
    Lenient,
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub mode: AnswerMode,
    pub max_tokens: u32,
    /// Truncate tool results to this many bytes in the model context; the
    /// trace keeps the full payload either way.
    pub result_context_cap: Option<usize>,
    /// Send the prose preceding a query block to the agent along with the
    /// payload.
    pub attach_prose: bool,
    pub retry: RetryPolicy,
    pub scan_limits: ScanLimits,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            mode: AnswerMode::Strict,
            max_tokens: 2048,
            result_context_cap: None,
            attach_prose: false,
            retry: RetryPolicy::default(),
            scan_limits: ScanLimits::default(),
        }
    }
}

/// Error surfaced by a tool agent; the message is integrated into the
/// context as an error result block.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{0}")]
pub struct ToolError(pub String);

/// A tool implementation bound to a registry descriptor.
pub trait ToolAgent: Send + Sync {
    fn invoke(&self, payload: &str) -> Result<String, ToolError>;

    /// Hook invoked for every appended reasoning step; agents that maintain
    /// state across the trajectory (the knowledge graph) ingest here.
    fn observe_step(&self, _index: usize, _prose: &str) {}
}

/// Canonical tool name -> agent. Built from the registry by the caller.
pub type AgentMap = BTreeMap<String, Arc<dyn ToolAgent>>;

/// Check that every builtin descriptor has an agent bound.
pub fn validate_wiring(registry: &Registry, agents: &AgentMap) -> Result<(), EngineConfigError> {
    for tool in registry.tools() {
        if matches!(tool.kind, ToolKind::Builtin { .. }) && !agents.contains_key(&tool.name) {
            return Err(EngineConfigError(format!(
                "no agent bound for builtin tool {:?}",
                tool.name
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetKind {
    Steps,
    WallClock,
    ConsecutiveToolFailures,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FailureKind {
    BudgetExhausted(BudgetKind),
    Backend(BackendError),
    /// Strict mode saw a marker-free segment.
    MissingAnswerBlock,
    /// The segment could not be parsed (nested or mismatched markers,
    /// oversize payload, or a block truncated by the token budget).
    Parse(String),
}

impl FailureKind {
    /// Stable machine-readable code for summaries and exit-code mapping.
    pub fn code(&self) -> &'static str {
        match self {
            FailureKind::BudgetExhausted(_) => "budget_exhausted",
            FailureKind::Backend(_) => "backend",
            FailureKind::MissingAnswerBlock => "missing_answer_block",
            FailureKind::Parse(_) => "parse",
        }
    }

    pub fn summary(&self) -> FailureSummary {
        FailureSummary {
            code: self.code().to_string(),
            detail: self.to_string(),
        }
    }
}

impl std::fmt::Display for FailureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FailureKind::BudgetExhausted(kind) => write!(f, "budget exhausted: {kind:?}"),
            FailureKind::Backend(e) => write!(f, "backend: {e}"),
            FailureKind::MissingAnswerBlock => write!(f, "missing answer block"),
            FailureKind::Parse(detail) => write!(f, "parse: {detail}"),
        }
    }
}

/// Serializable view of a trajectory failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureSummary {
    pub code: String,
    pub detail: String,
}

/// A trajectory that did not reach a conclusion; the partial record keeps
/// everything observed up to the failure for the audit trail.
#[derive(Debug, Error)]
#[error("trajectory failed: {kind}")]
pub struct TrajectoryFailure {
    pub kind: FailureKind,
    pub partial: TrajectoryRecord,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("engine config error: {0}")]
pub struct EngineConfigError(pub String);

/// Canonical byte encoding of a conversation, hashed per generation call.
pub fn context_hash(messages: &[Message]) -> String {
    let mut hasher = Sha256::new();
    for message in messages {
        let role = match message.role {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        hasher.update(role.as_bytes());
        hasher.update([0x1f]);
        hasher.update(message.content.as_bytes());
        hasher.update([0x1e]);
    }
    hex::encode(hasher.finalize())
}

/// The result-block payload fed back into the context for a settled tool
/// call: the (possibly truncated) output on success, `ERROR: ...` on
/// failure.
fn result_context_payload(call: &ToolCallRecord) -> String {
    match (&call.status, &call.result) {
        (Some(ToolStatus::Ok), Some(result)) => match call.result_context_len {
            Some(n) if n < result.len() => result[..n].to_string(),
            _ => result.clone(),
        },
        (Some(ToolStatus::Error(message)), _) => format!("ERROR: {message}"),
        _ => String::new(),
    }
}

/// Rebuild the conversation submitted after `steps`: system knowledge
/// context, the question, then one (assistant query, user result) pair per
/// tool step. Prose-only steps (the conclusion) contribute no messages.
pub fn build_messages(
    knowledge_context: &str,
    question_text: &str,
    steps: &[ReasoningStep],
) -> Vec<Message> {
    let mut messages = vec![
        Message::system(knowledge_context),
        Message::user(question_text),
    ];
    for step in steps {
        if let Some(call) = &step.tool_call {
            let query_block =
                marker::render_query(&call.tool, &call.query).expect("recorded tool name is valid");
            messages.push(Message::assistant(format!("{}{}", step.prose, query_block)));
            let result_block = marker::render_result(&call.tool, &result_context_payload(call))
                .expect("recorded tool name is valid");
            messages.push(Message::user(result_block));
        }
    }
    messages
}

/// Recompute the per-call context hashes of a record from its steps alone.
/// Equal to `record.context_hashes` exactly when the record replays.
pub fn replay_context_hashes(record: &TrajectoryRecord) -> Vec<String> {
    (0..record.context_hashes.len())
        .map(|call| {
            let upto = call.min(record.steps.len());
            let messages = build_messages(
                &record.knowledge_context,
                &record.question_text,
                &record.steps[..upto],
            );
            context_hash(&messages)
        })
        .collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("replay mismatch at generation call {call}: recorded {recorded}, replayed {replayed}")]
pub struct ReplayMismatch {
    pub call: usize,
    pub recorded: String,
    pub replayed: String,
}

/// Verify that replaying the record reconstructs every submitted context.
pub fn verify_replay(record: &TrajectoryRecord) -> Result<(), ReplayMismatch> {
    let replayed = replay_context_hashes(record);
    for (call, (recorded, replayed)) in record.context_hashes.iter().zip(&replayed).enumerate() {
        if recorded != replayed {
            return Err(ReplayMismatch {
                call,
                recorded: recorded.clone(),
                replayed: replayed.clone(),
            });
        }
    }
    Ok(())
}

fn truncation_boundary(text: &str, cap: usize) -> Option<usize> {
    if text.len() <= cap {
        return None;
    }
    let mut end = cap;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    Some(end)
}

/// Run one trajectory to a conclusion or a failure. On failure the partial
/// record is returned inside the error.
#[allow(clippy::too_many_arguments)]
pub fn run_trajectory(
    question: &Question,
    registry: &Registry,
    backend: &dyn Backend,
    agents: &AgentMap,
    strategy: &StrategyDescriptor,
    seed: u64,
    budget: &EngineBudget,
    options: &EngineOptions,
) -> Result<TrajectoryRecord, Box<TrajectoryFailure>> {
    let knowledge_context = registry.render_context_for(Some(strategy));
    let mut record = TrajectoryRecord::new(question, strategy.clone(), seed, knowledge_context);
    let mut messages = build_messages(&record.knowledge_context, &record.question_text, &[]);
    let stop_sequences = registry.stop_sequences();
    let started = Instant::now();
    let mut consecutive_failures = 0usize;

    macro_rules! fail {
        ($kind:expr) => {{
            record.wall_time_s = started.elapsed().as_secs_f64();
            return Err(Box::new(TrajectoryFailure { kind: $kind, partial: record }));
        }};
    }

    loop {
        if record.context_hashes.len() >= budget.max_steps {
            fail!(FailureKind::BudgetExhausted(BudgetKind::Steps));
        }
        if started.elapsed() > budget.max_wall {
            fail!(FailureKind::BudgetExhausted(BudgetKind::WallClock));
        }

        let request = GenerationRequest {
            messages: messages.clone(),
            temperature: strategy.temperature,
            seed: Some(seed),
            stop_sequences: stop_sequences.clone(),
            max_tokens: options.max_tokens,
        };
        record.context_hashes.push(context_hash(&messages));
        let result = match with_retry(backend, &request, &options.retry) {
            Ok(result) => result,
            Err(err) => fail!(FailureKind::Backend(err)),
        };

        // Providers that honor stop sequences return the text truncated
        // right before the marker; splice it back so the block completes.
        let mut segment = result.text;
        match &result.stop_reason {
            StopReason::StopSequence(matched) => segment.push_str(matched),
            StopReason::End => {
                // Some providers strip the matched stop sequence without
                // reporting it; close the one open block if so.
                if let Ok(ParseEvent::Incomplete) = marker::scan_with(&segment, &options.scan_limits)
                {
                    if let Some(open) = marker::open_block(&segment) {
                        segment.push_str(&open.closing_marker());
                    }
                }
            }
            StopReason::Length => {}
        }

        let event = match marker::scan_with(&segment, &options.scan_limits) {
            Ok(event) => event,
            Err(err) => fail!(FailureKind::Parse(err.to_string())),
        };

        match event {
            ParseEvent::ToolQuery { tool, payload, consumed } => {
                let block = &segment[..consumed];
                let begin = marker::begin_query_marker(&tool);
                let begin_pos = block.find(&begin).unwrap_or(0);
                let prose = block[..begin_pos].to_string();

                let effective_query = if options.attach_prose && !prose.trim().is_empty() {
                    format!("{}\n\n{}", prose.trim(), payload)
                } else {
                    payload.clone()
                };
                let invoked = Instant::now();
                let outcome: Result<String, String> = match registry.lookup(&tool) {
                    Ok(descriptor) => match agents.get(&descriptor.name) {
                        Some(agent) => agent.invoke(&effective_query).map_err(|e| e.to_string()),
                        None => Err(format!("no agent bound for tool '{}'", descriptor.name)),
                    },
                    Err(_) => Err(format!("unknown tool '{tool}'")),
                };
                let latency_ms = invoked.elapsed().as_millis() as u64;

                let call = match outcome {
                    Ok(output) => {
                        consecutive_failures = 0;
                        let mut call = ToolCallRecord::ok(&tool, &payload, output, latency_ms);
                        if let Some(cap) = options.result_context_cap {
                            let result = call.result.as_deref().unwrap_or("");
                            call.result_context_len = truncation_boundary(result, cap);
                        }
                        call
                    }
                    Err(message) => {
                        consecutive_failures += 1;
                        ToolCallRecord::error(&tool, &payload, message, latency_ms)
                    }
                };

                let index = record.steps.len();
                let step = ReasoningStep { index, prose, tool_call: Some(call) };
                let result_block =
                    marker::render_result(&tool, &result_context_payload(step.tool_call.as_ref().unwrap()))
                        .expect("scanned tool name is valid");
                messages.push(Message::assistant(format!(
                    "{}{}",
                    step.prose,
                    marker::render_query(&tool, &payload).expect("scanned tool name is valid")
                )));
                messages.push(Message::user(result_block));
                let prose_for_observers = step.prose.clone();
                record.append_step(step).expect("append extends the record");
                for agent in agents.values() {
                    agent.observe_step(index, &prose_for_observers);
                }

                if consecutive_failures >= budget.max_consecutive_tool_failures {
                    fail!(FailureKind::BudgetExhausted(BudgetKind::ConsecutiveToolFailures));
                }
            }
            ParseEvent::AnswerBlock { text, consumed } => {
                let block = &segment[..consumed];
                let begin_pos = block.find(marker::BEGIN_ANSWER).unwrap_or(0);
                let prose = block[..begin_pos].to_string();
                let index = record.steps.len();
                record
                    .append_step(ReasoningStep { index, prose: prose.clone(), tool_call: None })
                    .expect("append extends the record");
                for agent in agents.values() {
                    agent.observe_step(index, &prose);
                }
                record.finalize(text).expect("no pending tool call");
                record.wall_time_s = started.elapsed().as_secs_f64();
                return Ok(record);
            }
            ParseEvent::Prose(text) => match options.mode {
                AnswerMode::Lenient => {
                    let index = record.steps.len();
                    record
                        .append_step(ReasoningStep { index, prose: text.clone(), tool_call: None })
                        .expect("append extends the record");
                    for agent in agents.values() {
                        agent.observe_step(index, &text);
                    }
                    record.finalize(text.trim()).expect("no pending tool call");
                    record.wall_time_s = started.elapsed().as_secs_f64();
                    return Ok(record);
                }
                AnswerMode::Strict => fail!(FailureKind::MissingAnswerBlock),
            },
            ParseEvent::Incomplete => {
                fail!(FailureKind::Parse("unterminated marker block".into()))
            }
        }
    }
}

/// Configuration for a k-trajectory case run.
#[derive(Debug, Clone)]
pub struct CaseConfig {
    pub k: usize,
    /// Either empty (use [`default_strategy_set`]), a single strategy
    /// replicated with distinct seeds, or exactly one strategy per
    /// trajectory.
    pub strategies: Vec<StrategyDescriptor>,
    pub base_seed: u64,
    pub budget: EngineBudget,
    pub options: EngineOptions,
    pub parallel: bool,
}

impl Default for CaseConfig {
    fn default() -> Self {
        Self {
            k: 1,
            strategies: Vec::new(),
            base_seed: 0,
            budget: EngineBudget::default(),
            options: EngineOptions::default(),
            parallel: false,
        }
    }
}

/// k trajectories for one question plus the vote tally over their
/// normalized answers. Failed trajectories stay in `trajectories` as
/// unfinalized records, abstain in `normalized_answers`, and carry their
/// failure in `failures`.
#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub question_id: String,
    pub trajectories: Vec<TrajectoryRecord>,
    pub normalized_answers: Vec<NormalizedAnswer>,
    pub vote_fractions: BTreeMap<String, f64>,
    pub failures: Vec<Option<FailureSummary>>,
}

impl CaseResult {
    /// Fraction of trajectories that produced any label.
    pub fn decided_fraction(&self) -> f64 {
        if self.normalized_answers.is_empty() {
            return 0.0;
        }
        let decided = self
            .normalized_answers
            .iter()
            .filter(|a| a.label().is_some())
            .count();
        decided as f64 / self.normalized_answers.len() as f64
    }

    /// Majority label across trajectories, if any.
    pub fn majority(&self) -> NormalizedAnswer {
        eval::majority_at_k(&self.normalized_answers).unwrap_or(NormalizedAnswer::Abstain)
    }

    /// For open-ended questions: the most common raw finalized answer,
    /// ties toward the earliest trajectory.
    pub fn modal_raw_answer(&self) -> Option<String> {
        let mut counts: Vec<(String, usize, usize)> = Vec::new();
        for (i, trajectory) in self.trajectories.iter().enumerate() {
            if let Some(answer) = &trajectory.answer {
                match counts.iter_mut().find(|(a, _, _)| a == answer) {
                    Some(entry) => entry.1 += 1,
                    None => counts.push((answer.clone(), 1, i)),
                }
            }
        }
        counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
            .map(|(answer, _, _)| answer)
    }
}

/// The default strategy variants: a plain baseline, three preamble
/// variants that prioritize different evidence, and one tool-priority
/// reordering. Replicated (with unique names and distinct seeds) when k
/// exceeds the variant count.
pub fn default_strategy_set(k: usize, registry: &Registry) -> Vec<StrategyDescriptor> {
    let temperature = if k == 1 { 0.0 } else { 0.7 };
    let reversed: Vec<String> = registry.tools().iter().rev().map(|t| t.name.clone()).collect();
    let variants = [
        ("baseline", "", None),
        (
            "evidence-first",
            "Prioritize structured clinical evidence: retrieve laboratory values, biomarkers, and scores before consulting any other source.",
            None,
        ),
        (
            "imaging-first",
            "Prioritize imaging: consult imaging-related tools before other evidence sources.",
            None,
        ),
        (
            "guideline-first",
            "Prioritize published guidelines: retrieve guideline passages before patient-specific data.",
            None,
        ),
        ("tool-reorder", "", Some(reversed)),
    ];
    (0..k)
        .map(|i| {
            let (name, preamble, hint) = &variants[i % variants.len()];
            let name = if i < variants.len() {
                (*name).to_string()
            } else {
                format!("{name}#{i}")
            };
            StrategyDescriptor {
                name,
                preamble: (*preamble).to_string(),
                temperature,
                tool_priority_hint: hint.clone(),
            }
        })
        .collect()
}

fn resolve_strategies(cfg: &CaseConfig, registry: &Registry) -> Result<Vec<StrategyDescriptor>, EngineConfigError> {
    if cfg.k == 0 {
        return Err(EngineConfigError("k must be at least 1".into()));
    }
    match cfg.strategies.len() {
        0 => Ok(default_strategy_set(cfg.k, registry)),
        1 => {
            let base = &cfg.strategies[0];
            Ok((0..cfg.k)
                .map(|i| {
                    let mut descriptor = base.clone();
                    if i > 0 {
                        descriptor.name = format!("{}#{i}", base.name);
                    }
                    descriptor
                })
                .collect())
        }
        n if n == cfg.k => {
            let mut names = std::collections::BTreeSet::new();
            for strategy in &cfg.strategies {
                if !names.insert(&strategy.name) {
                    return Err(EngineConfigError(format!(
                        "strategy name {:?} is not unique within the case run",
                        strategy.name
                    )));
                }
            }
            Ok(cfg.strategies.clone())
        }
        n => Err(EngineConfigError(format!(
            "expected 1 or {} strategies, got {n}",
            cfg.k
        ))),
    }
}

/// Run k independent trajectories for one question and tally the votes.
/// Per-trajectory failures become abstentions; the case never aborts.
pub fn run_case(
    question: &Question,
    registry: &Registry,
    backend: &dyn Backend,
    agents: &AgentMap,
    cfg: &CaseConfig,
) -> Result<CaseResult, EngineConfigError> {
    let strategies = resolve_strategies(cfg, registry)?;
    let label_set = eval::LabelSet::from_question(question)
        .map_err(|e| EngineConfigError(e.to_string()))?;

    let run_one = |i: usize| -> (TrajectoryRecord, Option<FailureSummary>) {
        let seed = cfg.base_seed + i as u64;
        match run_trajectory(
            question,
            registry,
            backend,
            agents,
            &strategies[i],
            seed,
            &cfg.budget,
            &cfg.options,
        ) {
            Ok(record) => (record, None),
            Err(failure) => (failure.partial, Some(failure.kind.summary())),
        }
    };

    let outcomes: Vec<(TrajectoryRecord, Option<FailureSummary>)> = if cfg.parallel && cfg.k > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..cfg.k).map(|i| scope.spawn(move || run_one(i))).collect();
            handles.into_iter().map(|h| h.join().expect("trajectory thread")).collect()
        })
    } else {
        (0..cfg.k).map(run_one).collect()
    };

    let mut trajectories = Vec::with_capacity(cfg.k);
    let mut failures = Vec::with_capacity(cfg.k);
    let mut normalized = Vec::with_capacity(cfg.k);
    for (record, failure) in outcomes {
        normalized.push(match (&record.answer, &failure) {
            (Some(answer), None) if !label_set.labels().is_empty() => {
                eval::normalize_answer(answer, &label_set)
            }
            _ => NormalizedAnswer::Abstain,
        });
        failures.push(failure);
        trajectories.push(record);
    }

    let mut vote_counts: BTreeMap<String, usize> = BTreeMap::new();
    for answer in &normalized {
        if let Some(label) = answer.label() {
            *vote_counts.entry(label.to_string()).or_insert(0) += 1;
        }
    }
    let vote_fractions = vote_counts
        .into_iter()
        .map(|(label, count)| (label, count as f64 / cfg.k as f64))
        .collect();

    Ok(CaseResult {
        question_id: question.id.clone(),
        trajectories,
        normalized_answers: normalized,
        vote_fractions,
        failures,
    })
}
