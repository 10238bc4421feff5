//! Trajectory data model and the append-only audit trail.
//!
//! A [`TrajectoryRecord`] is one complete reasoning run: the question, the
//! rendered knowledge context, the ordered reasoning steps with their tool
//! calls and evidence, and the final answer. Records are built append-only,
//! become immutable once finalized, and round-trip exactly through the
//! line-delimited JSON trace format, so a trace file is sufficient to
//! reconstruct every conversation the engine submitted (see
//! [`crate::engine::replay_context_hashes`]).
//!
//! Evidence payloads are stored verbatim and untruncated even when the
//! engine truncated them in the model context; the truncated length is
//! recorded on the step so replays stay byte-exact.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One benchmark or interactive question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    /// Ordered canonical labels; empty for open-ended QA.
    #[serde(default)]
    pub label_set: Vec<String>,
    /// Alias -> canonical label, matched case-insensitively.
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub aliases: std::collections::BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<Attachment>,
}

/// A (kind, resource-id) reference resolvable by agents, e.g. a study id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub kind: String,
    pub id: String,
}

impl Question {
    pub fn open_ended(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            label_set: Vec::new(),
            aliases: Default::default(),
            gold: None,
            attachments: Vec::new(),
        }
    }
}

/// How one trajectory approaches the question: a named system-prompt
/// addendum, a sampling temperature, and an optional reordering of the tool
/// sections in the rendered registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyDescriptor {
    pub name: String,
    #[serde(default)]
    pub preamble: String,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_priority_hint: Option<Vec<String>>,
}

impl StrategyDescriptor {
    pub fn baseline(temperature: f64) -> Self {
        Self {
            name: "baseline".into(),
            preamble: String::new(),
            temperature,
            tool_priority_hint: None,
        }
    }
}

/// Outcome of a tool invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolStatus {
    Ok,
    Error(String),
}

/// A tool call and the evidence it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallRecord {
    pub tool: String,
    pub query: String,
    /// Full, untruncated tool output; absent on error or while pending.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<String>,
    /// Absent while the call is still pending.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<ToolStatus>,
    pub latency_ms: u64,
    /// Byte length the engine actually fed back into the model context,
    /// recorded only when shorter than `result`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_context_len: Option<usize>,
}

impl ToolCallRecord {
    pub fn ok(tool: impl Into<String>, query: impl Into<String>, result: impl Into<String>, latency_ms: u64) -> Self {
        Self {
            tool: tool.into(),
            query: query.into(),
            result: Some(result.into()),
            status: Some(ToolStatus::Ok),
            latency_ms,
            result_context_len: None,
        }
    }

    pub fn error(tool: impl Into<String>, query: impl Into<String>, message: impl Into<String>, latency_ms: u64) -> Self {
        Self {
            tool: tool.into(),
            query: query.into(),
            result: None,
            status: Some(ToolStatus::Error(message.into())),
            latency_ms,
            result_context_len: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self.status, Some(ToolStatus::Ok))
    }
}

/// One reasoning step: the prose segment emitted before the tool call (or
/// before the answer block, for the concluding step) plus the call itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStep {
    #[serde(rename = "t")]
    pub index: usize,
    pub prose: String,
    #[serde(flatten)]
    pub tool_call: Option<ToolCallRecord>,
}

/// One complete reasoning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub question_id: String,
    pub question_text: String,
    pub strategy: StrategyDescriptor,
    pub seed: u64,
    /// Full rendered system context (registry render plus strategy
    /// preamble) submitted on every generation call.
    pub knowledge_context: String,
    pub steps: Vec<ReasoningStep>,
    /// Present exactly when the trajectory is finalized.
    #[serde(default)]
    pub answer: Option<String>,
    pub wall_time_s: f64,
    /// UTC milliseconds since epoch at trajectory start.
    pub started_at_ms: u64,
    /// SHA-256 of the conversation submitted at each generation call, in
    /// call order; verified by replay.
    #[serde(default)]
    pub context_hashes: Vec<String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("trajectory is already finalized")]
    AlreadyFinalized,
    #[error("step index {got} does not extend trajectory of length {expected}")]
    IndexGap { expected: usize, got: usize },
    #[error("last step has a pending tool call")]
    PendingToolCall,
    #[error("malformed trace record{}: {detail}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    MalformedRecord { line: Option<usize>, detail: String },
}

impl TrajectoryRecord {
    pub fn new(
        question: &Question,
        strategy: StrategyDescriptor,
        seed: u64,
        knowledge_context: String,
    ) -> Self {
        Self {
            question_id: question.id.clone(),
            question_text: question.text.clone(),
            strategy,
            seed,
            knowledge_context,
            steps: Vec::new(),
            answer: None,
            wall_time_s: 0.0,
            started_at_ms: now_ms(),
            context_hashes: Vec::new(),
        }
    }

    pub fn finalized(&self) -> bool {
        self.answer.is_some()
    }

    /// Steps consumed so far.
    pub fn budget_used(&self) -> usize {
        self.steps.len()
    }

    /// Append a step. The step index must equal the current length and the
    /// trajectory must not be finalized.
    pub fn append_step(&mut self, step: ReasoningStep) -> Result<(), TraceError> {
        if self.finalized() {
            return Err(TraceError::AlreadyFinalized);
        }
        if step.index != self.steps.len() {
            return Err(TraceError::IndexGap {
                expected: self.steps.len(),
                got: step.index,
            });
        }
        self.steps.push(step);
        Ok(())
    }

    /// Set the final answer. Fails if the last step still has a pending
    /// (status-less) tool call. The record is immutable afterwards.
    pub fn finalize(&mut self, answer: impl Into<String>) -> Result<(), TraceError> {
        if self.finalized() {
            return Err(TraceError::AlreadyFinalized);
        }
        if let Some(last) = self.steps.last() {
            if let Some(call) = &last.tool_call {
                if call.status.is_none() {
                    return Err(TraceError::PendingToolCall);
                }
            }
        }
        self.answer = Some(answer.into());
        Ok(())
    }

    /// Structural invariants enforced when a record crosses the wire:
    /// contiguous step indices and, once finalized, no status-less tool
    /// calls or ok-calls without a result.
    pub fn validate(&self) -> Result<(), TraceError> {
        for (i, step) in self.steps.iter().enumerate() {
            if step.index != i {
                return Err(TraceError::MalformedRecord {
                    line: None,
                    detail: format!("step indices out of order: position {i} holds t={}", step.index),
                });
            }
            if let Some(call) = &step.tool_call {
                match &call.status {
                    Some(ToolStatus::Ok) if call.result.is_none() => {
                        return Err(TraceError::MalformedRecord {
                            line: None,
                            detail: format!("step {i}: status ok but no result"),
                        });
                    }
                    None if self.finalized() => {
                        return Err(TraceError::MalformedRecord {
                            line: None,
                            detail: format!("step {i}: finalized trajectory with pending tool call"),
                        });
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

/// Current time as UTC milliseconds since epoch.
pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Serialize one trajectory as a single JSON line.
pub fn write_trace(record: &TrajectoryRecord) -> String {
    serde_json::to_string(record).expect("trajectory serializes")
}

/// Parse one JSON line back into a validated trajectory.
pub fn read_trace(line: &str) -> Result<TrajectoryRecord, TraceError> {
    read_trace_line(line, None)
}

fn read_trace_line(line: &str, line_no: Option<usize>) -> Result<TrajectoryRecord, TraceError> {
    let record: TrajectoryRecord =
        serde_json::from_str(line).map_err(|e| TraceError::MalformedRecord {
            line: line_no,
            detail: e.to_string(),
        })?;
    record.validate().map_err(|e| match e {
        TraceError::MalformedRecord { detail, .. } => {
            TraceError::MalformedRecord { line: line_no, detail }
        }
        other => other,
    })?;
    Ok(record)
}

/// Read every trajectory from a line-delimited trace file.
pub fn read_trace_file(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>, TraceError> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| TraceError::MalformedRecord {
        line: None,
        detail: format!("cannot open {}: {e}", path.as_ref().display()),
    })?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TraceError::MalformedRecord {
            line: Some(i + 1),
            detail: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(read_trace_line(&line, Some(i + 1))?);
    }
    Ok(records)
}

/// Append-only trace file, one JSON record per line, flushed per append.
/// Appends from concurrent trajectories interleave at record granularity.
pub struct TraceWriter {
    path: PathBuf,
    file: Mutex<std::io::BufWriter<std::fs::File>>,
}

impl TraceWriter {
    pub fn create(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = std::fs::File::create(&path)?;
        Ok(Self {
            path,
            file: Mutex::new(std::io::BufWriter::new(file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &TrajectoryRecord) -> std::io::Result<()> {
        let line = write_trace(record);
        let mut file = self.file.lock().expect("trace writer lock");
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
        file.flush()
    }
}

/// Byte cap for a single result payload in the human rendering.
const RENDER_RESULT_CAP: usize = 2000;

fn truncate_for_display(text: &str, cap: usize) -> String {
    if text.len() <= cap {
        return text.to_string();
    }
    let mut end = cap;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    format!(
        "{}... [truncated for display, full length {} bytes]",
        &text[..end],
        text.len()
    )
}

/// Render a trajectory as numbered turns followed by the conclusion,
/// mirroring the layout of a logged multi-turn session.
pub fn render_trace(record: &TrajectoryRecord) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "=== {} | strategy {} | seed {} ===",
        record.question_id, record.strategy.name, record.seed
    );
    let mut turn = 0usize;
    let mut conclusion_prose: Option<&str> = None;
    for step in &record.steps {
        match &step.tool_call {
            Some(call) => {
                turn += 1;
                let _ = writeln!(out, "------------ Turn {turn} ------------");
                if !step.prose.trim().is_empty() {
                    let _ = writeln!(out, "{}", step.prose.trim());
                }
                let _ = writeln!(out, "[{}] query:", call.tool);
                let _ = writeln!(out, "{}", call.query);
                match (&call.status, &call.result) {
                    (Some(ToolStatus::Ok), Some(result)) => {
                        let _ = writeln!(out, "result (ok, {} ms):", call.latency_ms);
                        let _ = writeln!(out, "{}", truncate_for_display(result, RENDER_RESULT_CAP));
                    }
                    (Some(ToolStatus::Error(message)), _) => {
                        let _ = writeln!(out, "result (error, {} ms):", call.latency_ms);
                        let _ = writeln!(out, "{message}");
                    }
                    _ => {
                        let _ = writeln!(out, "result: pending");
                    }
                }
            }
            None => conclusion_prose = Some(&step.prose),
        }
    }
    let _ = writeln!(out, "------------ Conclusion ------------");
    if let Some(prose) = conclusion_prose {
        if !prose.trim().is_empty() {
            let _ = writeln!(out, "{}", prose.trim());
        }
    }
    match &record.answer {
        Some(answer) => {
            let _ = writeln!(out, "Answer: {answer}");
        }
        None => {
            let _ = writeln!(out, "Answer: (not finalized)");
        }
    }
    out
}
