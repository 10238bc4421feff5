//! Built-in tool agents and the external-service adapter.
//!
//! Each agent implements [`orchestra_core::engine::ToolAgent`] behind a
//! registry descriptor. [`build_agent_map`] wires a validated registry to
//! concrete agents: builtin descriptors resolve by `agent_id`, external
//! descriptors get an HTTP adapter. Everything here runs offline except
//! [`external::ExternalAgent`] and any non-fixture web provider.

pub mod codeexec;
pub mod external;
pub mod kgraph;
pub mod longitudinal;
pub mod retrieval;
pub mod text2sql;
pub mod websearch;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use orchestra_core::backend::Backend;
use orchestra_core::engine::{AgentMap, ToolAgent, ToolError};
use orchestra_core::registry::{Registry, ToolKind};
use thiserror::Error;

/// Strip a single pair of Markdown code fences (with optional language
/// tag) from around a snippet.
pub fn strip_markdown_fences(code: &str) -> String {
    let trimmed = code.trim();
    let Some(rest) = trimmed.strip_prefix("```") else {
        return trimmed.to_string();
    };
    let body = match rest.split_once('\n') {
        Some((_lang, body)) => body,
        None => return String::new(),
    };
    let body = body.strip_suffix("```").unwrap_or(body);
    body.trim_end_matches(['\n', ' ']).trim_start_matches('\n').to_string()
}

/// Diagnostic agent that returns its payload verbatim. Useful as a stub
/// when scripting end-to-end flows.
#[derive(Debug, Default)]
pub struct EchoAgent;

impl ToolAgent for EchoAgent {
    fn invoke(&self, payload: &str) -> Result<String, ToolError> {
        Ok(payload.to_string())
    }
}

/// Resources the builtin agents may need at wiring time.
#[derive(Debug, Clone, Default)]
pub struct AgentWiring {
    /// SQLite database for the `text2sql` agent.
    pub db_path: Option<PathBuf>,
    /// Guideline corpus directory for the `retrieval` agent.
    pub corpus_dir: Option<PathBuf>,
    /// Canned-hits fixture for the `websearch` agent.
    pub web_fixture: Option<PathBuf>,
    /// Interpreter for the `codeexec` agent (default `python3`).
    pub interpreter: Option<String>,
    /// Whether the knowledge graph ingests every reasoning step.
    pub kgraph_auto_ingest: bool,
}

#[derive(Debug, Error)]
pub enum WiringError {
    #[error("tool {tool:?} names unknown builtin agent {agent_id:?}")]
    UnknownAgentId { tool: String, agent_id: String },
    #[error("agent {agent_id:?} needs {what} (tool {tool:?})")]
    MissingResource {
        tool: String,
        agent_id: String,
        what: &'static str,
    },
    #[error("agent setup failed: {0}")]
    Setup(String),
}

/// Instantiate one agent per registry tool.
///
/// Builtin ids: `text2sql`, `retrieval`, `websearch`, `codeexec`,
/// `longitudinal`, `kgraph`, `echo`.
pub fn build_agent_map(
    registry: &Registry,
    backend: Arc<dyn Backend>,
    wiring: &AgentWiring,
) -> Result<AgentMap, WiringError> {
    let mut agents = AgentMap::new();
    for tool in registry.tools() {
        let agent: Arc<dyn ToolAgent> = match &tool.kind {
            ToolKind::External { endpoint, timeout_ms } => Arc::new(external::ExternalAgent::new(
                endpoint.to_string(),
                Duration::from_millis(*timeout_ms),
            )),
            ToolKind::Builtin { agent_id } => match agent_id.as_str() {
                "text2sql" => {
                    let db = wiring.db_path.clone().ok_or(WiringError::MissingResource {
                        tool: tool.name.clone(),
                        agent_id: agent_id.clone(),
                        what: "a database path (--db)",
                    })?;
                    Arc::new(text2sql::Text2SqlAgent::new(db, Arc::clone(&backend)))
                }
                "retrieval" => {
                    let dir = wiring.corpus_dir.clone().ok_or(WiringError::MissingResource {
                        tool: tool.name.clone(),
                        agent_id: agent_id.clone(),
                        what: "a corpus directory (--corpus)",
                    })?;
                    let index = retrieval::CorpusIndex::ingest_dir(
                        &dir,
                        &retrieval::ChunkParams::default(),
                    )
                    .map_err(|e| WiringError::Setup(e.to_string()))?;
                    Arc::new(retrieval::RetrievalAgent::new(
                        Arc::new(index),
                        retrieval::DEFAULT_TOP_K,
                    ))
                }
                "websearch" => {
                    let fixture = wiring.web_fixture.clone().ok_or(WiringError::MissingResource {
                        tool: tool.name.clone(),
                        agent_id: agent_id.clone(),
                        what: "a web fixture file (--web-fixture)",
                    })?;
                    let provider = websearch::FixtureProvider::from_file(&fixture)
                        .map_err(|e| WiringError::Setup(e.to_string()))?;
                    Arc::new(websearch::WebSearchAgent::new(Arc::new(provider)))
                }
                "codeexec" => Arc::new(codeexec::CodeExecAgent::new(
                    wiring.interpreter.clone().unwrap_or_else(|| "python3".into()),
                    codeexec::ExecLimits::default(),
                )),
                "longitudinal" => Arc::new(longitudinal::LongitudinalAgent::default()),
                "kgraph" => Arc::new(kgraph::KgraphAgent::new(
                    Arc::new(kgraph::KnowledgeGraph::new()),
                    Arc::clone(&backend),
                    wiring.kgraph_auto_ingest,
                )),
                "echo" => Arc::new(EchoAgent),
                other => {
                    return Err(WiringError::UnknownAgentId {
                        tool: tool.name.clone(),
                        agent_id: other.to_string(),
                    })
                }
            },
        };
        agents.insert(tool.name.clone(), agent);
    }
    Ok(agents)
}
