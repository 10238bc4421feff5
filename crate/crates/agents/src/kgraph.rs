//! Clinical knowledge graph: external memory over (subject, relation,
//! object) triples extracted from the reasoning prose.
//!
//! Extraction prompts the backend once per observed step and parses
//! pipe-separated triples from the reply; concepts are normalized
//! (lowercased, trimmed) and duplicate triples merge their step
//! provenance. Queries run in two modes, selected by a `local:` or
//! `global:` payload prefix (local is the default): local returns the
//! 1-hop neighborhood of concepts sharing a token with the payload, global
//! ranks triples by token overlap. Extraction failures degrade to an empty
//! ingest; an empty query result is valid and renders as an empty string.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use orchestra_core::backend::{Backend, GenerationRequest, Message};
use orchestra_core::engine::{ToolAgent, ToolError};
use serde::Serialize;

/// A normalized triple with the steps that asserted it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Triple {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub provenance: Vec<usize>,
}

#[derive(Default)]
struct GraphState {
    /// Insertion-ordered triples; the map indexes (s, r, o) -> position.
    triples: Vec<Triple>,
    index: BTreeMap<(String, String, String), usize>,
}

/// Thread-safe triple store. Writes serialize behind a mutex; queries
/// clone the snapshot they rank over.
#[derive(Default)]
pub struct KnowledgeGraph {
    state: Mutex<GraphState>,
}

fn normalize(concept: &str) -> String {
    concept.trim().to_lowercase()
}

fn tokens(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store triples for a step; duplicates merge provenance.
    pub fn insert(&self, step: usize, triples: impl IntoIterator<Item = (String, String, String)>) {
        let mut state = self.state.lock().expect("graph lock");
        for (subject, relation, object) in triples {
            let subject = normalize(&subject);
            let relation = normalize(&relation);
            let object = normalize(&object);
            if subject.is_empty() || relation.is_empty() || object.is_empty() {
                continue;
            }
            let key = (subject.clone(), relation.clone(), object.clone());
            match state.index.get(&key) {
                Some(&pos) => {
                    let provenance = &mut state.triples[pos].provenance;
                    if !provenance.contains(&step) {
                        provenance.push(step);
                    }
                }
                None => {
                    let pos = state.triples.len();
                    state.triples.push(Triple {
                        subject,
                        relation,
                        object,
                        provenance: vec![step],
                    });
                    state.index.insert(key, pos);
                }
            }
        }
    }

    pub fn triples(&self) -> Vec<Triple> {
        self.state.lock().expect("graph lock").triples.clone()
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("graph lock").triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// 1-hop neighborhood: triples whose subject or object shares a token
    /// with the payload.
    pub fn query_local(&self, payload: &str) -> Vec<Triple> {
        let wanted = tokens(payload);
        self.triples()
            .into_iter()
            .filter(|t| {
                !tokens(&t.subject).is_disjoint(&wanted) || !tokens(&t.object).is_disjoint(&wanted)
            })
            .collect()
    }

    /// Top-k triples by token overlap with the payload; zero-overlap
    /// triples never appear.
    pub fn query_global(&self, payload: &str, k: usize) -> Vec<Triple> {
        let wanted = tokens(payload);
        let mut ranked: Vec<(usize, usize, Triple)> = self
            .triples()
            .into_iter()
            .enumerate()
            .filter_map(|(pos, t)| {
                let combined = format!("{} {} {}", t.subject, t.relation, t.object);
                let overlap = tokens(&combined).intersection(&wanted).count();
                (overlap > 0).then_some((overlap, pos, t))
            })
            .collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        ranked.into_iter().take(k).map(|(_, _, t)| t).collect()
    }
}

/// Render triples as `subject —relation→ object (step t)` lines.
pub fn render_triples(triples: &[Triple]) -> String {
    triples
        .iter()
        .map(|t| {
            let steps = t
                .provenance
                .iter()
                .map(|s| format!("step {s}"))
                .collect::<Vec<_>>()
                .join(", ");
            format!("{} —{}→ {} ({})", t.subject, t.relation, t.object, steps)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

const EXTRACTION_SYSTEM_PROMPT: &str = "Extract factual (subject, relation, object) triples \
from the text. Reply with one triple per line formatted as subject|relation|object, lowercase, \
and nothing else. Reply with an empty line if there are no triples.";

/// Parse `subject|relation|object` lines from an extraction reply.
pub fn parse_triples(reply: &str) -> Vec<(String, String, String)> {
    reply
        .lines()
        .filter_map(|line| {
            let mut parts = line.splitn(3, '|');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(s), Some(r), Some(o)) => {
                    Some((s.to_string(), r.to_string(), o.to_string()))
                }
                _ => None,
            }
        })
        .collect()
}

/// Tool agent over a shared [`KnowledgeGraph`].
///
/// With `auto_ingest` the agent observes every reasoning step and extracts
/// triples from its prose via the backend.
pub struct KgraphAgent {
    graph: Arc<KnowledgeGraph>,
    backend: Arc<dyn Backend>,
    auto_ingest: bool,
    global_k: usize,
}

impl KgraphAgent {
    pub fn new(graph: Arc<KnowledgeGraph>, backend: Arc<dyn Backend>, auto_ingest: bool) -> Self {
        Self {
            graph,
            backend,
            auto_ingest,
            global_k: 10,
        }
    }

    pub fn graph(&self) -> &Arc<KnowledgeGraph> {
        &self.graph
    }

    /// Extract triples from prose via the backend and store them under
    /// `step`. Extraction failures degrade to an empty ingest.
    pub fn ingest(&self, step: usize, prose: &str) -> Vec<Triple> {
        if prose.trim().is_empty() {
            return Vec::new();
        }
        let request = GenerationRequest {
            messages: vec![Message::system(EXTRACTION_SYSTEM_PROMPT), Message::user(prose)],
            temperature: 0.0,
            seed: None,
            stop_sequences: vec![],
            max_tokens: 512,
        };
        let Ok(result) = self.backend.generate(&request) else {
            return Vec::new();
        };
        let parsed = parse_triples(&result.text);
        let before = self.graph.len();
        self.graph.insert(step, parsed);
        let triples = self.graph.triples();
        triples[before.min(triples.len())..].to_vec()
    }
}

impl ToolAgent for KgraphAgent {
    fn invoke(&self, payload: &str) -> Result<String, ToolError> {
        let trimmed = payload.trim();
        let (mode_global, query) = if let Some(rest) = trimmed.strip_prefix("global:") {
            (true, rest.trim())
        } else if let Some(rest) = trimmed.strip_prefix("local:") {
            (false, rest.trim())
        } else {
            (false, trimmed)
        };
        let triples = if mode_global {
            self.graph.query_global(query, self.global_k)
        } else {
            self.graph.query_local(query)
        };
        Ok(render_triples(&triples))
    }

    fn observe_step(&self, index: usize, prose: &str) {
        if self.auto_ingest {
            self.ingest(index, prose);
        }
    }
}
