//! Web search behind a pluggable provider interface.
//!
//! A provider returns hits (title, URL, date, snippet) and fetches page
//! bodies; the agent fetches the top hits in parallel and reduces each
//! page to the token window that maximizes token-set overlap with the
//! snippet. Unreachable pages degrade gracefully: the hit is kept with its
//! snippet and no extracted context. The tool output is a JSON block, rich
//! enough for citation.
//!
//! Tests use [`FixtureProvider`], which serves canned hits and page bodies
//! from a JSON file and never touches the network.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use orchestra_core::engine::{ToolAgent, ToolError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderHit {
    pub title: String,
    pub url: String,
    #[serde(default)]
    pub date: String,
    pub snippet: String,
}

/// A search hit with the extracted page context, when the page was
/// reachable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebHit {
    pub title: String,
    pub url: String,
    pub date: String,
    pub snippet: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted_context: Option<String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum WebError {
    #[error("search provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("fetch failed for {url}: {detail}")]
    FetchFailed { url: String, detail: String },
    #[error("bad fixture file: {0}")]
    BadFixture(String),
}

pub trait WebProvider: Send + Sync {
    fn search(&self, query: &str, k: usize) -> Result<Vec<ProviderHit>, WebError>;
    fn fetch(&self, url: &str) -> Result<String, WebError>;
}

fn tokenize_with_spans(text: &str) -> Vec<(String, usize, usize)> {
    let mut tokens = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            start.get_or_insert(i);
        } else if let Some(s) = start.take() {
            tokens.push((text[s..i].to_lowercase(), s, i));
        }
    }
    if let Some(s) = start {
        tokens.push((text[s..].to_lowercase(), s, text.len()));
    }
    tokens
}

/// The byte span of the `window_tokens`-token window maximizing distinct
/// token overlap with the snippet (earliest window on ties), truncated to
/// `max_bytes`.
pub fn extract_context(
    page: &str,
    snippet: &str,
    window_tokens: usize,
    max_bytes: usize,
) -> Option<String> {
    let tokens = tokenize_with_spans(page);
    if tokens.is_empty() {
        return None;
    }
    let wanted: BTreeSet<String> = tokenize_with_spans(snippet)
        .into_iter()
        .map(|(t, _, _)| t)
        .collect();
    let window = window_tokens.max(1).min(tokens.len());
    let mut best: Option<(usize, usize)> = None; // (overlap, start)
    for start in 0..=tokens.len() - window {
        let overlap = tokens[start..start + window]
            .iter()
            .map(|(t, _, _)| t)
            .collect::<BTreeSet<_>>()
            .iter()
            .filter(|t| wanted.contains(**t))
            .count();
        if best.map(|(b, _)| overlap > b).unwrap_or(true) {
            best = Some((overlap, start));
        }
    }
    let (_, start) = best?;
    let byte_start = tokens[start].1;
    let byte_end = tokens[start + window - 1].2;
    let mut end = byte_end.min(byte_start + max_bytes);
    while !page.is_char_boundary(end) {
        end -= 1;
    }
    Some(page[byte_start..end].to_string())
}

/// The web-search tool agent.
pub struct WebSearchAgent {
    provider: Arc<dyn WebProvider>,
    top_k: usize,
    window_tokens: usize,
    max_context_bytes: usize,
}

impl WebSearchAgent {
    pub fn new(provider: Arc<dyn WebProvider>) -> Self {
        Self {
            provider,
            top_k: 5,
            window_tokens: 256,
            max_context_bytes: 4096,
        }
    }

    pub fn with_window_tokens(mut self, window_tokens: usize) -> Self {
        self.window_tokens = window_tokens;
        self
    }

    /// Search and enrich the top hits with extracted page context. Pages
    /// are fetched in parallel; a failed fetch keeps the hit snippet-only.
    pub fn search(&self, query: &str) -> Result<Vec<WebHit>, WebError> {
        let hits = self.provider.search(query, self.top_k)?;
        let enriched: Vec<WebHit> = std::thread::scope(|scope| {
            let handles: Vec<_> = hits
                .iter()
                .map(|hit| {
                    let provider = Arc::clone(&self.provider);
                    scope.spawn(move || {
                        let extracted = provider.fetch(&hit.url).ok().and_then(|page| {
                            extract_context(
                                &page,
                                &hit.snippet,
                                self.window_tokens,
                                self.max_context_bytes,
                            )
                        });
                        WebHit {
                            title: hit.title.clone(),
                            url: hit.url.clone(),
                            date: hit.date.clone(),
                            snippet: hit.snippet.clone(),
                            extracted_context: extracted,
                        }
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("fetch thread")).collect()
        });
        Ok(enriched)
    }
}

impl ToolAgent for WebSearchAgent {
    fn invoke(&self, payload: &str) -> Result<String, ToolError> {
        let hits = self.search(payload).map_err(|e| ToolError(e.to_string()))?;
        serde_json::to_string_pretty(&hits).map_err(|e| ToolError(e.to_string()))
    }
}

/// Canned hits and page bodies loaded from a JSON fixture file:
///
/// ```json
/// {
///   "queries": {"dyspnea": [{"title": "...", "url": "...", "snippet": "..."}]},
///   "default": [],
///   "pages": {"https://example.org/a": "full page text"}
/// }
/// ```
///
/// URLs missing from `pages` behave as unreachable.
#[derive(Debug, Default, Deserialize)]
pub struct FixtureProvider {
    #[serde(default)]
    queries: BTreeMap<String, Vec<ProviderHit>>,
    #[serde(default)]
    default: Vec<ProviderHit>,
    #[serde(default)]
    pages: BTreeMap<String, String>,
}

impl FixtureProvider {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, WebError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| WebError::BadFixture(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| WebError::BadFixture(e.to_string()))
    }

    pub fn with_query(mut self, query: &str, hits: Vec<ProviderHit>) -> Self {
        self.queries.insert(query.to_string(), hits);
        self
    }

    pub fn with_page(mut self, url: &str, body: &str) -> Self {
        self.pages.insert(url.to_string(), body.to_string());
        self
    }
}

impl WebProvider for FixtureProvider {
    fn search(&self, query: &str, k: usize) -> Result<Vec<ProviderHit>, WebError> {
        let hits = self.queries.get(query).unwrap_or(&self.default);
        Ok(hits.iter().take(k).cloned().collect())
    }

    fn fetch(&self, url: &str) -> Result<String, WebError> {
        self.pages.get(url).cloned().ok_or_else(|| WebError::FetchFailed {
            url: url.to_string(),
            detail: "no fixture page".into(),
        })
    }
}
