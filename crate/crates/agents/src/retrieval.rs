//! Guideline retrieval: chunked corpus, BM25 ranking, recency tie-break.
//!
//! Documents are split into overlapping token chunks (defaults: 300 tokens,
//! 50 overlap) at ingest. Queries are scored with BM25 (k1 = 1.2,
//! b = 0.75); the corpus statistics (document frequency, average length)
//! are computed over the chunks matching at least one query token, which
//! keeps rankings stable when unrelated documents are added to the corpus.
//! Chunks sharing no token with the query never appear. Ties in score
//! break toward the newer document date, then deterministically by id.
//!
//! Corpus directories hold plain-text or Markdown files; a leading
//! `date: YYYY-MM-DD` front-matter line dates a document, otherwise its
//! mtime does.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use orchestra_core::engine::{ToolAgent, ToolError};
use serde::Serialize;
use thiserror::Error;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkParams {
    pub chunk_tokens: usize,
    pub overlap_tokens: usize,
}

impl Default for ChunkParams {
    fn default() -> Self {
        Self {
            chunk_tokens: 300,
            overlap_tokens: 50,
        }
    }
}

/// An ingestable document with a recency key (epoch seconds).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub date: i64,
}

/// A ranked chunk returned from search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalChunk {
    pub doc_id: String,
    pub chunk_index: usize,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("cannot ingest {path}: {detail}")]
    Ingest { path: String, detail: String },
}

#[derive(Debug)]
struct StoredChunk {
    doc_id: String,
    chunk_index: usize,
    text: String,
    term_freq: BTreeMap<String, usize>,
    token_count: usize,
    date: i64,
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

fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_spans(text).into_iter().map(|(t, _, _)| t).collect()
}

/// BM25 index over document chunks.
pub struct CorpusIndex {
    chunks: Vec<StoredChunk>,
}

impl CorpusIndex {
    pub fn build(documents: &[Document], params: &ChunkParams) -> Self {
        let chunk_tokens = params.chunk_tokens.max(1);
        let step = chunk_tokens.saturating_sub(params.overlap_tokens).max(1);
        let mut chunks = Vec::new();
        for doc in documents {
            let tokens = tokenize_with_spans(&doc.text);
            if tokens.is_empty() {
                continue;
            }
            let mut chunk_index = 0;
            let mut start = 0;
            while start < tokens.len() {
                let end = (start + chunk_tokens).min(tokens.len());
                let byte_start = tokens[start].1;
                let byte_end = tokens[end - 1].2;
                let mut term_freq = BTreeMap::new();
                for (token, _, _) in &tokens[start..end] {
                    *term_freq.entry(token.clone()).or_insert(0) += 1;
                }
                chunks.push(StoredChunk {
                    doc_id: doc.id.clone(),
                    chunk_index,
                    text: doc.text[byte_start..byte_end].to_string(),
                    term_freq,
                    token_count: end - start,
                    date: doc.date,
                });
                if end == tokens.len() {
                    break;
                }
                start += step;
                chunk_index += 1;
            }
        }
        Self { chunks }
    }

    /// Ingest every `.txt`/`.md` file under a directory (recursively, in
    /// path order).
    pub fn ingest_dir(dir: impl AsRef<Path>, params: &ChunkParams) -> Result<Self, RetrievalError> {
        let mut documents = Vec::new();
        let mut paths: Vec<_> = walkdir::WalkDir::new(dir.as_ref())
            .into_iter()
            .filter_map(|entry| entry.ok())
            .filter(|entry| {
                entry.file_type().is_file()
                    && matches!(
                        entry.path().extension().and_then(|e| e.to_str()),
                        Some("txt") | Some("md")
                    )
            })
            .map(|entry| entry.into_path())
            .collect();
        paths.sort();
        for path in paths {
            let text = std::fs::read_to_string(&path).map_err(|e| RetrievalError::Ingest {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
            let date = front_matter_date(&text).unwrap_or_else(|| {
                std::fs::metadata(&path)
                    .and_then(|m| m.modified())
                    .ok()
                    .and_then(|t| t.duration_since(std::time::UNIX_EPOCH).ok())
                    .map(|d| d.as_secs() as i64)
                    .unwrap_or(0)
            });
            let id = path
                .strip_prefix(dir.as_ref())
                .unwrap_or(&path)
                .display()
                .to_string();
            documents.push(Document { id, text, date });
        }
        Ok(Self::build(&documents, params))
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    /// Rank chunks against the query; at most `k` results, all with
    /// positive BM25 score.
    pub fn search(&self, query: &str, k: usize) -> Result<Vec<RetrievalChunk>, RetrievalError> {
        if self.chunks.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let query_terms: std::collections::BTreeSet<String> = tokenize(query).into_iter().collect();
        let matching: Vec<&StoredChunk> = self
            .chunks
            .iter()
            .filter(|chunk| query_terms.iter().any(|t| chunk.term_freq.contains_key(t)))
            .collect();
        if matching.is_empty() {
            return Ok(Vec::new());
        }
        let n = matching.len() as f64;
        let avgdl = matching.iter().map(|c| c.token_count as f64).sum::<f64>() / n;
        let mut df: BTreeMap<&String, usize> = BTreeMap::new();
        for term in &query_terms {
            let count = matching.iter().filter(|c| c.term_freq.contains_key(term)).count();
            if count > 0 {
                df.insert(term, count);
            }
        }
        let mut scored: Vec<(f64, &StoredChunk)> = matching
            .iter()
            .map(|chunk| {
                let mut score = 0.0;
                for (term, &df_t) in &df {
                    let tf = *chunk.term_freq.get(*term).unwrap_or(&0) as f64;
                    if tf == 0.0 {
                        continue;
                    }
                    let idf = ((n + 1.0) / (df_t as f64 + 0.5)).ln();
                    let norm = tf + BM25_K1 * (1.0 - BM25_B + BM25_B * chunk.token_count as f64 / avgdl);
                    score += idf * tf * (BM25_K1 + 1.0) / norm;
                }
                (score, *chunk)
            })
            .filter(|(score, _)| *score > 0.0)
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.1.date.cmp(&a.1.date))
                .then(a.1.doc_id.cmp(&b.1.doc_id))
                .then(a.1.chunk_index.cmp(&b.1.chunk_index))
        });
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(score, chunk)| RetrievalChunk {
                doc_id: chunk.doc_id.clone(),
                chunk_index: chunk.chunk_index,
                text: chunk.text.clone(),
                score,
            })
            .collect())
    }
}

/// `date: YYYY-MM-DD` in the first lines of a document, as epoch seconds.
fn front_matter_date(text: &str) -> Option<i64> {
    for line in text.lines().take(10) {
        if let Some(value) = line.trim().strip_prefix("date:") {
            let mut parts = value.trim().splitn(3, '-');
            let year: i64 = parts.next()?.parse().ok()?;
            let month: u32 = parts.next()?.parse().ok()?;
            let day: u32 = parts.next()?.parse().ok()?;
            if !(1..=12).contains(&month) || !(1..=31).contains(&day) {
                return None;
            }
            return Some(days_from_civil(year, month, day) * 86_400);
        }
    }
    None
}

/// Days since 1970-01-01 for a civil date (proleptic Gregorian).
fn days_from_civil(year: i64, month: u32, day: u32) -> i64 {
    let y = if month <= 2 { year - 1 } else { year };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = y - era * 400;
    let mp = if month > 2 { month - 3 } else { month + 9 } as i64;
    let doy = (153 * mp + 2) / 5 + day as i64 - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}

/// Tool agent over a shared corpus index.
pub struct RetrievalAgent {
    index: Arc<CorpusIndex>,
    top_k: usize,
}

impl RetrievalAgent {
    pub fn new(index: Arc<CorpusIndex>, top_k: usize) -> Self {
        Self { index, top_k }
    }
}

impl ToolAgent for RetrievalAgent {
    fn invoke(&self, payload: &str) -> Result<String, ToolError> {
        let chunks = self
            .index
            .search(payload, self.top_k)
            .map_err(|e| ToolError(e.to_string()))?;
        Ok(chunks
            .iter()
            .map(|c| {
                format!(
                    "--- {} (chunk {}, score {:.3})\n{}",
                    c.doc_id, c.chunk_index, c.score, c.text
                )
            })
            .collect::<Vec<_>>()
            .join("\n"))
    }
}
