//! Core runtime for tool-augmented reasoning.
//!
//! A model backend emits marker tokens to invoke registered tools in the
//! middle of its reasoning; the engine routes each query to an agent,
//! splices the result back into the context, and records a fully auditable
//! trajectory. Cases run k trajectories under varied strategies and are
//! scored with best@1 / majority@k / best@k plus the usual classification
//! metric families.
//!
//! Module map:
//! - [`marker`] — the tool-call token grammar: scanner and renderers
//! - [`trace`] — trajectory records, JSONL persistence, human rendering
//! - [`registry`] — tool descriptors and context rendering
//! - [`backend`] — generation backends (HTTP chat-completions, scripted)
//! - [`engine`] — the reasoning loop and multi-trajectory case runner
//! - [`eval`] — answer normalization, voting, metrics
//! - [`bench`] — dataset-level benchmark driver
//! - [`netguard`] — outbound-network accounting for offline guarantees

pub mod backend;
pub mod bench;
pub mod engine;
pub mod eval;
pub mod marker;
pub mod netguard;
pub mod registry;
pub mod trace;
