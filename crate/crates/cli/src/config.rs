//! Shared run configuration with explicit precedence: values from a
//! `--config` JSON file override command-line flags, which override
//! environment variables (`ORCHESTRA_BASE_URL`, `ORCHESTRA_API_KEY`),
//! which override built-in defaults.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Deserialize;

use orchestra_core::backend::{Backend, HttpChatBackend, ScriptedBackend};
use orchestra_core::engine::{AnswerMode, CaseConfig, EngineBudget, EngineOptions};
use orchestra_core::registry::Registry;
use orchestra_core::trace::StrategyDescriptor;
use orchestra_agents::AgentWiring;

pub const BASE_URL_ENV: &str = "ORCHESTRA_BASE_URL";

/// Flags shared by `run`, `bench`, and `serve`.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonOpts {
    /// Tool registry JSON document.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Scripted backend: line-delimited JSON script file.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// HTTP backend base URL (also via ORCHESTRA_BASE_URL).
    #[arg(long)]
    pub base_url: Option<String>,
    /// Model name for the HTTP backend.
    #[arg(long)]
    pub model: Option<String>,
    /// Trajectories per case.
    #[arg(long)]
    pub k: Option<usize>,
    /// Base seed; trajectory i runs with seed + i.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Strategy file: JSON array of strategy descriptors.
    #[arg(long)]
    pub strategies: Option<PathBuf>,
    /// Output directory for traces, summaries, and reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub max_wall_seconds: Option<f64>,
    /// Accept a marker-free segment as the conclusion.
    #[arg(long)]
    pub lenient: bool,
    /// Run a case's trajectories in parallel.
    #[arg(long)]
    pub parallel: bool,
    /// SQLite database for the text2sql agent.
    #[arg(long)]
    pub db: Option<PathBuf>,
    /// Guideline corpus directory for the retrieval agent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Canned web hits for the websearch agent.
    #[arg(long)]
    pub web_fixture: Option<PathBuf>,
    /// Interpreter for the codeexec agent.
    #[arg(long)]
    pub interpreter: Option<String>,
    /// JSON config file; its values take highest precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// The `--config` file: every field optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    registry: Option<PathBuf>,
    script: Option<PathBuf>,
    base_url: Option<String>,
    model: Option<String>,
    k: Option<usize>,
    seed: Option<u64>,
    strategies: Option<PathBuf>,
    out: Option<PathBuf>,
    max_steps: Option<usize>,
    max_wall_seconds: Option<f64>,
    lenient: Option<bool>,
    parallel: Option<bool>,
    db: Option<PathBuf>,
    corpus: Option<PathBuf>,
    web_fixture: Option<PathBuf>,
    interpreter: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Scripted { script: PathBuf },
    Http { base_url: String, model: String },
}

/// Fully resolved settings.
#[derive(Debug, Clone)]
pub struct Settings {
    pub registry_path: PathBuf,
    pub backend: BackendSpec,
    pub k: usize,
    pub seed: u64,
    pub strategies_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub max_steps: Option<usize>,
    pub max_wall_seconds: Option<f64>,
    pub lenient: bool,
    pub parallel: bool,
    pub wiring: AgentWiring,
}

fn pick<T>(config: Option<T>, flag: Option<T>, env: Option<T>) -> Option<T> {
    config.or(flag).or(env)
}

impl Settings {
    /// Apply the precedence order and validate the combination.
    pub fn resolve(opts: &CommonOpts) -> Result<Self> {
        let file: ConfigFile = match &opts.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read config file {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("bad config file {}", path.display()))?
            }
            None => ConfigFile::default(),
        };

        let registry_path = pick(file.registry, opts.registry.clone(), None)
            .context("a registry is required (--registry)")?;
        if !registry_path.exists() {
            bail!("registry file {} does not exist", registry_path.display());
        }

        let script = pick(file.script, opts.script.clone(), None);
        let base_url = pick(
            file.base_url,
            opts.base_url.clone(),
            std::env::var(BASE_URL_ENV).ok(),
        );
        let model = pick(file.model, opts.model.clone(), None);
        let backend = match (script, base_url, model) {
            (Some(script), None, _) => {
                if !script.exists() {
                    bail!("script file {} does not exist", script.display());
                }
                BackendSpec::Scripted { script }
            }
            (None, Some(base_url), Some(model)) => BackendSpec::Http { base_url, model },
            (None, Some(_), None) => bail!("an HTTP backend needs --model"),
            (Some(_), Some(_), _) => bail!("choose one backend: --script or --base-url"),
            (None, None, _) => bail!("a backend is required: --script or --base-url with --model"),
        };

        let strategies_path = pick(file.strategies, opts.strategies.clone(), None);
        if let Some(path) = &strategies_path {
            if !path.exists() {
                bail!("strategy file {} does not exist", path.display());
            }
        }

        Ok(Self {
            registry_path,
            backend,
            k: pick(file.k, opts.k, None).unwrap_or(1),
            seed: pick(file.seed, opts.seed, None).unwrap_or(0),
            strategies_path,
            out_dir: pick(file.out, opts.out.clone(), None)
                .unwrap_or_else(|| PathBuf::from("orchestra-out")),
            max_steps: pick(file.max_steps, opts.max_steps, None),
            max_wall_seconds: pick(file.max_wall_seconds, opts.max_wall_seconds, None),
            lenient: file.lenient.unwrap_or(opts.lenient),
            parallel: file.parallel.unwrap_or(opts.parallel),
            wiring: AgentWiring {
                db_path: pick(file.db, opts.db.clone(), None),
                corpus_dir: pick(file.corpus, opts.corpus.clone(), None),
                web_fixture: pick(file.web_fixture, opts.web_fixture.clone(), None),
                interpreter: pick(file.interpreter, opts.interpreter.clone(), None),
                kgraph_auto_ingest: true,
            },
        })
    }

    pub fn load_registry(&self) -> Result<Registry> {
        let text = std::fs::read_to_string(&self.registry_path)
            .with_context(|| format!("cannot read registry {}", self.registry_path.display()))?;
        Registry::load(&text)
            .with_context(|| format!("invalid registry {}", self.registry_path.display()))
    }

    pub fn build_backend(&self) -> Result<Arc<dyn Backend>> {
        Ok(match &self.backend {
            BackendSpec::Scripted { script } => Arc::new(
                ScriptedBackend::from_file(script)
                    .with_context(|| format!("cannot load script {}", script.display()))?,
            ),
            BackendSpec::Http { base_url, model } => {
                Arc::new(HttpChatBackend::new(base_url.clone(), model.clone()))
            }
        })
    }

    pub fn case_config(&self) -> Result<CaseConfig> {
        let strategies: Vec<StrategyDescriptor> = match &self.strategies_path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read strategy file {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("bad strategy file {}", path.display()))?
            }
            None => Vec::new(),
        };
        let mut budget = EngineBudget::default();
        if let Some(steps) = self.max_steps {
            budget.max_steps = steps;
        }
        if let Some(seconds) = self.max_wall_seconds {
            budget.max_wall = Duration::from_secs_f64(seconds);
        }
        Ok(CaseConfig {
            k: self.k,
            strategies,
            base_seed: self.seed,
            budget,
            options: EngineOptions {
                mode: if self.lenient { AnswerMode::Lenient } else { AnswerMode::Strict },
                ..Default::default()
            },
            parallel: self.parallel,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &std::path::Path, name: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, "{}").unwrap();
        path
    }

    #[test]
    fn config_file_overrides_flags_which_override_env() {
        let dir = tempfile::tempdir().unwrap();
        let registry = touch(dir.path(), "reg.json");
        let script = touch(dir.path(), "script.jsonl");
        let config_path = dir.path().join("config.json");
        std::fs::write(&config_path, r#"{"k": 7}"#).unwrap();

        let opts = CommonOpts {
            registry: Some(registry),
            script: Some(script),
            k: Some(3),
            config: Some(config_path),
            ..Default::default()
        };
        let settings = Settings::resolve(&opts).unwrap();
        // Config file beats the flag.
        assert_eq!(settings.k, 7);
        assert!(matches!(settings.backend, BackendSpec::Scripted { .. }));
    }

    #[test]
    fn backend_must_be_unambiguous() {
        let dir = tempfile::tempdir().unwrap();
        let registry = touch(dir.path(), "reg.json");
        let script = touch(dir.path(), "script.jsonl");
        let opts = CommonOpts {
            registry: Some(registry.clone()),
            script: Some(script),
            base_url: Some("http://example".into()),
            model: Some("m".into()),
            ..Default::default()
        };
        assert!(Settings::resolve(&opts).is_err());
        let opts = CommonOpts {
            registry: Some(registry),
            ..Default::default()
        };
        assert!(Settings::resolve(&opts).is_err());
    }

    #[test]
    fn missing_registry_names_the_path() {
        let opts = CommonOpts {
            registry: Some(PathBuf::from("/nonexistent/reg.json")),
            ..Default::default()
        };
        let err = Settings::resolve(&opts).unwrap_err().to_string();
        assert!(err.contains("/nonexistent/reg.json"), "{err}");
    }
}
