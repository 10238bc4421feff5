//! `orchestra` — run tool-augmented reasoning cases, benchmarks, and the
//! HTTP service.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use orchestra_core::trace::Question;
use orchestra_agents::build_agent_map;

use orchestra_cli::commands::{self, EXIT_CONFIG, EXIT_OK};
use orchestra_cli::config::{CommonOpts, Settings};
use orchestra_cli::serve;

#[derive(Parser)]
#[command(name = "orchestra", version, about = "Tool-augmented reasoning runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one question as a k-trajectory case.
    Run {
        /// Question text (or use --question-file).
        #[arg(long)]
        question: Option<String>,
        /// JSON file holding a question object.
        #[arg(long)]
        question_file: Option<PathBuf>,
        /// Comma-separated canonical labels for answer normalization.
        #[arg(long)]
        labels: Option<String>,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Run a dataset benchmark and score best@1 / majority@k / best@k.
    Bench {
        /// Line-delimited JSON dataset of questions.
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Inspect trace files.
    Trace {
        #[command(subcommand)]
        command: TraceCommand,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Bounded queue of pending cases.
        #[arg(long)]
        queue: Option<usize>,
        /// Worker threads executing cases.
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Registry tooling.
    Tools {
        #[command(subcommand)]
        command: ToolsCommand,
    },
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Render trajectories from a trace file as numbered turns.
    Show {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        question_id: Option<String>,
    },
}

#[derive(Subcommand)]
enum ToolsCommand {
    /// Validate a registry config; optionally probe external endpoints.
    Validate {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        probe: bool,
    },
}

fn question_from_args(
    question: Option<String>,
    question_file: Option<PathBuf>,
    labels: Option<String>,
) -> Result<Question> {
    match (question, question_file) {
        (Some(text), None) => Ok(Question {
            id: "interactive".into(),
            text,
            label_set: labels
                .map(|l| l.split(',').map(|s| s.trim().to_string()).collect())
                .unwrap_or_default(),
            aliases: Default::default(),
            gold: None,
            attachments: vec![],
        }),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("cannot read question file {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("bad question file {}", path.display()))
        }
        (Some(_), Some(_)) => bail!("choose one of --question or --question-file"),
        (None, None) => bail!("a question is required: --question or --question-file"),
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run {
            question,
            question_file,
            labels,
            opts,
        } => {
            let settings = Settings::resolve(&opts)?;
            let question = question_from_args(question, question_file, labels)?;
            commands::cmd_run(question, &settings)
        }
        Command::Bench { dataset, opts } => {
            let settings = Settings::resolve(&opts)?;
            commands::cmd_bench(&dataset, &settings)
        }
        Command::Trace {
            command: TraceCommand::Show { file, question_id },
        } => commands::cmd_trace_show(&file, question_id.as_deref()),
        Command::Serve {
            bind,
            queue,
            workers,
            opts,
        } => {
            let settings = Settings::resolve(&opts)?;
            let registry = settings.load_registry()?;
            let backend = settings.build_backend()?;
            let agents = build_agent_map(&registry, backend.clone(), &settings.wiring)?;
            orchestra_core::engine::validate_wiring(&registry, &agents)?;
            let case_cfg = settings.case_config()?;
            let listener = std::net::TcpListener::bind(&bind)
                .with_context(|| format!("cannot bind {bind}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            serve::serve_on(
                listener,
                registry,
                backend,
                agents,
                case_cfg,
                settings.out_dir.clone(),
                queue.unwrap_or(serve::DEFAULT_QUEUE_CAPACITY),
                workers.unwrap_or_else(|| {
                    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(4)
                }),
            )?;
            Ok(EXIT_OK)
        }
        Command::Tools {
            command: ToolsCommand::Validate { registry, probe },
        } => commands::cmd_tools_validate(&registry, probe),
    }
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(EXIT_CONFIG);
        }
    }
}
