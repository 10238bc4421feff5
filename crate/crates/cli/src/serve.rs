//! HTTP service: submit cases, poll results, fetch traces.
//!
//! Case execution is asynchronous behind a bounded in-process queue served
//! by a pool of worker threads; the HTTP layer never blocks on the engine.
//! Every artifact the API returns is reconstructible from the trace files
//! it writes: `GET /traces/{case_id}` reads the file back verbatim, and
//! `GET /cases/{id}` serves the case result assembled from the same
//! records.
//!
//! Endpoints: `POST /cases` (202 with a case id; 400 on schema errors;
//! 503 while the queue is full or the backend is unreachable),
//! `GET /cases/{id}`, `GET /traces/{case_id}`, `GET /tools` (the exact
//! registry render bytes), `GET /healthz`.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{mpsc, Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::Result;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use orchestra_core::backend::Backend;
use orchestra_core::engine::{run_case, AgentMap, CaseConfig, CaseResult};
use orchestra_core::registry::Registry;
use orchestra_core::trace::{Question, TraceWriter};

pub const DEFAULT_QUEUE_CAPACITY: usize = 16;

/// How long `POST /cases` answers 503 after a case died entirely on
/// backend errors; accepting traffic again doubles as the health probe.
const BACKEND_COOLDOWN: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum CaseStatus {
    Queued,
    Running,
    Done,
    Failed,
}

struct CaseEntry {
    status: CaseStatus,
    result: Option<CaseResult>,
    error: Option<String>,
    trace_path: PathBuf,
}

struct Job {
    case_id: Uuid,
    question: Question,
    k_override: Option<usize>,
}

struct ServeState {
    registry: Arc<Registry>,
    backend: Arc<dyn Backend>,
    agents: Arc<AgentMap>,
    case_cfg: CaseConfig,
    out_dir: PathBuf,
    cases: Mutex<HashMap<Uuid, CaseEntry>>,
    queue: mpsc::SyncSender<Job>,
    backend_unreachable_until: Mutex<Option<Instant>>,
}

#[derive(Deserialize)]
struct CreateCase {
    question: String,
    #[serde(default)]
    label_set: Option<Vec<String>>,
    #[serde(default)]
    k: Option<usize>,
}

#[derive(Serialize)]
struct CaseView<'a> {
    case_id: String,
    status: CaseStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    result: &'a Option<CaseResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: &'a Option<String>,
}

async fn healthz() -> &'static str {
    "ok"
}

async fn get_tools(State(state): State<Arc<ServeState>>) -> Response {
    (
        [(header::CONTENT_TYPE, "text/plain; charset=utf-8")],
        state.registry.render_context(),
    )
        .into_response()
}

async fn create_case(
    State(state): State<Arc<ServeState>>,
    body: Result<Json<CreateCase>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let Json(request) = match body {
        Ok(body) => body,
        Err(rejection) => {
            return (StatusCode::BAD_REQUEST, rejection.to_string()).into_response();
        }
    };
    if request.question.trim().is_empty() {
        return (StatusCode::BAD_REQUEST, "question must be non-empty").into_response();
    }
    {
        let until = state.backend_unreachable_until.lock().expect("health lock");
        if until.is_some_and(|t| Instant::now() < t) {
            return (StatusCode::SERVICE_UNAVAILABLE, "backend unreachable").into_response();
        }
    }
    let case_id = Uuid::new_v4();
    let question = Question {
        id: case_id.to_string(),
        text: request.question,
        label_set: request.label_set.unwrap_or_default(),
        aliases: Default::default(),
        gold: None,
        attachments: vec![],
    };
    let job = Job {
        case_id,
        question,
        k_override: request.k,
    };
    let trace_path = state.out_dir.join("traces").join(format!("{case_id}.jsonl"));
    {
        let mut cases = state.cases.lock().expect("cases lock");
        cases.insert(
            case_id,
            CaseEntry {
                status: CaseStatus::Queued,
                result: None,
                error: None,
                trace_path,
            },
        );
    }
    match state.queue.try_send(job) {
        Ok(()) => (
            StatusCode::ACCEPTED,
            Json(serde_json::json!({ "case_id": case_id.to_string() })),
        )
            .into_response(),
        Err(_) => {
            state.cases.lock().expect("cases lock").remove(&case_id);
            (StatusCode::SERVICE_UNAVAILABLE, "case queue is full").into_response()
        }
    }
}

async fn get_case(
    State(state): State<Arc<ServeState>>,
    UrlPath(id): UrlPath<String>,
) -> Response {
    let Ok(case_id) = Uuid::parse_str(&id) else {
        return (StatusCode::NOT_FOUND, "unknown case id").into_response();
    };
    let cases = state.cases.lock().expect("cases lock");
    match cases.get(&case_id) {
        Some(entry) => Json(&CaseView {
            case_id: id,
            status: entry.status,
            result: &entry.result,
            error: &entry.error,
        })
        .into_response(),
        None => (StatusCode::NOT_FOUND, "unknown case id").into_response(),
    }
}

async fn get_trace(
    State(state): State<Arc<ServeState>>,
    UrlPath(id): UrlPath<String>,
) -> Response {
    let Ok(case_id) = Uuid::parse_str(&id) else {
        return (StatusCode::NOT_FOUND, "unknown case id").into_response();
    };
    let path = {
        let cases = state.cases.lock().expect("cases lock");
        match cases.get(&case_id) {
            Some(entry) => entry.trace_path.clone(),
            None => return (StatusCode::NOT_FOUND, "unknown case id").into_response(),
        }
    };
    match std::fs::read_to_string(&path) {
        Ok(body) => (
            [(header::CONTENT_TYPE, "application/x-ndjson")],
            body,
        )
            .into_response(),
        Err(_) => (StatusCode::NOT_FOUND, "trace not written yet").into_response(),
    }
}

fn worker_loop(state: Arc<ServeState>, jobs: Arc<Mutex<mpsc::Receiver<Job>>>) {
    loop {
        let job = {
            let receiver = jobs.lock().expect("job receiver lock");
            receiver.recv()
        };
        let Ok(job) = job else {
            return; // queue closed
        };
        {
            let mut cases = state.cases.lock().expect("cases lock");
            if let Some(entry) = cases.get_mut(&job.case_id) {
                entry.status = CaseStatus::Running;
            }
        }
        let mut cfg = state.case_cfg.clone();
        if let Some(k) = job.k_override {
            cfg.k = k.max(1);
        }
        let outcome = run_case(
            &job.question,
            &state.registry,
            state.backend.as_ref(),
            &state.agents,
            &cfg,
        );
        let mut cases = state.cases.lock().expect("cases lock");
        let Some(entry) = cases.get_mut(&job.case_id) else {
            continue;
        };
        match outcome {
            Ok(case) => {
                let write_result = TraceWriter::create(&entry.trace_path).and_then(|writer| {
                    case.trajectories.iter().try_for_each(|t| writer.append(t))
                });
                if let Err(e) = write_result {
                    entry.status = CaseStatus::Failed;
                    entry.error = Some(format!("trace write failed: {e}"));
                    continue;
                }
                // A case whose every trajectory died on a backend error
                // marks the backend unreachable; any success clears it.
                let all_backend = !case.failures.is_empty()
                    && case
                        .failures
                        .iter()
                        .all(|f| f.as_ref().is_some_and(|f| f.code == "backend"));
                *state.backend_unreachable_until.lock().expect("health lock") =
                    all_backend.then(|| Instant::now() + BACKEND_COOLDOWN);
                entry.status = CaseStatus::Done;
                entry.result = Some(case);
            }
            Err(e) => {
                entry.status = CaseStatus::Failed;
                entry.error = Some(e.to_string());
            }
        }
    }
}

/// Serve on an already-bound listener until the process exits.
pub fn serve_on(
    listener: std::net::TcpListener,
    registry: Registry,
    backend: Arc<dyn Backend>,
    agents: AgentMap,
    case_cfg: CaseConfig,
    out_dir: PathBuf,
    queue_capacity: usize,
    workers: usize,
) -> Result<()> {
    std::fs::create_dir_all(out_dir.join("traces"))?;
    let (queue, jobs) = mpsc::sync_channel(queue_capacity);
    let state = Arc::new(ServeState {
        registry: Arc::new(registry),
        backend,
        agents: Arc::new(agents),
        case_cfg,
        out_dir,
        cases: Mutex::new(HashMap::new()),
        queue,
        backend_unreachable_until: Mutex::new(None),
    });
    let jobs = Arc::new(Mutex::new(jobs));
    for _ in 0..workers.max(1) {
        let state = Arc::clone(&state);
        let jobs = Arc::clone(&jobs);
        std::thread::spawn(move || worker_loop(state, jobs));
    }

    let app = Router::new()
        .route("/cases", post(create_case))
        .route("/cases/{id}", get(get_case))
        .route("/traces/{id}", get(get_trace))
        .route("/tools", get(get_tools))
        .route("/healthz", get(healthz))
        .with_state(state);

    listener.set_nonblocking(true)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        axum::serve(listener, app).await?;
        Ok(())
    })
}
