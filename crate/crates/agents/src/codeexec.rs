//! Sandboxed execution of model-drafted code.
//!
//! The snippet (Markdown fences stripped) is written to `temp.py` inside a
//! fresh temporary working directory and run under the configured
//! interpreter in its own process group with CPU and address-space
//! rlimits, a cleared environment, and a wall-clock timeout. On completion
//! the whole process group is killed, so nothing the snippet spawned
//! survives, and the working directory is deleted. Both streams are
//! captured and truncated to a fixed cap.
//!
//! Isolation is process-level: rlimits, group kill, an isolated cwd, and a
//! best-effort user/network namespace detach where the kernel allows it.
//! Global sandbox concurrency is bounded by a counting semaphore.

use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use orchestra_core::engine::{ToolAgent, ToolError};
use thiserror::Error;

use crate::strip_markdown_fences;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecLimits {
    /// CPU-time rlimit, seconds.
    pub cpu_seconds: u64,
    /// Wall-clock timeout.
    pub wall: Duration,
    /// Address-space rlimit, bytes.
    pub memory_bytes: u64,
    /// Per-stream capture cap, bytes.
    pub stream_cap: usize,
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self {
            cpu_seconds: 10,
            wall: Duration::from_secs(10),
            memory_bytes: 512 * 1024 * 1024,
            stream_cap: 8 * 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecOutcome {
    pub stdout: String,
    pub stderr: String,
    pub exit_code: i32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodeExecError {
    #[error("time limit exceeded")]
    TimeLimit { stdout: String, stderr: String },
    #[error("memory limit exceeded")]
    MemoryLimit { stdout: String, stderr: String },
    #[error("exit status {code:?}")]
    NonZeroExit {
        code: Option<i32>,
        stdout: String,
        stderr: String,
    },
    #[error("sandbox setup failed: {0}")]
    Setup(String),
}

/// Counting semaphore bounding concurrent sandboxes.
struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().expect("semaphore lock");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("semaphore wait");
        }
        *permits -= 1;
        SemaphoreGuard { semaphore: self }
    }
}

struct SemaphoreGuard<'a> {
    semaphore: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.semaphore.permits.lock().expect("semaphore lock") += 1;
        self.semaphore.available.notify_one();
    }
}

/// The coding tool agent. Language-agnostic plumbing around a subprocess:
/// whatever interpreter is configured runs the snippet.
pub struct CodeExecAgent {
    interpreter: String,
    limits: ExecLimits,
    workdir_parent: Option<PathBuf>,
    sandboxes: Semaphore,
}

impl CodeExecAgent {
    pub fn new(interpreter: impl Into<String>, limits: ExecLimits) -> Self {
        Self {
            interpreter: interpreter.into(),
            limits,
            workdir_parent: None,
            sandboxes: Semaphore::new(4),
        }
    }

    /// Parent directory for sandbox working directories (tests inspect it).
    pub fn with_workdir_parent(mut self, parent: impl Into<PathBuf>) -> Self {
        self.workdir_parent = Some(parent.into());
        self
    }

    pub fn with_max_concurrent(mut self, permits: usize) -> Self {
        self.sandboxes = Semaphore::new(permits.max(1));
        self
    }

    /// Execute a snippet and return its streams and exit status.
    pub fn run(&self, code: &str) -> Result<ExecOutcome, CodeExecError> {
        let _permit = self.sandboxes.acquire();
        let workdir = match &self.workdir_parent {
            Some(parent) => tempfile::Builder::new().prefix("codeexec").tempdir_in(parent),
            None => tempfile::Builder::new().prefix("codeexec").tempdir(),
        }
        .map_err(|e| CodeExecError::Setup(e.to_string()))?;
        let script = workdir.path().join("temp.py");
        std::fs::write(&script, strip_markdown_fences(code))
            .map_err(|e| CodeExecError::Setup(e.to_string()))?;

        let cpu = self.limits.cpu_seconds;
        let memory = self.limits.memory_bytes;
        let mut command = Command::new(&self.interpreter);
        command
            .arg("temp.py")
            .current_dir(workdir.path())
            .env_clear()
            .env("PATH", "/usr/local/bin:/usr/bin:/bin")
            .env("TMPDIR", workdir.path())
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        unsafe {
            command.pre_exec(move || {
                // Own process group so the whole tree can be killed.
                libc::setpgid(0, 0);
                let cpu_limit = libc::rlimit {
                    rlim_cur: cpu,
                    rlim_max: cpu + 1,
                };
                libc::setrlimit(libc::RLIMIT_CPU, &cpu_limit);
                let mem_limit = libc::rlimit {
                    rlim_cur: memory,
                    rlim_max: memory,
                };
                libc::setrlimit(libc::RLIMIT_AS, &mem_limit);
                // Detach from the network where the kernel allows
                // unprivileged namespaces; ignored otherwise.
                libc::unshare(libc::CLONE_NEWUSER | libc::CLONE_NEWNET);
                Ok(())
            });
        }
        let mut child = command.spawn().map_err(|e| CodeExecError::Setup(e.to_string()))?;
        let pid = child.id() as i32;
        let cap = self.limits.stream_cap;
        let stdout_handle = child.stdout.take().expect("piped stdout");
        let stderr_handle = child.stderr.take().expect("piped stderr");
        let stdout_reader = std::thread::spawn(move || drain_capped(stdout_handle, cap));
        let stderr_reader = std::thread::spawn(move || drain_capped(stderr_handle, cap));

        let started = Instant::now();
        let mut timed_out = false;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) => {
                    if started.elapsed() > self.limits.wall {
                        timed_out = true;
                        unsafe { libc::kill(-pid, libc::SIGKILL) };
                        break child.wait().map_err(|e| CodeExecError::Setup(e.to_string()))?;
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => return Err(CodeExecError::Setup(e.to_string())),
            }
        };
        // Nothing the snippet spawned survives the run.
        unsafe { libc::kill(-pid, libc::SIGKILL) };
        let stdout = stdout_reader.join().expect("stdout reader");
        let stderr = stderr_reader.join().expect("stderr reader");
        drop(workdir); // the working directory is deleted here

        if timed_out {
            return Err(CodeExecError::TimeLimit { stdout, stderr });
        }
        match status.code() {
            Some(0) => Ok(ExecOutcome { stdout, stderr, exit_code: 0 }),
            Some(code) => Err(CodeExecError::NonZeroExit {
                code: Some(code),
                stdout,
                stderr,
            }),
            None => match status.signal() {
                Some(libc::SIGXCPU) => Err(CodeExecError::TimeLimit { stdout, stderr }),
                Some(libc::SIGKILL) => Err(CodeExecError::MemoryLimit { stdout, stderr }),
                _ => Err(CodeExecError::NonZeroExit {
                    code: None,
                    stdout,
                    stderr,
                }),
            },
        }
    }
}

/// Read a stream to its end, keeping at most `cap` bytes and noting
/// truncation. Draining past the cap keeps the child from blocking on a
/// full pipe.
fn drain_capped(mut stream: impl Read, cap: usize) -> String {
    let mut kept = Vec::with_capacity(cap.min(64 * 1024));
    let mut buf = [0u8; 8192];
    let mut total = 0usize;
    while let Ok(n) = stream.read(&mut buf) {
        if n == 0 {
            break;
        }
        total += n;
        if kept.len() < cap {
            let take = (cap - kept.len()).min(n);
            kept.extend_from_slice(&buf[..take]);
        }
    }
    let mut text = String::from_utf8_lossy(&kept).into_owned();
    if total > cap {
        text.push_str(&format!("\n[truncated: {total} bytes total, kept {cap}]"));
    }
    text
}

impl ToolAgent for CodeExecAgent {
    fn invoke(&self, payload: &str) -> Result<String, ToolError> {
        match self.run(payload) {
            Ok(outcome) => Ok(render_outcome(0, &outcome.stdout, &outcome.stderr)),
            // A snippet that ran but exited nonzero is information for the
            // model, not a tool failure.
            Err(CodeExecError::NonZeroExit { code, stdout, stderr }) => {
                Ok(render_outcome(code.unwrap_or(-1), &stdout, &stderr))
            }
            Err(err) => Err(ToolError(err.to_string())),
        }
    }
}

fn render_outcome(exit_code: i32, stdout: &str, stderr: &str) -> String {
    let mut out = format!("exit status: {exit_code}\n");
    out.push_str("--- stdout ---\n");
    out.push_str(stdout);
    if !stderr.is_empty() {
        out.push_str("\n--- stderr ---\n");
        out.push_str(stderr);
    }
    out
}
