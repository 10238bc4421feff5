//! Text2SQL: natural-language requests against a read-only SQLite database.
//!
//! Pipeline: introspect the schema, prompt the backend for a single SELECT
//! statement, run a verification pass (the backend critiques the candidate
//! against the schema and the repaired statement replaces it), apply the
//! static read-only guard, execute, and render the rows as a compact text
//! table. Execution errors are fed back to the backend for up to two
//! repair rounds.
//!
//! The guard rejects every statement whose first keyword after comments
//! and whitespace is not SELECT, and any multi-statement payload. It is
//! deliberately independent of the database driver: the connection is
//! opened read-only as well, so both layers must fail for a write to
//! reach the file.

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use orchestra_core::backend::{Backend, BackendError, GenerationRequest, Message};
use orchestra_core::engine::{ToolAgent, ToolError};
use rusqlite::{Connection, OpenFlags};
use thiserror::Error;

use crate::strip_markdown_fences;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSchema {
    pub name: String,
    pub declared_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForeignKey {
    pub from_column: String,
    pub ref_table: String,
    pub ref_column: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<ColumnSchema>,
    pub foreign_keys: Vec<ForeignKey>,
}

/// Introspected database layout, rendered into prompts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaDescription {
    pub tables: Vec<TableSchema>,
}

impl fmt::Display for SchemaDescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for table in &self.tables {
            let columns: Vec<String> = table
                .columns
                .iter()
                .map(|c| format!("{} {}", c.name, c.declared_type))
                .collect();
            writeln!(f, "table {} ({})", table.name, columns.join(", "))?;
            for fk in &table.foreign_keys {
                writeln!(
                    f,
                    "  fk {}.{} -> {}.{}",
                    table.name, fk.from_column, fk.ref_table, fk.ref_column
                )?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum Text2SqlError {
    #[error("statement rejected by the read-only guard: {reason}")]
    NonSelectRejected { reason: String },
    #[error("execution failed after {attempts} attempt(s): {last_error}")]
    ExecutionFailed { attempts: usize, last_error: String },
    #[error("schema unavailable: {0}")]
    SchemaUnavailable(String),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
}

/// Collect table, column, and foreign-key information.
pub fn introspect(conn: &Connection) -> Result<SchemaDescription, rusqlite::Error> {
    let mut tables = Vec::new();
    let mut names_stmt = conn.prepare(
        "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY name",
    )?;
    let names: Vec<String> = names_stmt
        .query_map([], |row| row.get::<_, String>(0))?
        .collect::<Result<_, _>>()?;
    for name in names {
        let mut columns = Vec::new();
        let mut info = conn.prepare(&format!("PRAGMA table_info({})", quote_identifier(&name)))?;
        let mut rows = info.query([])?;
        while let Some(row) = rows.next()? {
            columns.push(ColumnSchema {
                name: row.get::<_, String>(1)?,
                declared_type: row.get::<_, String>(2)?,
            });
        }
        let mut foreign_keys = Vec::new();
        let mut fk = conn.prepare(&format!("PRAGMA foreign_key_list({})", quote_identifier(&name)))?;
        let mut rows = fk.query([])?;
        while let Some(row) = rows.next()? {
            foreign_keys.push(ForeignKey {
                ref_table: row.get::<_, String>(2)?,
                from_column: row.get::<_, String>(3)?,
                ref_column: row.get::<_, Option<String>>(4)?.unwrap_or_else(|| "rowid".into()),
            });
        }
        tables.push(TableSchema { name, columns, foreign_keys });
    }
    Ok(SchemaDescription { tables })
}

fn quote_identifier(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

/// Skip whitespace and SQL comments from the front of `sql`.
fn skip_trivia(sql: &str) -> &str {
    let mut rest = sql;
    loop {
        let trimmed = rest.trim_start();
        if let Some(after) = trimmed.strip_prefix("--") {
            rest = after.split_once('\n').map(|(_, r)| r).unwrap_or("");
        } else if let Some(after) = trimmed.strip_prefix("/*") {
            rest = after.split_once("*/").map(|(_, r)| r).unwrap_or("");
        } else {
            return trimmed;
        }
    }
}

/// Reject everything that is not a single SELECT statement.
pub fn read_only_guard(sql: &str) -> Result<(), Text2SqlError> {
    let body = skip_trivia(sql);
    let keyword: String = body.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
    if !keyword.eq_ignore_ascii_case("select") {
        return Err(Text2SqlError::NonSelectRejected {
            reason: if keyword.is_empty() {
                "statement has no leading keyword".to_string()
            } else {
                format!("first keyword is {keyword:?}, not SELECT")
            },
        });
    }
    // Multi-statement payloads are rejected: scan for a semicolon outside
    // strings, quoted identifiers, and comments, then require only trivia
    // after it.
    let mut chars = body.char_indices().peekable();
    #[derive(PartialEq)]
    enum State {
        Normal,
        Single,
        Double,
        Backtick,
        Bracket,
        LineComment,
        BlockComment,
    }
    let mut state = State::Normal;
    while let Some((i, c)) = chars.next() {
        state = match (state, c) {
            (State::Normal, '\'') => State::Single,
            (State::Normal, '"') => State::Double,
            (State::Normal, '`') => State::Backtick,
            (State::Normal, '[') => State::Bracket,
            (State::Normal, '-') if matches!(chars.peek(), Some((_, '-'))) => State::LineComment,
            (State::Normal, '/') if matches!(chars.peek(), Some((_, '*'))) => State::BlockComment,
            (State::Normal, ';') => {
                let rest = skip_trivia(&body[i + 1..]);
                if rest.is_empty() {
                    return Ok(());
                }
                return Err(Text2SqlError::NonSelectRejected {
                    reason: "multiple statements".to_string(),
                });
            }
            (State::Normal, _) => State::Normal,
            (State::Single, '\'') => State::Normal,
            (State::Double, '"') => State::Normal,
            (State::Backtick, '`') => State::Normal,
            (State::Bracket, ']') => State::Normal,
            (State::LineComment, '\n') => State::Normal,
            (State::BlockComment, '*') if matches!(chars.peek(), Some((_, '/'))) => {
                chars.next();
                State::Normal
            }
            (s, _) => s,
        };
    }
    Ok(())
}

fn render_value(value: rusqlite::types::ValueRef<'_>) -> String {
    use rusqlite::types::ValueRef;
    match value {
        ValueRef::Null => "NULL".to_string(),
        ValueRef::Integer(i) => i.to_string(),
        ValueRef::Real(r) => r.to_string(),
        ValueRef::Text(t) => String::from_utf8_lossy(t).into_owned(),
        ValueRef::Blob(b) => format!("<blob {} bytes>", b.len()),
    }
}

/// Execute a guarded SELECT and render the rows. A single-cell result
/// renders as the bare value; anything larger gets a header row and a row
/// count, capped at `row_cap` rows.
fn execute(conn: &Connection, sql: &str, row_cap: usize) -> Result<String, String> {
    let mut stmt = conn.prepare(sql).map_err(|e| e.to_string())?;
    let column_names: Vec<String> = stmt.column_names().iter().map(|s| s.to_string()).collect();
    let mut rows = stmt.query([]).map_err(|e| e.to_string())?;
    let mut rendered: Vec<Vec<String>> = Vec::new();
    let mut total = 0usize;
    while let Some(row) = rows.next().map_err(|e| e.to_string())? {
        total += 1;
        if rendered.len() < row_cap {
            let cells: Vec<String> = (0..column_names.len())
                .map(|i| render_value(row.get_ref(i).expect("column in range")))
                .collect();
            rendered.push(cells);
        }
    }
    if total == 1 && column_names.len() == 1 {
        return Ok(rendered[0][0].clone());
    }
    let mut out = column_names.join(" | ");
    out.push('\n');
    for cells in &rendered {
        out.push_str(&cells.join(" | "));
        out.push('\n');
    }
    if total > row_cap {
        out.push_str(&format!("({total} rows total, showing first {row_cap})"));
    } else {
        out.push_str(&format!("({total} row(s))"));
    }
    Ok(out)
}

pub const GEN_SYSTEM_PROMPT: &str = "You translate natural-language requests about a relational \
database into SQL. Reply with exactly one SQLite SELECT statement and nothing else: no prose, \
no code fences.";

pub const VERIFY_SYSTEM_PROMPT: &str = "You review a candidate SQL statement against a schema. \
If the statement is valid SQLite and answers the request, repeat it exactly. Otherwise reply \
with a corrected SELECT statement. Reply with SQL only.";

pub const REPAIR_SYSTEM_PROMPT: &str = "You repair SQL statements that failed to execute. Reply \
with a corrected SQLite SELECT statement only.";

pub fn gen_prompt(schema: &str, request: &str) -> String {
    format!("Schema:\n{schema}\nRequest: {request}")
}

pub fn verify_prompt(schema: &str, request: &str, sql: &str) -> String {
    format!("Schema:\n{schema}\nRequest: {request}\n\nCandidate SQL:\n{sql}")
}

pub fn repair_prompt(schema: &str, request: &str, sql: &str, error: &str) -> String {
    format!("Schema:\n{schema}\nRequest: {request}\n\nFailed SQL:\n{sql}\n\nDatabase error: {error}")
}

/// Result of one Text2SQL run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SqlAnswer {
    pub text: String,
    pub sql: String,
    /// Repair rounds consumed after the first execution attempt.
    pub retry_count: usize,
}

/// The Text2SQL tool agent. Opens a fresh read-only connection per call,
/// so concurrent trajectories never share statement state.
pub struct Text2SqlAgent {
    db_path: PathBuf,
    backend: Arc<dyn Backend>,
    row_cap: usize,
    repair_rounds: usize,
}

impl Text2SqlAgent {
    pub fn new(db_path: impl Into<PathBuf>, backend: Arc<dyn Backend>) -> Self {
        Self {
            db_path: db_path.into(),
            backend,
            row_cap: 50,
            repair_rounds: 2,
        }
    }

    pub fn with_row_cap(mut self, cap: usize) -> Self {
        self.row_cap = cap;
        self
    }

    fn ask(&self, system: &str, user: String) -> Result<String, Text2SqlError> {
        let request = GenerationRequest {
            messages: vec![Message::system(system), Message::user(user)],
            temperature: 0.0,
            seed: None,
            stop_sequences: vec![],
            max_tokens: 512,
        };
        let result = self.backend.generate(&request)?;
        Ok(strip_markdown_fences(&result.text).trim().to_string())
    }

    pub fn answer(&self, request: &str) -> Result<String, Text2SqlError> {
        self.answer_detailed(request).map(|a| a.text)
    }

    pub fn answer_detailed(&self, request: &str) -> Result<SqlAnswer, Text2SqlError> {
        let conn = Connection::open_with_flags(
            &self.db_path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )
        .map_err(|e| Text2SqlError::SchemaUnavailable(e.to_string()))?;
        let schema = introspect(&conn)
            .map_err(|e| Text2SqlError::SchemaUnavailable(e.to_string()))?
            .to_string();

        let candidate = self.ask(GEN_SYSTEM_PROMPT, gen_prompt(&schema, request))?;
        let mut sql = self.ask(VERIFY_SYSTEM_PROMPT, verify_prompt(&schema, request, &candidate))?;

        let mut retry_count = 0;
        loop {
            read_only_guard(&sql)?;
            match execute(&conn, &sql, self.row_cap) {
                Ok(text) => return Ok(SqlAnswer { text, sql, retry_count }),
                Err(error) if retry_count < self.repair_rounds => {
                    retry_count += 1;
                    sql = self.ask(REPAIR_SYSTEM_PROMPT, repair_prompt(&schema, request, &sql, &error))?;
                }
                Err(error) => {
                    return Err(Text2SqlError::ExecutionFailed {
                        attempts: retry_count + 1,
                        last_error: error,
                    })
                }
            }
        }
    }
}

impl ToolAgent for Text2SqlAgent {
    fn invoke(&self, payload: &str) -> Result<String, ToolError> {
        self.answer(payload).map_err(|e| ToolError(e.to_string()))
    }
}
