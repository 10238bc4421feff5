//! Scanner and renderer for the tool-call marker grammar.
//!
//! Generated text signals tool invocation with delimiter blocks:
//!
//! ```text
//! <|begin_sql_query|>
//! SELECT COUNT(*) FROM patients
//! <|end_sql_query|>
//! ```
//!
//! The engine pauses generation at these blocks, executes the named tool,
//! and splices the output back into the conversation as a result block
//! (`<|begin_sql_result|> ... <|end_sql_result|>`). Final answers arrive in
//! `<|begin_answer|> ... <|end_answer|>`.
//!
//! The marker byte sequences are a wire contract shared with prompt
//! templates and the scripted test backend; [`render_query`] and
//! [`render_result`] are the single source of those bytes. [`scan`]
//! operates on accumulated segment text, never on raw token streams, and
//! must stay total over arbitrary input.

use thiserror::Error;

/// Opens the final-answer block.
pub const BEGIN_ANSWER: &str = "<|begin_answer|>";
/// Closes the final-answer block.
pub const END_ANSWER: &str = "<|end_answer|>";

/// Default cap on the payload of a single marker block (64 KiB).
pub const DEFAULT_MAX_PAYLOAD: usize = 64 * 1024;

/// Tool names are lowercase snake case: `[a-z0-9_]+`.
pub fn valid_tool_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

/// `<|begin_{tool}_query|>`
pub fn begin_query_marker(tool: &str) -> String {
    format!("<|begin_{tool}_query|>")
}

/// `<|end_{tool}_query|>`
pub fn end_query_marker(tool: &str) -> String {
    format!("<|end_{tool}_query|>")
}

/// `<|begin_{tool}_result|>`
pub fn begin_result_marker(tool: &str) -> String {
    format!("<|begin_{tool}_result|>")
}

/// `<|end_{tool}_result|>`
pub fn end_result_marker(tool: &str) -> String {
    format!("<|end_{tool}_result|>")
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("bad tool name {0:?}: must match [a-z0-9_]+")]
    BadToolName(String),
}

/// Render a canonical query block: begin marker, newline, payload, newline,
/// end marker. These are the exact bytes the engine appends to the
/// conversation when it canonicalizes a model-emitted query.
pub fn render_query(tool: &str, payload: &str) -> Result<String, RenderError> {
    if !valid_tool_name(tool) {
        return Err(RenderError::BadToolName(tool.to_string()));
    }
    Ok(format!(
        "{}\n{}\n{}",
        begin_query_marker(tool),
        payload,
        end_query_marker(tool)
    ))
}

/// Render a result block with the same shape as [`render_query`].
pub fn render_result(tool: &str, payload: &str) -> Result<String, RenderError> {
    if !valid_tool_name(tool) {
        return Err(RenderError::BadToolName(tool.to_string()));
    }
    Ok(format!(
        "{}\n{}\n{}",
        begin_result_marker(tool),
        payload,
        end_result_marker(tool)
    ))
}

/// Limits applied while scanning.
#[derive(Debug, Clone, Copy)]
pub struct ScanLimits {
    /// Maximum byte length of a block payload.
    pub max_payload: usize,
}

impl Default for ScanLimits {
    fn default() -> Self {
        Self {
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }
}

/// Outcome of scanning a generation segment.
///
/// `consumed` counts bytes of the buffer up to and including the end marker
/// of the returned block; the caller discards anything after it. Payloads
/// and answer text are trimmed of leading/trailing whitespace, interior
/// bytes preserved exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseEvent {
    /// No markers anywhere in the buffer.
    Prose(String),
    /// Earliest complete tool-query block.
    ToolQuery {
        tool: String,
        payload: String,
        consumed: usize,
    },
    /// Earliest complete answer block.
    AnswerBlock { text: String, consumed: usize },
    /// A begin marker is open with no matching end marker yet.
    Incomplete,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScanError {
    #[error("begin marker at byte {offset} inside an open block")]
    NestedMarker { offset: usize },
    #[error("end marker at byte {offset} with no matching open begin")]
    MismatchedEnd { offset: usize },
    #[error("block payload of {size} bytes exceeds the {max}-byte cap")]
    OversizePayload { size: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Marker<'a> {
    BeginQuery(&'a str),
    EndQuery(&'a str),
    BeginAnswer,
    EndAnswer,
}

/// Try to parse a marker starting at `pos` (which must point at `<|`).
/// Returns the marker and the byte offset just past it.
fn marker_at(buf: &str, pos: usize) -> Option<(Marker<'_>, usize)> {
    let rest = &buf[pos..];
    let (is_begin, body) = if let Some(b) = rest.strip_prefix("<|begin_") {
        (true, b)
    } else if let Some(b) = rest.strip_prefix("<|end_") {
        (false, b)
    } else {
        return None;
    };
    let name_len = body
        .bytes()
        .take_while(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || *b == b'_')
        .count();
    if name_len == 0 || !body[name_len..].starts_with("|>") {
        return None;
    }
    let name = &body[..name_len];
    let end = pos + (rest.len() - body.len()) + name_len + 2;
    let marker = if name == "answer" {
        if is_begin {
            Marker::BeginAnswer
        } else {
            Marker::EndAnswer
        }
    } else if let Some(stem) = name.strip_suffix("_query") {
        if stem.is_empty() {
            return None;
        }
        if is_begin {
            Marker::BeginQuery(stem)
        } else {
            Marker::EndQuery(stem)
        }
    } else {
        // Result markers and anything else are not scanned for; the model
        // never legitimately emits them, and treating them as prose keeps
        // the scanner total.
        return None;
    };
    Some((marker, end))
}

/// Which block, if any, is open (unterminated) at the end of the buffer.
///
/// `None` when the buffer is well formed prose or erroneous; used by the
/// engine to close blocks whose end marker was swallowed by a provider-side
/// stop sequence.
pub fn open_block(buffer: &str) -> Option<OpenBlock> {
    match scan(buffer) {
        Ok(ParseEvent::Incomplete) => {}
        _ => return None,
    }
    let mut i = 0;
    let mut open = None;
    while let Some(rel) = buffer[i..].find("<|") {
        let pos = i + rel;
        match marker_at(buffer, pos) {
            None => i = pos + 2,
            Some((m, end)) => {
                match m {
                    Marker::BeginQuery(tool) => {
                        open = Some(OpenBlock::Query {
                            tool: tool.to_string(),
                        })
                    }
                    Marker::BeginAnswer => open = Some(OpenBlock::Answer),
                    _ => {}
                }
                i = end;
            }
        }
    }
    open
}

/// An unterminated block at the tail of a buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpenBlock {
    Query { tool: String },
    Answer,
}

impl OpenBlock {
    /// The end marker that would close this block.
    pub fn closing_marker(&self) -> String {
        match self {
            OpenBlock::Query { tool } => end_query_marker(tool),
            OpenBlock::Answer => END_ANSWER.to_string(),
        }
    }
}

/// Scan with default limits. See [`scan_with`].
pub fn scan(buffer: &str) -> Result<ParseEvent, ScanError> {
    scan_with(buffer, &ScanLimits::default())
}

/// Scan a generation segment for the earliest complete tool-query or answer
/// block.
///
/// Blocks may not nest: a begin marker inside an open block is
/// [`ScanError::NestedMarker`], an end marker with no open begin is
/// [`ScanError::MismatchedEnd`]. Marker collision inside payloads is a parse
/// error by design, not an escape mechanism.
pub fn scan_with(buffer: &str, limits: &ScanLimits) -> Result<ParseEvent, ScanError> {
    enum Open<'a> {
        Query { tool: &'a str, payload_start: usize },
        Answer { payload_start: usize },
    }

    let mut i = 0;
    let mut open: Option<Open<'_>> = None;
    while let Some(rel) = buffer[i..].find("<|") {
        let pos = i + rel;
        let Some((marker, end)) = marker_at(buffer, pos) else {
            i = pos + 2;
            continue;
        };
        match (&open, marker) {
            (None, Marker::BeginQuery(tool)) => {
                open = Some(Open::Query {
                    tool,
                    payload_start: end,
                });
            }
            (None, Marker::BeginAnswer) => {
                open = Some(Open::Answer { payload_start: end });
            }
            (None, Marker::EndQuery(_)) | (None, Marker::EndAnswer) => {
                return Err(ScanError::MismatchedEnd { offset: pos });
            }
            (Some(_), Marker::BeginQuery(_)) | (Some(_), Marker::BeginAnswer) => {
                return Err(ScanError::NestedMarker { offset: pos });
            }
            (Some(Open::Query { tool, payload_start }), Marker::EndQuery(closing)) => {
                if *tool != closing {
                    return Err(ScanError::MismatchedEnd { offset: pos });
                }
                let payload = &buffer[*payload_start..pos];
                check_payload(payload, limits)?;
                return Ok(ParseEvent::ToolQuery {
                    tool: tool.to_string(),
                    payload: payload.trim().to_string(),
                    consumed: end,
                });
            }
            (Some(Open::Answer { payload_start }), Marker::EndAnswer) => {
                let payload = &buffer[*payload_start..pos];
                check_payload(payload, limits)?;
                return Ok(ParseEvent::AnswerBlock {
                    text: payload.trim().to_string(),
                    consumed: end,
                });
            }
            (Some(Open::Query { .. }), Marker::EndAnswer)
            | (Some(Open::Answer { .. }), Marker::EndQuery(_)) => {
                return Err(ScanError::MismatchedEnd { offset: pos });
            }
        }
        i = end;
    }
    match open {
        Some(Open::Query { payload_start, .. }) | Some(Open::Answer { payload_start }) => {
            check_payload(&buffer[payload_start..], limits)?;
            Ok(ParseEvent::Incomplete)
        }
        None => Ok(ParseEvent::Prose(buffer.to_string())),
    }
}

fn check_payload(payload: &str, limits: &ScanLimits) -> Result<(), ScanError> {
    if payload.len() > limits.max_payload {
        return Err(ScanError::OversizePayload {
            size: payload.len(),
            max: limits.max_payload,
        });
    }
    Ok(())
}
