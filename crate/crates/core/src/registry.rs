//! Tool registry: structured descriptors rendered into the reasoning
//! model's context.
//!
//! The registry is loaded from a JSON document, validated once, and
//! immutable afterwards. [`Registry::render_context_for`] produces the full
//! system context the engine submits: base preamble, optional strategy
//! preamble, one section per tool (in declaration order, or reordered by a
//! strategy's tool-priority hint), and the answer instructions. Adding a
//! tool is a configuration change only.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::marker;
use crate::trace::StrategyDescriptor;

/// Longest allowed tool name, chosen so every end-of-query marker fits the
/// 64-byte stop-sequence budget.
pub const MAX_TOOL_NAME_LEN: usize =
    crate::backend::MAX_STOP_SEQUENCE_BYTES - "<|end_".len() - "_query|>".len();

/// An example (query, result) pair shown in the rendered context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UsageExample {
    pub query: String,
    pub result: String,
}

/// Raw descriptor as it appears in the config document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolDescriptor {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub input_spec: String,
    #[serde(default)]
    pub output_spec: String,
    #[serde(default)]
    pub usage_examples: Vec<UsageExample>,
    pub kind: ToolKindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolKindTag {
    Builtin,
    External,
}

/// Validated binding of a tool to its executor.
#[derive(Debug, Clone, PartialEq)]
pub enum ToolKind {
    Builtin { agent_id: String },
    External { endpoint: Url, timeout_ms: u64 },
}

/// Default timeout for external tools when the config omits one.
pub const DEFAULT_EXTERNAL_TIMEOUT_MS: u64 = 10_000;

/// Registry config document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryConfig {
    pub system_preamble: String,
    pub answer_instructions: String,
    #[serde(default)]
    pub tools: Vec<ToolDescriptor>,
    /// Must be set to register an intentionally tool-less registry.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub allow_empty: bool,
    #[serde(default, skip_serializing_if = "is_default_verbosity")]
    pub render_verbosity: RenderVerbosity,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderVerbosity {
    /// Tool sections include usage examples.
    #[default]
    Full,
    /// Tool sections omit usage examples.
    Summary,
}

fn is_default_verbosity(v: &RenderVerbosity) -> bool {
    *v == RenderVerbosity::Full
}

#[derive(Debug, Error, PartialEq)]
pub enum RegistryError {
    #[error("duplicate tool name or alias {0:?}")]
    DuplicateName(String),
    #[error("tool {tool}: bad endpoint {endpoint:?}: {detail}")]
    BadEndpoint {
        tool: String,
        endpoint: String,
        detail: String,
    },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("unknown tool {0:?}")]
    UnknownTool(String),
}

/// A validated tool entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Tool {
    pub name: String,
    pub description: String,
    pub input_spec: String,
    pub output_spec: String,
    pub usage_examples: Vec<UsageExample>,
    pub kind: ToolKind,
    pub aliases: Vec<String>,
}

/// Immutable, validated tool registry.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    system_preamble: String,
    answer_instructions: String,
    verbosity: RenderVerbosity,
    tools: Vec<Tool>,
    by_name: BTreeMap<String, usize>,
    by_alias: BTreeMap<String, usize>,
}

impl Registry {
    /// Parse and validate a JSON config document.
    pub fn load(document: &str) -> Result<Self, RegistryError> {
        let config: RegistryConfig = serde_json::from_str(document)
            .map_err(|e| RegistryError::SchemaViolation(e.to_string()))?;
        Self::from_config(config)
    }

    pub fn from_config(config: RegistryConfig) -> Result<Self, RegistryError> {
        if config.tools.is_empty() && !config.allow_empty {
            return Err(RegistryError::SchemaViolation(
                "registry declares no tools; set allow_empty to make that explicit".into(),
            ));
        }
        let mut tools = Vec::with_capacity(config.tools.len());
        let mut by_name = BTreeMap::new();
        let mut by_alias = BTreeMap::new();
        for (idx, descriptor) in config.tools.into_iter().enumerate() {
            if !marker::valid_tool_name(&descriptor.name) {
                return Err(RegistryError::SchemaViolation(format!(
                    "tool name {:?} must match [a-z0-9_]+",
                    descriptor.name
                )));
            }
            if descriptor.name.len() > MAX_TOOL_NAME_LEN {
                return Err(RegistryError::SchemaViolation(format!(
                    "tool name {:?} exceeds {MAX_TOOL_NAME_LEN} bytes",
                    descriptor.name
                )));
            }
            let kind = match descriptor.kind {
                ToolKindTag::Builtin => {
                    let agent_id = descriptor.agent_id.clone().ok_or_else(|| {
                        RegistryError::SchemaViolation(format!(
                            "builtin tool {:?} needs agent_id",
                            descriptor.name
                        ))
                    })?;
                    ToolKind::Builtin { agent_id }
                }
                ToolKindTag::External => {
                    let raw = descriptor.endpoint.clone().ok_or_else(|| {
                        RegistryError::SchemaViolation(format!(
                            "external tool {:?} needs endpoint",
                            descriptor.name
                        ))
                    })?;
                    let endpoint = Url::parse(&raw).map_err(|e| RegistryError::BadEndpoint {
                        tool: descriptor.name.clone(),
                        endpoint: raw.clone(),
                        detail: e.to_string(),
                    })?;
                    if !matches!(endpoint.scheme(), "http" | "https") {
                        return Err(RegistryError::BadEndpoint {
                            tool: descriptor.name.clone(),
                            endpoint: raw,
                            detail: "endpoint must be an absolute http(s) URL".into(),
                        });
                    }
                    ToolKind::External {
                        endpoint,
                        timeout_ms: descriptor.timeout_ms.unwrap_or(DEFAULT_EXTERNAL_TIMEOUT_MS),
                    }
                }
            };
            if by_name.insert(descriptor.name.clone(), idx).is_some() {
                return Err(RegistryError::DuplicateName(descriptor.name));
            }
            for alias in &descriptor.aliases {
                if by_name.contains_key(alias) || by_alias.insert(alias.clone(), idx).is_some() {
                    return Err(RegistryError::DuplicateName(alias.clone()));
                }
            }
            tools.push(Tool {
                name: descriptor.name,
                description: descriptor.description,
                input_spec: descriptor.input_spec,
                output_spec: descriptor.output_spec,
                usage_examples: descriptor.usage_examples,
                kind,
                aliases: descriptor.aliases,
            });
        }
        // A name may not shadow a previously registered alias either.
        for name in by_name.keys() {
            if by_alias.contains_key(name) {
                return Err(RegistryError::DuplicateName(name.clone()));
            }
        }
        Ok(Self {
            system_preamble: config.system_preamble,
            answer_instructions: config.answer_instructions,
            verbosity: config.render_verbosity,
            tools,
            by_name,
            by_alias,
        })
    }

    pub fn tools(&self) -> &[Tool] {
        &self.tools
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    /// Resolve a canonical name or legacy alias token.
    pub fn lookup(&self, name_or_alias: &str) -> Result<&Tool, RegistryError> {
        self.by_name
            .get(name_or_alias)
            .or_else(|| self.by_alias.get(name_or_alias))
            .map(|&idx| &self.tools[idx])
            .ok_or_else(|| RegistryError::UnknownTool(name_or_alias.to_string()))
    }

    /// Map a legacy bracket token (`[SQL_QUERY]`) onto its canonical tool
    /// name; `None` when no alias is configured.
    pub fn alias_map(&self, legacy_token: &str) -> Option<&str> {
        self.by_alias
            .get(legacy_token)
            .map(|&idx| self.tools[idx].name.as_str())
    }

    /// Stop sequences that pause generation at the end of any tool query or
    /// the final answer.
    pub fn stop_sequences(&self) -> Vec<String> {
        let mut stops: Vec<String> = self
            .tools
            .iter()
            .map(|t| marker::end_query_marker(&t.name))
            .collect();
        stops.push(marker::END_ANSWER.to_string());
        stops
    }

    /// Render the base context with no strategy applied.
    pub fn render_context(&self) -> String {
        self.render_context_for(None)
    }

    /// Render the full system context. The strategy preamble is inserted
    /// after the system preamble and before the tool sections; the tool
    /// priority hint moves the named tools to the front, hint order first,
    /// remaining tools in declaration order.
    pub fn render_context_for(&self, strategy: Option<&StrategyDescriptor>) -> String {
        let mut out = String::new();
        out.push_str(self.system_preamble.trim_end());
        out.push('\n');
        if let Some(strategy) = strategy {
            if !strategy.preamble.trim().is_empty() {
                out.push('\n');
                out.push_str(strategy.preamble.trim_end());
                out.push('\n');
            }
        }
        let order = self.section_order(strategy.and_then(|s| s.tool_priority_hint.as_deref()));
        for &idx in &order {
            let tool = &self.tools[idx];
            let _ = write!(out, "\n{}", self.render_tool_section(tool));
        }
        out.push('\n');
        out.push_str(self.answer_instructions.trim_end());
        let _ = write!(
            out,
            "\nWhen you have reached a conclusion, emit it as:\n{}\n{{final answer}}\n{}\n",
            marker::BEGIN_ANSWER,
            marker::END_ANSWER
        );
        out
    }

    fn section_order(&self, hint: Option<&[String]>) -> Vec<usize> {
        let mut order: Vec<usize> = Vec::with_capacity(self.tools.len());
        if let Some(hint) = hint {
            for name in hint {
                if let Some(&idx) = self.by_name.get(name) {
                    if !order.contains(&idx) {
                        order.push(idx);
                    }
                }
            }
        }
        for idx in 0..self.tools.len() {
            if !order.contains(&idx) {
                order.push(idx);
            }
        }
        order
    }

    fn render_tool_section(&self, tool: &Tool) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "## Tool: {}", tool.name);
        let _ = writeln!(out, "{}", tool.description.trim_end());
        let _ = writeln!(out, "Input: {}", tool.input_spec);
        let _ = writeln!(out, "Output: {}", tool.output_spec);
        match &tool.kind {
            ToolKind::Builtin { agent_id } => {
                let _ = writeln!(out, "Backed by: builtin agent `{agent_id}`");
            }
            ToolKind::External { endpoint, timeout_ms } => {
                let _ = writeln!(out, "Backed by: external service {endpoint} (timeout {timeout_ms} ms)");
            }
        }
        if !tool.aliases.is_empty() {
            let _ = writeln!(out, "Legacy tokens: {}", tool.aliases.join(", "));
        }
        let _ = writeln!(out, "Invoke it by emitting exactly:");
        let _ = writeln!(out, "{}", marker::begin_query_marker(&tool.name));
        let _ = writeln!(out, "{{your {} query}}", tool.name);
        let _ = writeln!(out, "{}", marker::end_query_marker(&tool.name));
        let _ = writeln!(out, "The system replies with:");
        let _ = writeln!(out, "{}", marker::begin_result_marker(&tool.name));
        let _ = writeln!(out, "{{result}}");
        let _ = writeln!(out, "{}", marker::end_result_marker(&tool.name));
        if self.verbosity == RenderVerbosity::Full {
            for (i, example) in tool.usage_examples.iter().enumerate() {
                let _ = writeln!(out, "Example {}:", i + 1);
                let _ = writeln!(out, "  query: {}", example.query);
                let _ = writeln!(out, "  result: {}", example.result);
            }
        }
        out
    }
}
