//! Fixture-backed tool servers.
//!
//! A corpus file describes one server with one tool: its schema, how call
//! arguments select rows, the processing pipeline and the rows themselves.
//!
//! ```json
//! {
//!   "server": "gwas_associations",
//!   "version": "1.0.0",
//!   "tool": {"name": "gwas_associations", "description": "…",
//!            "parameters": [{"name": "gene", "type": "string", "required": true}]},
//!   "select": [{"field": "gene", "param": "gene"}],
//!   "pipeline": [{"step": "dedupe", "key": ["variant", "phenotype", "study"]}],
//!   "companions": {},
//!   "rows": [{"gene": "TP53", "variant": "rs78378222", …}]
//! }
//! ```
//!
//! [`FixtureServer::handle`] answers JSON-RPC frames, so the same server runs
//! in-process, over stdio or over HTTP.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::prelude::*;
use crate::rpc::{self, error_frame, response_frame};
use crate::tools::{
    field, parse_steps, run_pipeline_steps, validate_arguments, with_defaults, PipelineStep, ToolSchema,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectOp {
    #[default]
    Eq,
    Contains,
}

/// Keeps rows whose `field` matches argument `param`; skipped when the
/// argument is absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selector {
    pub field: String,
    pub param: String,
    #[serde(default)]
    pub op: SelectOp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureCorpus {
    pub server: String,
    pub version: String,
    pub tool: ToolSchema,
    #[serde(default)]
    pub select: Vec<Selector>,
    #[serde(default)]
    pub pipeline: Vec<Value>,
    #[serde(default)]
    pub companions: BTreeMap<String, Vec<Value>>,
    pub rows: Vec<Value>,
}

impl FixtureCorpus {
    pub fn parse(text: &str) -> Result<FixtureCorpus> {
        let corpus: FixtureCorpus =
            serde_json::from_str(text).map_err(|e| Error::config(format!("fixture corpus: {e}")))?;
        parse_steps(&corpus.pipeline)?;
        Ok(corpus)
    }

    /// Rows selected by `arguments`, before the pipeline runs.
    pub fn select(&self, arguments: &Map<String, Value>) -> Vec<Value> {
        self.rows
            .iter()
            .filter(|row| {
                self.select.iter().all(|s| {
                    let Some(arg) = arguments.get(&s.param).and_then(Value::as_str) else { return true };
                    let arg = arg.to_lowercase();
                    match (field(row, &s.field), s.op) {
                        (Some(Value::String(v)), SelectOp::Eq) => v.to_lowercase() == arg,
                        (Some(Value::String(v)), SelectOp::Contains) => v.to_lowercase().contains(&arg),
                        (Some(Value::Array(items)), _) => {
                            items.iter().any(|i| i.as_str().is_some_and(|t| t.to_lowercase() == arg))
                        }
                        _ => false,
                    }
                })
            })
            .cloned()
            .collect()
    }
}

pub struct FixtureServer {
    corpus: FixtureCorpus,
    steps: Vec<PipelineStep>,
}

impl FixtureServer {
    pub fn new(corpus: FixtureCorpus) -> Result<Self> {
        let steps = parse_steps(&corpus.pipeline)?;
        Ok(FixtureServer { corpus, steps })
    }

    pub fn corpus(&self) -> &FixtureCorpus {
        &self.corpus
    }

    /// Runs the tool directly: selection, then the pipeline.
    pub fn call(&self, arguments: &Value) -> Result<(Vec<Value>, crate::tools::Diagnostics)> {
        validate_arguments(&self.corpus.tool, arguments)?;
        let params = with_defaults(&self.corpus.tool, arguments);
        let rows = self.corpus.select(&params);
        run_pipeline_steps(rows, &self.steps, &params, &self.corpus.companions)
    }

    /// Answers one JSON-RPC frame; `None` for notifications.
    pub fn handle(&mut self, frame: &str) -> Option<String> {
        let Ok(msg) = serde_json::from_str::<Value>(frame) else {
            return Some(error_frame(&Value::Null, rpc::PARSE_ERROR, "parse error"));
        };
        let id = msg.get("id").cloned();
        let method = msg.get("method").and_then(Value::as_str);
        let (Some(id), Some(method)) = (id, method) else {
            return match msg.get("id") {
                Some(id) => Some(error_frame(id, rpc::INVALID_REQUEST, "invalid request")),
                None => None,
            };
        };
        let params = msg.get("params").cloned().unwrap_or(Value::Null);
        Some(match method {
            "initialize" => response_frame(
                &id,
                json!({
                    "protocolVersion": rpc::PROTOCOL_VERSION,
                    "capabilities": {"tools": {"listChanged": false}},
                    "serverInfo": {"name": self.corpus.server, "version": self.corpus.version},
                }),
            ),
            "ping" => response_frame(&id, json!({})),
            "tools/list" => response_frame(&id, json!({"tools": [self.corpus.tool.to_mcp()]})),
            "tools/call" => {
                let name = params.get("name").and_then(Value::as_str).unwrap_or("");
                if name != self.corpus.tool.name {
                    return Some(error_frame(&id, rpc::INVALID_PARAMS, &format!("unknown tool '{name}'")));
                }
                let arguments = params.get("arguments").cloned().unwrap_or_else(|| json!({}));
                match self.call(&arguments) {
                    Ok((records, diagnostics)) => {
                        let structured = json!({"records": records, "diagnostics": diagnostics});
                        response_frame(
                            &id,
                            json!({
                                "content": [{"type": "text", "text": structured.to_string()}],
                                "structuredContent": structured,
                                "isError": false,
                            }),
                        )
                    }
                    Err(e) => error_frame(&id, rpc::INVALID_PARAMS, &e.message),
                }
            }
            other => error_frame(&id, rpc::METHOD_NOT_FOUND, &format!("method '{other}' not found")),
        })
    }
}
