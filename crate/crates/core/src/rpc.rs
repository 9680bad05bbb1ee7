//! JSON-RPC 2.0 client for MCP-style tool servers.
//!
//! The client speaks `initialize`, `notifications/initialized`, `tools/list`
//! and `tools/call` over any [`ToolTransport`]. Every response is checked
//! structurally; anything malformed becomes `tool-unavailable`.

use serde_json::{json, Value};

use crate::error::{Error, ErrorCode, Result};
use crate::prelude::*;
use crate::tools::{Diagnostics, ToolSchema};

pub const PROTOCOL_VERSION: &str = "2025-06-18";

pub const PARSE_ERROR: i64 = -32700;
pub const INVALID_REQUEST: i64 = -32600;
pub const METHOD_NOT_FOUND: i64 = -32601;
pub const INVALID_PARAMS: i64 = -32602;
pub const INTERNAL_ERROR: i64 = -32603;

/// Carries one JSON-RPC frame at a time.
pub trait ToolTransport: Send {
    /// Sends a request frame and returns the matching response frame.
    fn request(&mut self, frame: &str) -> Result<String>;
    /// Sends a notification; no response is expected.
    fn notify(&mut self, frame: &str) -> Result<()>;
}

impl<T: ToolTransport + ?Sized> ToolTransport for Box<T> {
    fn request(&mut self, frame: &str) -> Result<String> {
        (**self).request(frame)
    }

    fn notify(&mut self, frame: &str) -> Result<()> {
        (**self).notify(frame)
    }
}

/// In-process transport: frames go straight to a handler function.
pub struct Loopback<H>(pub H);

impl<H> ToolTransport for Loopback<H>
where
    H: FnMut(&str) -> Option<String> + Send,
{
    fn request(&mut self, frame: &str) -> Result<String> {
        (self.0)(frame).ok_or_else(|| Error::tool_unavailable("server sent no response"))
    }

    fn notify(&mut self, frame: &str) -> Result<()> {
        (self.0)(frame);
        Ok(())
    }
}

pub fn request_frame(id: u64, method: &str, params: Value) -> String {
    json!({"jsonrpc": "2.0", "id": id, "method": method, "params": params}).to_string()
}

pub fn response_frame(id: &Value, result: Value) -> String {
    json!({"jsonrpc": "2.0", "id": id, "result": result}).to_string()
}

pub fn error_frame(id: &Value, code: i64, message: &str) -> String {
    json!({"jsonrpc": "2.0", "id": id, "error": {"code": code, "message": message}}).to_string()
}

/// Validates a response frame for request `id` and returns its result.
pub fn parse_response(frame: &str, id: u64) -> Result<Value> {
    let bad = |what: &str| Error::tool_unavailable(format!("malformed response: {what}"));
    let value: Value = serde_json::from_str(frame).map_err(|_| bad("not JSON"))?;
    let obj = value.as_object().ok_or_else(|| bad("not an object"))?;
    if obj.get("jsonrpc").and_then(Value::as_str) != Some("2.0") {
        return Err(bad("jsonrpc version"));
    }
    if obj.get("id").and_then(Value::as_u64) != Some(id) {
        return Err(bad("id mismatch"));
    }
    match (obj.get("result"), obj.get("error")) {
        (Some(result), None) => Ok(result.clone()),
        (None, Some(err)) => {
            let code = err.get("code").and_then(Value::as_i64).ok_or_else(|| bad("error code"))?;
            let message = err.get("message").and_then(Value::as_str).ok_or_else(|| bad("error message"))?;
            let mapped = match code {
                INVALID_PARAMS => ErrorCode::InvalidArguments,
                METHOD_NOT_FOUND => ErrorCode::ToolNotFound,
                _ => ErrorCode::ToolUnavailable,
            };
            Err(Error::new(mapped, format!("server error {code}: {message}")))
        }
        _ => Err(bad("exactly one of result and error is required")),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallOutput {
    pub records: Vec<Value>,
    pub diagnostics: Diagnostics,
}

/// Extracts records and diagnostics from a `tools/call` result.
pub fn parse_call_result(result: &Value) -> Result<CallOutput> {
    let bad = |what: &str| Error::tool_unavailable(format!("malformed tool result: {what}"));
    let obj = result.as_object().ok_or_else(|| bad("not an object"))?;
    let content_text = || -> Option<String> {
        obj.get("content")?.as_array()?.iter().find_map(|c| {
            (c.get("type")?.as_str()? == "text").then(|| c.get("text")?.as_str().map(str::to_owned)).flatten()
        })
    };
    match obj.get("isError") {
        None | Some(Value::Bool(false)) => {}
        Some(Value::Bool(true)) => {
            return Err(Error::tool_unavailable(format!(
                "tool reported an error: {}",
                content_text().unwrap_or_default()
            )))
        }
        Some(_) => return Err(bad("isError")),
    }
    let structured = match obj.get("structuredContent") {
        Some(v) => v.clone(),
        None => {
            let text = content_text().ok_or_else(|| bad("no structured or text content"))?;
            serde_json::from_str(&text).map_err(|_| bad("text content is not JSON"))?
        }
    };
    let records = match structured.get("records") {
        Some(Value::Array(items)) if items.iter().all(Value::is_object) => items.clone(),
        _ => return Err(bad("records")),
    };
    let diagnostics = match structured.get("diagnostics") {
        None => Diagnostics { input: records.len(), output: records.len(), ..Diagnostics::default() },
        Some(d) => serde_json::from_value(d.clone()).map_err(|_| bad("diagnostics"))?,
    };
    if diagnostics.output != records.len() || !diagnostics.is_consistent() {
        return Err(bad("diagnostics do not match records"));
    }
    Ok(CallOutput { records, diagnostics })
}

pub struct McpClient<T> {
    transport: T,
    next_id: u64,
    server_info: Option<Value>,
}

impl<T: ToolTransport> McpClient<T> {
    pub fn new(transport: T) -> Self {
        McpClient { transport, next_id: 1, server_info: None }
    }

    pub fn server_info(&self) -> Option<&Value> {
        self.server_info.as_ref()
    }

    fn call(&mut self, method: &str, params: Value) -> Result<Value> {
        let id = self.next_id;
        self.next_id += 1;
        let reply = self
            .transport
            .request(&request_frame(id, method, params))
            .map_err(|e| if e.code == ErrorCode::ToolUnavailable { e } else { Error::tool_unavailable(e.to_string()) })?;
        parse_response(&reply, id)
    }

    pub fn initialize(&mut self) -> Result<Value> {
        let result = self.call(
            "initialize",
            json!({
                "protocolVersion": PROTOCOL_VERSION,
                "capabilities": {},
                "clientInfo": {"name": "tsa", "version": env!("CARGO_PKG_VERSION")},
            }),
        )?;
        let ok = result.get("protocolVersion").and_then(Value::as_str).is_some()
            && result.get("serverInfo").and_then(Value::as_object).is_some();
        if !ok {
            return Err(Error::tool_unavailable("malformed initialize result"));
        }
        self.transport
            .notify(&json!({"jsonrpc": "2.0", "method": "notifications/initialized"}).to_string())
            .map_err(|e| Error::tool_unavailable(e.to_string()))?;
        self.server_info = result.get("serverInfo").cloned();
        Ok(result)
    }

    pub fn list_tools(&mut self) -> Result<Vec<ToolSchema>> {
        let result = self.call("tools/list", json!({}))?;
        let tools = result
            .get("tools")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::tool_unavailable("malformed tools/list result"))?;
        tools.iter().map(ToolSchema::from_mcp).collect()
    }

    pub fn call_tool(&mut self, name: &str, arguments: &Value) -> Result<CallOutput> {
        let result = self.call("tools/call", json!({"name": name, "arguments": arguments}))?;
        parse_call_result(&result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_validation() {
        assert_eq!(parse_response(r#"{"jsonrpc":"2.0","id":1,"result":{"a":1}}"#, 1).unwrap(), json!({"a": 1}));
        for bad in [
            "",
            "[]",
            r#"{"jsonrpc":"1.0","id":1,"result":{}}"#,
            r#"{"jsonrpc":"2.0","id":2,"result":{}}"#,
            r#"{"jsonrpc":"2.0","id":1}"#,
            r#"{"jsonrpc":"2.0","id":1,"result":{},"error":{"code":1,"message":"x"}}"#,
            r#"{"jsonrpc":"2.0","id":1,"error":{"code":"x"}}"#,
        ] {
            assert_eq!(parse_response(bad, 1).unwrap_err().code, ErrorCode::ToolUnavailable, "{bad}");
        }
        let e = parse_response(r#"{"jsonrpc":"2.0","id":1,"error":{"code":-32602,"message":"bad"}}"#, 1).unwrap_err();
        assert_eq!(e.code, ErrorCode::InvalidArguments);
    }

    #[test]
    fn call_result_validation() {
        let ok = json!({"content": [], "structuredContent": {"records": [{"a": 1}], "diagnostics": {"input": 2, "output": 1, "filtered": 1, "deduplicated": 0, "cross_referenced": 0, "aggregated": 0, "steps": []}}, "isError": false});
        assert_eq!(parse_call_result(&ok).unwrap().records.len(), 1);
        let text_only = json!({"content": [{"type": "text", "text": "{\"records\": []}"}]});
        assert!(parse_call_result(&text_only).unwrap().records.is_empty());
        for bad in [
            json!({"isError": true, "content": [{"type": "text", "text": "boom"}]}),
            json!({"structuredContent": {"records": [1]}}),
            json!({"structuredContent": {"records": [{}], "diagnostics": {"input": 5, "output": 1, "filtered": 0, "deduplicated": 0, "cross_referenced": 0, "aggregated": 0, "steps": []}}}),
            json!("x"),
        ] {
            assert_eq!(parse_call_result(&bad).unwrap_err().code, ErrorCode::ToolUnavailable);
        }
    }
}
