//! Live model backend for OpenAI-compatible chat-completion endpoints with
//! function calling.
//!
//! Environment: `TSA_LLM_ENDPOINT` (full URL of the chat-completions
//! route), `TSA_LLM_API_KEY`, `TSA_LLM_MODEL`.

use std::time::Duration;

use serde_json::{json, Value};
use tsa_core::backend::{Message, ModelBackend, ModelRequest, ModelTurn};
use tsa_core::{Error, ErrorCode, Result};

pub struct LiveBackend {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    agent: ureq::Agent,
}

fn unavailable(message: impl Into<String>) -> Error {
    Error::new(ErrorCode::BackendUnavailable, message)
}

impl LiveBackend {
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var("TSA_LLM_ENDPOINT")
            .map_err(|_| Error::config("live backend needs TSA_LLM_ENDPOINT (and usually TSA_LLM_API_KEY, TSA_LLM_MODEL)"))?;
        let model = std::env::var("TSA_LLM_MODEL").unwrap_or_else(|_| "default".into());
        Ok(Self::new(endpoint, std::env::var("TSA_LLM_API_KEY").ok(), model))
    }

    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .http_status_as_error(false)
            .build()
            .into();
        LiveBackend { endpoint: endpoint.into(), api_key, model: model.into(), agent }
    }
}

/// The chat-completions body for `request`. Tool calls get ids `call_<n>`
/// by position so the following tool message can refer to them.
pub fn chat_body(model: &str, request: &ModelRequest) -> Value {
    let mut messages = vec![json!({"role": "system", "content": request.prompt})];
    let mut calls = 0usize;
    for m in &request.conversation {
        match m {
            Message::Assistant { turn: ModelTurn::ToolCall { tool_name, arguments } } => {
                calls += 1;
                messages.push(json!({
                    "role": "assistant",
                    "content": null,
                    "tool_calls": [{
                        "id": format!("call_{calls}"),
                        "type": "function",
                        "function": {"name": tool_name, "arguments": arguments.to_string()},
                    }],
                }));
            }
            Message::Assistant { turn: ModelTurn::FinalText { text } } => {
                messages.push(json!({"role": "assistant", "content": text}));
            }
            Message::Tool { content, .. } => {
                messages.push(json!({"role": "tool", "tool_call_id": format!("call_{calls}"), "content": content}));
            }
            Message::User { content } => messages.push(json!({"role": "user", "content": content})),
        }
    }
    let tools: Vec<Value> = request
        .tool_schemas
        .iter()
        .map(|t| {
            let mcp = t.to_mcp();
            json!({"type": "function", "function": {
                "name": t.name, "description": t.description, "parameters": mcp["inputSchema"]}})
        })
        .collect();
    let mut body = json!({"model": model, "messages": messages, "temperature": 0});
    if !tools.is_empty() {
        body["tools"] = Value::Array(tools);
    }
    body
}

/// The first tool call of the reply, else its text.
pub fn parse_reply(reply: &Value) -> Result<ModelTurn> {
    let message = reply
        .pointer("/choices/0/message")
        .ok_or_else(|| unavailable("reply has no choices[0].message"))?;
    if let Some(call) = message.get("tool_calls").and_then(Value::as_array).and_then(|c| c.first()) {
        let name = call
            .pointer("/function/name")
            .and_then(Value::as_str)
            .ok_or_else(|| unavailable("tool call without a function name"))?;
        let arguments = match call.pointer("/function/arguments") {
            Some(Value::String(s)) if s.trim().is_empty() => json!({}),
            Some(Value::String(s)) => {
                serde_json::from_str(s).map_err(|e| unavailable(format!("tool call arguments are not JSON: {e}")))?
            }
            Some(v @ Value::Object(_)) => v.clone(),
            _ => json!({}),
        };
        return Ok(ModelTurn::ToolCall { tool_name: name.to_owned(), arguments });
    }
    match message.get("content").and_then(Value::as_str) {
        Some(text) => Ok(ModelTurn::FinalText { text: text.to_owned() }),
        None => Err(unavailable("reply has neither tool calls nor text")),
    }
}

impl ModelBackend for LiveBackend {
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelTurn> {
        request.check_budget()?;
        request.validate()?;
        let body = chat_body(&self.model, request);
        let mut req = self.agent.post(&self.endpoint).header("content-type", "application/json");
        if let Some(k) = &self.api_key {
            req = req.header("authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send(body.to_string()).map_err(|e| unavailable(format!("POST {}: {e}", self.endpoint)))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| unavailable(format!("reading reply: {e}")))?;
        if status != 200 {
            return Err(unavailable(format!("model endpoint answered HTTP {status}: {}", text.chars().take(200).collect::<String>())));
        }
        let reply: Value = serde_json::from_str(&text).map_err(|e| unavailable(format!("reply is not JSON: {e}")))?;
        parse_reply(&reply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tsa_core::tools::{ParamSpec, ParamType, ToolSchema};

    #[test]
    fn request_mapping() {
        let mut req = ModelRequest::new("write the section");
        req.tool_schemas = vec![ToolSchema {
            name: "pubmed_search".into(),
            description: "search".into(),
            parameters: vec![ParamSpec {
                name: "query".into(),
                ty: ParamType::String,
                required: true,
                description: String::new(),
                default: None,
            }],
            domain_tags: vec![],
        }];
        req.conversation = vec![
            Message::Assistant {
                turn: ModelTurn::ToolCall { tool_name: "pubmed_search".into(), arguments: json!({"query": "TP53"}) },
            },
            Message::Tool { tool_name: "pubmed_search".into(), content: "{}".into() },
        ];
        let body = chat_body("m", &req);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["tool_calls"][0]["id"], "call_1");
        assert_eq!(body["messages"][1]["tool_calls"][0]["function"]["arguments"], "{\"query\":\"TP53\"}");
        assert_eq!(body["messages"][2]["tool_call_id"], "call_1");
        assert_eq!(body["tools"][0]["function"]["parameters"]["required"][0], "query");
    }

    #[test]
    fn reply_mapping() {
        let call = json!({"choices": [{"message": {"tool_calls": [{"function": {"name": "x", "arguments": "{\"a\":1}"}}]}}]});
        assert_eq!(parse_reply(&call).unwrap(), ModelTurn::ToolCall { tool_name: "x".into(), arguments: json!({"a": 1}) });
        let text = json!({"choices": [{"message": {"content": "done"}}]});
        assert_eq!(parse_reply(&text).unwrap(), ModelTurn::FinalText { text: "done".into() });
        for bad in [json!({}), json!({"choices": [{"message": {}}]})] {
            assert_eq!(parse_reply(&bad).unwrap_err().code, ErrorCode::BackendUnavailable);
        }
    }
}
