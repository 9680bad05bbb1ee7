//! JSON-RPC transports to tool servers, and the fixture servers behind them.
//!
//! Stdio frames are single lines. Over HTTP every frame is one POST whose
//! body is the request and whose response body is the reply; notifications
//! are answered with 202 and no body.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use tsa_core::fixture::{FixtureCorpus, FixtureServer};
use tsa_core::rpc::ToolTransport;
use tsa_core::{Error, Result};

/// Line-delimited frames over a writer/reader pair, usually a child's stdio.
pub struct StdioTransport<W, R> {
    writer: W,
    reader: R,
    child: Option<Child>,
}

impl<W: Write + Send, R: BufRead + Send> StdioTransport<W, R> {
    pub fn new(writer: W, reader: R) -> Self {
        StdioTransport { writer, reader, child: None }
    }

    fn send(&mut self, frame: &str) -> Result<()> {
        if frame.contains('\n') {
            return Err(Error::invalid_argument("stdio frames must be single lines"));
        }
        let mut line = String::with_capacity(frame.len() + 1);
        line.push_str(frame);
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::tool_unavailable(format!("write to server: {e}")))
    }
}

impl StdioTransport<ChildStdin, BufReader<ChildStdout>> {
    /// Starts `command` and talks to it over its stdin/stdout.
    pub fn spawn(command: &[String]) -> Result<Self> {
        let (program, args) =
            command.split_first().ok_or_else(|| Error::config("stdio server has an empty command"))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::tool_unavailable(format!("cannot start '{program}': {e}")))?;
        let stdin = child.stdin.take().ok_or_else(|| Error::tool_unavailable("child has no stdin"))?;
        let stdout = child.stdout.take().ok_or_else(|| Error::tool_unavailable("child has no stdout"))?;
        Ok(StdioTransport { writer: stdin, reader: BufReader::new(stdout), child: Some(child) })
    }
}

impl<W: Write + Send, R: BufRead + Send> ToolTransport for StdioTransport<W, R> {
    fn request(&mut self, frame: &str) -> Result<String> {
        self.send(frame)?;
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Ok(0) => Err(Error::tool_unavailable("server closed its output")),
            Ok(_) => Ok(line.trim_end_matches(['\r', '\n']).to_owned()),
            Err(e) => Err(Error::tool_unavailable(format!("read from server: {e}"))),
        }
    }

    fn notify(&mut self, frame: &str) -> Result<()> {
        self.send(frame)
    }
}

impl<W, R> Drop for StdioTransport<W, R> {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// One POST per frame.
pub struct HttpTransport {
    url: String,
    agent: ureq::Agent,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport { url: url.into(), agent, token: std::env::var("TSA_TOOL_TOKEN").ok() }
    }

    fn post(&mut self, frame: &str) -> Result<(u16, String)> {
        let mut req = self.agent.post(&self.url).header("content-type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send(frame).map_err(|e| Error::tool_unavailable(format!("POST {}: {e}", self.url)))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::tool_unavailable(format!("reading reply from {}: {e}", self.url)))?;
        Ok((status, body))
    }
}

impl ToolTransport for HttpTransport {
    fn request(&mut self, frame: &str) -> Result<String> {
        match self.post(frame)? {
            (200, body) => Ok(body),
            (status, _) => Err(Error::tool_unavailable(format!("{} answered HTTP {status}", self.url))),
        }
    }

    fn notify(&mut self, frame: &str) -> Result<()> {
        match self.post(frame)? {
            (200..=299, _) => Ok(()),
            (status, _) => Err(Error::tool_unavailable(format!("{} answered HTTP {status}", self.url))),
        }
    }
}

pub fn load_corpus(path: &Path) -> Result<FixtureServer> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    FixtureServer::new(FixtureCorpus::parse(&text)?)
}

/// Serves one fixture over line-delimited stdio until the input closes.
pub fn serve_stdio(mut server: FixtureServer, input: impl BufRead, mut output: impl Write) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(reply) = server.handle(&line) {
            output.write_all(reply.as_bytes())?;
            output.write_all(b"\n")?;
            output.flush()?;
        }
    }
    Ok(())
}

type Servers = Arc<BTreeMap<String, Mutex<FixtureServer>>>;

async fn handle_frame(State(servers): State<Servers>, UrlPath(name): UrlPath<String>, body: String) -> Response {
    let Some(server) = servers.get(&name) else {
        return (StatusCode::NOT_FOUND, format!("no server '{name}'")).into_response();
    };
    let reply = server.lock().unwrap_or_else(|p| p.into_inner()).handle(&body);
    match reply {
        Some(r) => ([("content-type", "application/json")], r).into_response(),
        None => StatusCode::ACCEPTED.into_response(),
    }
}

/// Fixture servers over HTTP, one per path segment: `POST /<server>`.
pub fn fixture_router(servers: BTreeMap<String, FixtureServer>) -> Router {
    let servers: Servers = Arc::new(servers.into_iter().map(|(k, v)| (k, Mutex::new(v))).collect());
    Router::new().route("/{server}", post(handle_frame)).with_state(servers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;
    use tsa_core::rpc::McpClient;

    fn corpus() -> FixtureServer {
        load_corpus(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/servers/uniprot_entry.json")).unwrap()
    }

    #[test]
    fn stdio_server_answers_line_by_line() {
        let input = "{\"jsonrpc\":\"2.0\",\"id\":1,\"method\":\"initialize\",\"params\":{}}\n\n\
                     {\"jsonrpc\":\"2.0\",\"method\":\"notifications/initialized\"}\n\
                     {\"jsonrpc\":\"2.0\",\"id\":2,\"method\":\"tools/list\"}\n";
        let mut out = Vec::new();
        serve_stdio(corpus(), Cursor::new(input), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].contains("uniprot_entry"));
    }

    #[test]
    fn client_over_in_memory_stdio() {
        // Pre-computed replies stand in for the child's output.
        let mut server = corpus();
        let frames = [
            tsa_core::rpc::request_frame(1, "initialize", serde_json::json!({})),
            tsa_core::rpc::request_frame(2, "tools/list", serde_json::json!({})),
        ];
        let replies: String = frames.iter().map(|f| server.handle(f).unwrap() + "\n").collect();
        let transport = StdioTransport::new(Vec::new(), Cursor::new(replies));
        let mut client = McpClient::new(transport);
        client.initialize().unwrap();
        assert_eq!(client.list_tools().unwrap()[0].name, "uniprot_entry");
        let e = client.list_tools().unwrap_err();
        assert_eq!(e.code, tsa_core::ErrorCode::ToolUnavailable);
    }

    #[test]
    fn multi_line_frames_are_refused() {
        let mut t = StdioTransport::new(Vec::new(), Cursor::new(String::new()));
        assert!(t.request("{\n}").is_err());
    }
}
