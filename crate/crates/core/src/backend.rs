//! Model backend contract and the record/replay machinery.
//!
//! A cassette maps a request fingerprint to the turns recorded for it. The
//! fingerprint hashes the normalized prompt, the sorted tool names and the
//! turn index (the number of assistant turns already in the conversation), so
//! the same conversation replays turn by turn. Replaying an unknown
//! fingerprint fails with `cassette-miss`; nothing is improvised.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, ErrorCode, Result};
use crate::prelude::*;
use crate::tools::ToolSchema;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelTurn {
    ToolCall { tool_name: String, arguments: Value },
    FinalText { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum Message {
    Assistant { turn: ModelTurn },
    Tool { tool_name: String, content: String },
    User { content: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub max_turns: u32,
    pub max_tool_calls: u32,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { max_turns: 12, max_tool_calls: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub prompt: String,
    pub tool_schemas: Vec<ToolSchema>,
    pub conversation: Vec<Message>,
    /// Remaining allowance for this request's conversation.
    pub budget: Budget,
}

impl ModelRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        ModelRequest { prompt: prompt.into(), tool_schemas: Vec::new(), conversation: Vec::new(), budget: Budget::default() }
    }

    pub fn turn_index(&self) -> usize {
        self.conversation.iter().filter(|m| matches!(m, Message::Assistant { .. })).count()
    }

    pub fn tool_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.tool_schemas.iter().map(|t| t.name.clone()).collect();
        names.sort();
        names
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.prompt, &self.tool_names(), self.turn_index())
    }

    pub fn check_budget(&self) -> Result<()> {
        if self.budget.max_turns == 0 {
            return Err(Error::new(ErrorCode::BudgetExceeded, "turn budget exhausted"));
        }
        Ok(())
    }

    /// Tool names must be unique.
    pub fn validate(&self) -> Result<()> {
        let names = self.tool_names();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid_argument("duplicate tool schema name in request"));
        }
        Ok(())
    }
}

pub trait ModelBackend: Send {
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelTurn>;
}

impl<B: ModelBackend + ?Sized> ModelBackend for Box<B> {
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelTurn> {
        (**self).complete(request)
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for &mut B {
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelTurn> {
        (**self).complete(request)
    }
}

/// A backend driven by a closure; used for scripted authors and tests.
pub struct FnBackend<F>(pub F);

impl<F> ModelBackend for FnBackend<F>
where
    F: FnMut(&ModelRequest) -> Result<ModelTurn> + Send,
{
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelTurn> {
        request.check_budget()?;
        (self.0)(request)
    }
}

fn is_digits(bytes: &[u8], from: usize, n: usize) -> bool {
    from + n <= bytes.len() && bytes[from..from + n].iter().all(u8::is_ascii_digit)
}

/// Length of an ISO-8601 timestamp starting at `i`, if one does.
fn timestamp_len(bytes: &[u8], i: usize) -> Option<usize> {
    let shape = is_digits(bytes, i, 4)
        && bytes.get(i + 4) == Some(&b'-')
        && is_digits(bytes, i + 5, 2)
        && bytes.get(i + 7) == Some(&b'-')
        && is_digits(bytes, i + 8, 2)
        && matches!(bytes.get(i + 10), Some(b'T') | Some(b' '))
        && is_digits(bytes, i + 11, 2)
        && bytes.get(i + 13) == Some(&b':')
        && is_digits(bytes, i + 14, 2)
        && bytes.get(i + 16) == Some(&b':')
        && is_digits(bytes, i + 17, 2);
    if !shape {
        return None;
    }
    let mut end = i + 19;
    if bytes.get(end) == Some(&b'.') {
        let digits = bytes[end + 1..].iter().take_while(|b| b.is_ascii_digit()).count();
        if digits > 0 {
            end += 1 + digits;
        }
    }
    match bytes.get(end) {
        Some(b'Z') => end += 1,
        Some(b'+') | Some(b'-') if is_digits(bytes, end + 1, 2) && bytes.get(end + 3) == Some(&b':') && is_digits(bytes, end + 4, 2) => {
            end += 6
        }
        _ => {}
    }
    Some(end - i)
}

/// Collapses whitespace runs and replaces ISO timestamps with `<ts>`.
pub fn normalize_prompt(prompt: &str) -> String {
    let bytes = prompt.as_bytes();
    let mut replaced = String::with_capacity(prompt.len());
    let mut i = 0;
    let mut last = 0;
    while i < bytes.len() {
        let boundary = i == 0 || !bytes[i - 1].is_ascii_digit();
        if boundary && bytes[i].is_ascii_digit() {
            if let Some(n) = timestamp_len(bytes, i) {
                replaced.push_str(&prompt[last..i]);
                replaced.push_str("<ts>");
                i += n;
                last = i;
                continue;
            }
        }
        i += 1;
    }
    replaced.push_str(&prompt[last..]);
    replaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn fingerprint(prompt: &str, sorted_tool_names: &[String], turn_index: usize) -> String {
    let mut h = Sha256::new();
    h.update(normalize_prompt(prompt).as_bytes());
    h.update([0x1f]);
    h.update(sorted_tool_names.join(",").as_bytes());
    h.update([0x1f]);
    h.update(turn_index.to_string().as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub fingerprint: String,
    pub turn_index: usize,
    /// Normalized prompt, kept for human inspection.
    pub prompt: String,
    pub tools: Vec<String>,
    pub turns: Vec<ModelTurn>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Cassette {
    pub entries: BTreeMap<String, CassetteEntry>,
}

impl Cassette {
    pub fn record(&mut self, request: &ModelRequest, turn: ModelTurn) {
        let fp = request.fingerprint();
        self.entries
            .entry(fp.clone())
            .or_insert_with(|| CassetteEntry {
                fingerprint: fp,
                turn_index: request.turn_index(),
                prompt: normalize_prompt(&request.prompt),
                tools: request.tool_names(),
                turns: Vec::new(),
            })
            .turns
            .push(turn);
    }

    pub fn turn_count(&self) -> usize {
        self.entries.values().map(|e| e.turns.len()).sum()
    }

    /// JSON lines, one entry per fingerprint, in fingerprint order.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for entry in self.entries.values() {
            out.push_str(&serde_json::to_string(entry)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Cassette> {
        let mut cassette = Cassette::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry = serde_json::from_str(line)
                .map_err(|e| Error::new(ErrorCode::ParseError, format!("cassette line {}: {e}", i + 1)))?;
            if let Some(existing) = cassette.entries.get_mut(&entry.fingerprint) {
                existing.turns.extend(entry.turns);
            } else {
                cassette.entries.insert(entry.fingerprint.clone(), entry);
            }
        }
        Ok(cassette)
    }
}

/// Serves recorded turns; each fingerprint's turns are consumed in order.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    cassette: Cassette,
    cursors: BTreeMap<String, usize>,
}

impl ReplayBackend {
    pub fn new(cassette: Cassette) -> Self {
        ReplayBackend { cassette, cursors: BTreeMap::new() }
    }
}

impl ModelBackend for ReplayBackend {
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelTurn> {
        request.check_budget()?;
        let fp = request.fingerprint();
        let entry = self.cassette.entries.get(&fp).ok_or_else(|| {
            Error::new(ErrorCode::CassetteMiss, format!("no recording for fingerprint {fp} (turn {})", request.turn_index()))
        })?;
        let cursor = self.cursors.entry(fp.clone()).or_insert(0);
        let turn = entry.turns.get(*cursor).cloned().ok_or_else(|| {
            Error::new(ErrorCode::CassetteMiss, format!("recording for fingerprint {fp} is exhausted"))
        })?;
        *cursor += 1;
        Ok(turn)
    }
}

/// Persists a whole cassette.
pub trait CassetteSink: Send {
    fn save(&mut self, cassette: &Cassette) -> Result<()>;
}

/// Wraps a backend and records every turn it produces, saving the cassette
/// after each one.
pub struct RecordingBackend<B> {
    inner: B,
    cassette: Cassette,
    sink: Box<dyn CassetteSink>,
}

impl<B: ModelBackend> RecordingBackend<B> {
    pub fn new(inner: B, sink: Box<dyn CassetteSink>) -> Self {
        RecordingBackend { inner, cassette: Cassette::default(), sink }
    }

    /// Continues recording into an existing cassette.
    pub fn extending(inner: B, cassette: Cassette, sink: Box<dyn CassetteSink>) -> Self {
        RecordingBackend { inner, cassette, sink }
    }

    pub fn cassette(&self) -> &Cassette {
        &self.cassette
    }
}

impl<B: ModelBackend> ModelBackend for RecordingBackend<B> {
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelTurn> {
        request.check_budget()?;
        let turn = self.inner.complete(request)?;
        self.cassette.record(request, turn.clone());
        self.sink.save(&self.cassette)?;
        Ok(turn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tools::default_domain_tags;
    use serde_json::json;

    struct NoSink;
    impl CassetteSink for NoSink {
        fn save(&mut self, _: &Cassette) -> Result<()> {
            Ok(())
        }
    }

    fn schema(name: &str) -> ToolSchema {
        ToolSchema { name: name.into(), description: String::new(), parameters: Vec::new(), domain_tags: default_domain_tags(name) }
    }

    fn scripted() -> impl ModelBackend {
        FnBackend(|req: &ModelRequest| {
            Ok(match req.turn_index() {
                0 => ModelTurn::ToolCall { tool_name: "pubmed_search".into(), arguments: json!({"gene": "TP53"}) },
                1 => ModelTurn::ToolCall { tool_name: "gwas_associations".into(), arguments: json!({"gene": "TP53"}) },
                _ => ModelTurn::FinalText { text: "done".into() },
            })
        })
    }

    fn advance(req: &mut ModelRequest, turn: ModelTurn) {
        req.conversation.push(Message::Assistant { turn });
        req.conversation.push(Message::Tool { tool_name: "x".into(), content: "{}".into() });
    }

    #[test]
    fn record_then_replay_three_turns() {
        let mut rec = RecordingBackend::new(scripted(), Box::new(NoSink));
        let mut req = ModelRequest::new("Write the genetic section at 2025-03-04T05:06:07Z.");
        req.tool_schemas = vec![schema("pubmed_search"), schema("gwas_associations")];
        let mut recorded = Vec::new();
        for _ in 0..3 {
            let t = rec.complete(&req).unwrap();
            recorded.push(t.clone());
            advance(&mut req, t);
        }
        let text = rec.cassette().to_jsonl().unwrap();
        let mut replay = ReplayBackend::new(Cassette::from_jsonl(&text).unwrap());
        let mut req2 = ModelRequest::new("Write the  genetic section at 2026-01-01T00:00:00.123+02:00.");
        req2.tool_schemas = vec![schema("gwas_associations"), schema("pubmed_search")];
        for expected in recorded {
            let t = replay.complete(&req2).unwrap();
            assert_eq!(t, expected);
            advance(&mut req2, t);
        }
    }

    #[test]
    fn miss_and_budget() {
        let mut replay = ReplayBackend::default();
        let err = replay.complete(&ModelRequest::new("unrecorded")).unwrap_err();
        assert_eq!(err.code, ErrorCode::CassetteMiss);
        assert!(err.message.contains(&ModelRequest::new("unrecorded").fingerprint()));
        let mut req = ModelRequest::new("x");
        req.budget.max_turns = 0;
        assert_eq!(replay.complete(&req).unwrap_err().code, ErrorCode::BudgetExceeded);
    }

    #[test]
    fn turn_index_separates_fingerprints() {
        let mut req = ModelRequest::new("same");
        let a = req.fingerprint();
        advance(&mut req, ModelTurn::FinalText { text: String::new() });
        assert_ne!(a, req.fingerprint());
    }

    #[test]
    fn truncated_cassette_misses_at_cut() {
        let mut cassette = Cassette::default();
        let mut req = ModelRequest::new("p");
        for i in 0..3 {
            cassette.record(&req, ModelTurn::FinalText { text: format!("{i}") });
            advance(&mut req, ModelTurn::FinalText { text: format!("{i}") });
        }
        let text = cassette.to_jsonl().unwrap();
        let mut replay = ReplayBackend::new(Cassette::from_jsonl(&text).unwrap());
        let mut req = ModelRequest::new("p");
        for _ in 0..3 {
            let t = replay.complete(&req).unwrap();
            advance(&mut req, t);
        }
        let fp_turn2 = {
            let mut r = ModelRequest::new("p");
            advance(&mut r, ModelTurn::FinalText { text: "0".into() });
            advance(&mut r, ModelTurn::FinalText { text: "1".into() });
            r.fingerprint()
        };
        let mut truncated = Cassette::from_jsonl(&text).unwrap();
        truncated.entries.remove(&fp_turn2);
        let mut replay = ReplayBackend::new(truncated);
        let mut req = ModelRequest::new("p");
        for _ in 0..2 {
            let t = replay.complete(&req).unwrap();
            advance(&mut req, t);
        }
        assert_eq!(replay.complete(&req).unwrap_err().code, ErrorCode::CassetteMiss);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_prompt("a \n\t b 2025-01-01T00:00:00Z c"), "a b <ts> c");
        assert_eq!(normalize_prompt("x 12025-01-01T00:00:00Z"), "x 12025-01-01T00:00:00Z");
        assert_eq!(normalize_prompt("on 2025-01-01 only"), "on 2025-01-01 only");
    }
}
