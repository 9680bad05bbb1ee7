//! Tool memory: a provenance-tagged evidence store addressed by numeric id.
//!
//! The store is an in-memory state machine over [`StoreEvent`]s. Every
//! mutation is appended to the [`Journal`] before it is applied, so replaying
//! the journal from empty reproduces the store exactly. Deletion is soft.
//!
//! Journal frames are a little-endian `u32` length followed by that many
//! bytes of JSON. A torn final frame (crash mid-write) is ignored on replay.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::clock::Clock;
use crate::domain::SectionId;
use crate::error::{Error, ErrorCode, Result};
use crate::prelude::*;
use crate::tools::{ParamSpec, ParamType, ToolSchema, TAG_ALL};

pub const AGENT_REFINEMENT: &str = "refinement";
pub const AGENT_SYSTEM: &str = "system";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// A section id, `refinement` or `system`.
    pub invoking_agent: String,
    pub tool_name: String,
    /// The exact tool arguments.
    pub query: Value,
    pub pipeline_stage: String,
    pub source_database: String,
    pub retrieved_at: String,
}

impl Provenance {
    pub fn validate(&self) -> Result<()> {
        let invalid = |what: &str| Error::new(ErrorCode::InvalidProvenance, format!("provenance field '{what}' is empty"));
        let agent = self.invoking_agent.as_str();
        if agent.is_empty() {
            return Err(invalid("invoking_agent"));
        }
        if agent != AGENT_REFINEMENT && agent != AGENT_SYSTEM && agent.parse::<SectionId>().is_err() {
            return Err(Error::new(ErrorCode::InvalidProvenance, format!("unknown invoking_agent '{agent}'")));
        }
        for (name, value) in [
            ("tool_name", &self.tool_name),
            ("pipeline_stage", &self.pipeline_stage),
            ("source_database", &self.source_database),
            ("retrieved_at", &self.retrieved_at),
        ] {
            if value.trim().is_empty() {
                return Err(invalid(name));
            }
        }
        if self.query.is_null() {
            return Err(invalid("query"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub revision: u32,
    pub content_hash: String,
    pub replaced_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub id: u64,
    pub global_id: String,
    pub provenance: Provenance,
    pub payload: Value,
    pub content_hash: String,
    pub created_at: String,
    pub invalidated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalidation_reason: Option<String>,
    pub revision: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub audit: Vec<AuditEntry>,
}

impl EvidenceRecord {
    /// Every scalar of the payload, depth-first, one per line. Object keys are
    /// not included.
    pub fn payload_text(&self) -> String {
        payload_text(&self.payload)
    }
}

/// Text content of a JSON document: string values and other scalars,
/// depth-first in key order, newline separated.
pub fn payload_text(value: &Value) -> String {
    fn walk(v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Null => {}
            Value::String(s) => out.push(s.clone()),
            Value::Bool(b) => out.push(b.to_string()),
            Value::Number(n) => out.push(n.to_string()),
            Value::Array(items) => items.iter().for_each(|i| walk(i, out)),
            Value::Object(map) => map.values().for_each(|i| walk(i, out)),
        }
    }
    let mut parts = Vec::new();
    walk(value, &mut parts);
    parts.join("\n")
}

/// SHA-256 over the canonical (sorted-key) JSON encoding.
pub fn content_hash(payload: &Value) -> String {
    let bytes = serde_json::to_vec(payload).unwrap_or_default();
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StoreEvent {
    Put { record: EvidenceRecord },
    Update { id: u64, patch: Map<String, Value>, at: String },
    Invalidate { id: u64, reason: String, at: String },
}

/// Durable sink for store events. `append` must not return before the event
/// is persisted.
pub trait Journal: Send {
    fn append(&mut self, event: &StoreEvent) -> Result<()>;
}

/// Discards events; for throwaway stores.
#[derive(Debug, Default)]
pub struct NullJournal;

impl Journal for NullJournal {
    fn append(&mut self, _event: &StoreEvent) -> Result<()> {
        Ok(())
    }
}

/// Keeps framed events in memory.
#[derive(Debug, Default, Clone)]
pub struct MemoryJournal {
    pub bytes: Vec<u8>,
}

impl Journal for MemoryJournal {
    fn append(&mut self, event: &StoreEvent) -> Result<()> {
        self.bytes.extend_from_slice(&encode_frame(event)?);
        Ok(())
    }
}

pub fn encode_frame(event: &StoreEvent) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(event)?;
    let len = u32::try_from(body.len()).map_err(|_| Error::storage("journal event too large"))?;
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Decodes consecutive frames. Returns the events and the length of the
/// valid prefix; a truncated final frame ends decoding without error, a
/// complete frame with an undecodable body is a `state-corrupt` error.
pub fn decode_frames(bytes: &[u8]) -> Result<(Vec<StoreEvent>, usize)> {
    let mut events = Vec::new();
    let mut pos = 0;
    while pos + 4 <= bytes.len() {
        let len = u32::from_le_bytes([bytes[pos], bytes[pos + 1], bytes[pos + 2], bytes[pos + 3]]) as usize;
        let end = pos + 4 + len;
        if end > bytes.len() {
            break;
        }
        let event = serde_json::from_slice(&bytes[pos + 4..end]).map_err(|e| {
            Error::new(ErrorCode::StateCorrupt, format!("journal frame at byte {pos} is unreadable: {e}"))
        })?;
        events.push(event);
        pos = end;
    }
    Ok((events, pos))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invoking_agent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl EvidenceQuery {
    pub fn matches(&self, record: &EvidenceRecord) -> bool {
        let p = &record.provenance;
        self.tool_name.as_ref().is_none_or(|t| &p.tool_name == t)
            && self.invoking_agent.as_ref().is_none_or(|a| &p.invoking_agent == a)
            && self.pipeline_stage.as_ref().is_none_or(|s| &p.pipeline_stage == s)
            && self
                .text
                .as_ref()
                .is_none_or(|t| record.payload_text().to_lowercase().contains(&t.to_lowercase()))
    }
}

/// Point-in-time copy of the store, used as a journal checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub assessment_id: String,
    pub records: Vec<EvidenceRecord>,
    /// Number of journal events folded into this snapshot.
    pub events_applied: u64,
}

pub struct EvidenceStore {
    assessment_id: String,
    records: Vec<EvidenceRecord>,
    journal: Box<dyn Journal>,
    clock: alloc::sync::Arc<dyn Clock>,
    events_applied: u64,
    closed: bool,
}

impl core::fmt::Debug for EvidenceStore {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("EvidenceStore")
            .field("assessment_id", &self.assessment_id)
            .field("records", &self.records.len())
            .finish()
    }
}

impl EvidenceStore {
    pub fn new(assessment_id: impl Into<String>, journal: Box<dyn Journal>, clock: alloc::sync::Arc<dyn Clock>) -> Self {
        EvidenceStore {
            assessment_id: assessment_id.into(),
            records: Vec::new(),
            journal,
            clock,
            events_applied: 0,
            closed: false,
        }
    }

    /// Rebuilds a store from an optional snapshot plus the events journalled
    /// after it. `journal` receives subsequent writes.
    pub fn restore(
        assessment_id: impl Into<String>,
        snapshot: Option<Snapshot>,
        events: impl IntoIterator<Item = StoreEvent>,
        journal: Box<dyn Journal>,
        clock: alloc::sync::Arc<dyn Clock>,
    ) -> Result<Self> {
        let mut store = EvidenceStore::new(assessment_id, journal, clock);
        if let Some(snap) = snapshot {
            if snap.assessment_id != store.assessment_id {
                return Err(Error::new(ErrorCode::StateCorrupt, "snapshot belongs to another assessment"));
            }
            store.records = snap.records;
            store.events_applied = snap.events_applied;
        }
        for event in events {
            store.apply(&event).map_err(|e| Error::new(ErrorCode::StateCorrupt, format!("journal replay: {e}")))?;
        }
        Ok(store)
    }

    pub fn assessment_id(&self) -> &str {
        &self.assessment_id
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn max_id(&self) -> u64 {
        self.records.len() as u64
    }

    pub fn events_applied(&self) -> u64 {
        self.events_applied
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            assessment_id: self.assessment_id.clone(),
            records: self.records.clone(),
            events_applied: self.events_applied,
        }
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    fn ensure_open(&self) -> Result<()> {
        if self.closed {
            Err(Error::storage("evidence store is closed"))
        } else {
            Ok(())
        }
    }

    fn commit(&mut self, event: StoreEvent) -> Result<EvidenceRecord> {
        self.ensure_open()?;
        self.journal.append(&event).map_err(|e| Error::storage(format!("journal append failed: {}", e.message)))?;
        self.apply(&event)
    }

    /// Applies one event to the in-memory state.
    pub fn apply(&mut self, event: &StoreEvent) -> Result<EvidenceRecord> {
        let record = match event {
            StoreEvent::Put { record } => {
                let expected = self.records.len() as u64 + 1;
                if record.id != expected {
                    return Err(Error::storage(format!("put with id {} where {expected} was expected", record.id)));
                }
                self.records.push(record.clone());
                record.clone()
            }
            StoreEvent::Update { id, patch, at } => {
                let rec = self.slot_mut(*id)?;
                rec.audit.push(AuditEntry {
                    revision: rec.revision,
                    content_hash: rec.content_hash.clone(),
                    replaced_at: at.clone(),
                });
                merge_patch(&mut rec.payload, patch);
                rec.content_hash = content_hash(&rec.payload);
                rec.revision += 1;
                rec.clone()
            }
            StoreEvent::Invalidate { id, reason, .. } => {
                let rec = self.slot_mut(*id)?;
                if !rec.invalidated {
                    rec.invalidated = true;
                    rec.invalidation_reason = Some(reason.clone());
                }
                rec.clone()
            }
        };
        self.events_applied += 1;
        Ok(record)
    }

    fn slot_mut(&mut self, id: u64) -> Result<&mut EvidenceRecord> {
        if id == 0 || id > self.records.len() as u64 {
            return Err(Error::not_found(format!("evidence {id} does not exist")));
        }
        Ok(&mut self.records[(id - 1) as usize])
    }

    pub fn put(&mut self, provenance: Provenance, payload: Value) -> Result<EvidenceRecord> {
        self.ensure_open()?;
        provenance.validate()?;
        let id = self.records.len() as u64 + 1;
        let record = EvidenceRecord {
            id,
            global_id: format!("{}:{}", self.assessment_id, id),
            content_hash: content_hash(&payload),
            provenance,
            payload,
            created_at: self.clock.now(),
            invalidated: false,
            invalidation_reason: None,
            revision: 1,
            audit: Vec::new(),
        };
        self.commit(StoreEvent::Put { record })
    }

    pub fn get(&self, id: u64) -> Result<&EvidenceRecord> {
        if id == 0 {
            return Err(Error::not_found("evidence ids start at 1"));
        }
        self.records.get((id - 1) as usize).ok_or_else(|| Error::not_found(format!("evidence {id} does not exist")))
    }

    /// Top-level merge patch on the payload; `null` removes a key. Any key
    /// naming provenance is rejected.
    pub fn update(&mut self, id: u64, patch: Map<String, Value>) -> Result<EvidenceRecord> {
        self.ensure_open()?;
        if let Some(key) = patch.keys().find(|k| k.as_str() == "provenance" || k.starts_with("provenance.")) {
            return Err(Error::new(ErrorCode::ProvenanceImmutable, format!("'{key}' cannot be modified")));
        }
        self.get(id)?;
        let at = self.clock.now();
        self.commit(StoreEvent::Update { id, patch, at })
    }

    pub fn invalidate(&mut self, id: u64, reason: &str) -> Result<EvidenceRecord> {
        self.ensure_open()?;
        let current = self.get(id)?;
        if current.invalidated {
            return Ok(current.clone());
        }
        let at = self.clock.now();
        self.commit(StoreEvent::Invalidate { id, reason: reason.to_owned(), at })
    }

    pub fn query(&self, filter: &EvidenceQuery) -> Vec<&EvidenceRecord> {
        self.records.iter().filter(|r| filter.matches(r)).collect()
    }

    pub fn records(&self) -> &[EvidenceRecord] {
        &self.records
    }

    pub fn as_tool_descriptor() -> ToolSchema {
        ToolSchema {
            name: LOOKUP_TOOL.into(),
            description: "Retrieve a previously indexed evidence record (payload and provenance) by numeric id.".into(),
            parameters: vec![ParamSpec {
                name: "id".into(),
                ty: ParamType::Integer,
                required: true,
                description: "Evidence id as cited in [ev:N] markers".into(),
                default: None,
            }],
            domain_tags: vec![TAG_ALL.into()],
        }
    }
}

pub const LOOKUP_TOOL: &str = "evidence_lookup";

fn merge_patch(payload: &mut Value, patch: &Map<String, Value>) {
    if !payload.is_object() {
        *payload = json!({});
    }
    if let Value::Object(obj) = payload {
        for (k, v) in patch {
            if v.is_null() {
                obj.remove(k);
            } else {
                obj.insert(k.clone(), v.clone());
            }
        }
    }
}
