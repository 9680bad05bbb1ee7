//! Human refinement: edit, append, upload and reinvoke actions on a report,
//! the per-assessment conversation memory, and preference mining.
//!
//! Every action that changes a section body goes through the same
//! post-execution hook as pipeline output. Downstream sections are flagged
//! stale, never regenerated.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::domain::{ProducedBy, Report, SectionDraft, SectionId, SectionStatus};
use crate::error::{Error, ErrorCode, Result};
use crate::evidence::{Provenance, AGENT_REFINEMENT};
use crate::grounding::{extract_claims, Judge, SectionVerification};
use crate::hooks::{post_execute, PostContext};
use crate::instruction::{Directive, DirectiveValue};
use crate::memory::DependencyGraph;
use crate::orchestrator::{Engine, Generation};
use crate::prelude::*;
use crate::state::{ConversationTurn, EventKind, RunStatus};

pub const UPLOAD_TOOL: &str = "user_upload";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadDocument {
    pub name: String,
    pub media_type: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RefinementAction {
    Edit { section_id: SectionId, body: String, actor: String },
    Append { section_id: SectionId, text: String, actor: String },
    Upload {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        section_id: Option<SectionId>,
        document: UploadDocument,
        actor: String,
    },
    Reinvoke { section_id: SectionId, instruction: String, actor: String },
}

impl RefinementAction {
    pub fn kind(&self) -> &'static str {
        match self {
            RefinementAction::Edit { .. } => "edit",
            RefinementAction::Append { .. } => "append",
            RefinementAction::Upload { .. } => "upload",
            RefinementAction::Reinvoke { .. } => "reinvoke",
        }
    }

    pub fn actor(&self) -> &str {
        match self {
            RefinementAction::Edit { actor, .. }
            | RefinementAction::Append { actor, .. }
            | RefinementAction::Upload { actor, .. }
            | RefinementAction::Reinvoke { actor, .. } => actor,
        }
    }

    pub fn section_id(&self) -> Option<SectionId> {
        match self {
            RefinementAction::Edit { section_id, .. }
            | RefinementAction::Append { section_id, .. }
            | RefinementAction::Reinvoke { section_id, .. } => Some(*section_id),
            RefinementAction::Upload { section_id, .. } => *section_id,
        }
    }

    fn validate(&self) -> Result<()> {
        let empty = match self {
            RefinementAction::Edit { body, .. } => body.trim().is_empty(),
            RefinementAction::Append { text, .. } => text.trim().is_empty(),
            RefinementAction::Upload { document, .. } => document.content.trim().is_empty(),
            RefinementAction::Reinvoke { instruction, .. } => instruction.trim().is_empty(),
        };
        if empty {
            return Err(Error::invalid_argument(format!("{} payload is empty", self.kind())));
        }
        if self.actor().trim().is_empty() {
            return Err(Error::invalid_argument("actor is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplyOutcome {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft: Option<SectionDraft>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<SectionVerification>,
    pub evidence_ids: Vec<u64>,
    /// True when the action changed nothing.
    pub noop: bool,
    pub stale: BTreeMap<SectionId, bool>,
}

/// A section is stale when any transitive upstream section now has a newer
/// revision than the one its draft was produced from.
pub fn staleness(report: &Report, graph: &DependencyGraph) -> BTreeMap<SectionId, bool> {
    report
        .sections
        .iter()
        .map(|s| {
            let stale = s.status.has_content()
                && graph.transitive_upstream(s.section_id).into_iter().any(|u| {
                    report.section(u).is_some_and(|up| up.revision > s.inputs.get(&u).copied().unwrap_or(0))
                });
            (s.section_id, stale)
        })
        .collect()
}

/// Append-only view of an assessment's refinement conversation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConversationMemory {
    turns: Vec<ConversationTurn>,
}

impl ConversationMemory {
    pub fn new(turns: Vec<ConversationTurn>) -> Self {
        ConversationMemory { turns }
    }

    pub fn push(&mut self, turn: ConversationTurn) {
        self.turns.push(turn);
    }

    pub fn turns(&self) -> &[ConversationTurn] {
        &self.turns
    }

    /// Turns about `section` plus section-less ones (uploads), rendered for a
    /// reinvoked agent.
    pub fn digest(&self, section: SectionId) -> String {
        let mut out = String::from("<<<CONVERSATION MEMORY>>>\n");
        for t in self.turns.iter().filter(|t| t.section_id.is_none_or(|s| s == section)) {
            let text = t.text.split_whitespace().collect::<Vec<_>>().join(" ");
            let text: String = if text.chars().count() > 280 {
                let cut: String = text.chars().take(280).collect();
                format!("{cut}…")
            } else {
                text
            };
            out.push_str(&format!("- {} {}: {}\n", t.actor, t.action, text));
        }
        out.push_str("<<<END CONVERSATION MEMORY>>>");
        out
    }
}

/// Paragraph chunks, table rows or JSON elements of an uploaded document.
pub fn ingest(document: &UploadDocument) -> Result<Vec<Value>> {
    let media = document.media_type.split(';').next().unwrap_or("").trim().to_lowercase();
    let base = |extra: Map<String, Value>| {
        let mut m = Map::new();
        m.insert("document".into(), Value::String(document.name.clone()));
        m.extend(extra);
        Value::Object(m)
    };
    let records: Vec<Value> = match media.as_str() {
        "text/plain" | "text/markdown" => document
            .content
            .replace("\r\n", "\n")
            .split("\n\n")
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .enumerate()
            .map(|(i, p)| {
                let mut m = Map::new();
                m.insert("chunk".into(), json!(i + 1));
                m.insert("text".into(), Value::String(p.to_owned()));
                base(m)
            })
            .collect(),
        "text/csv" | "text/tab-separated-values" => {
            let sep = if media == "text/csv" { ',' } else { '\t' };
            let mut lines = document.content.lines().filter(|l| !l.trim().is_empty());
            let header: Vec<String> = lines
                .next()
                .ok_or_else(|| Error::invalid_argument("table upload has no header row"))?
                .split(sep)
                .map(|h| h.trim().to_owned())
                .collect();
            let mut out = Vec::new();
            for (i, line) in lines.enumerate() {
                let cells: Vec<&str> = line.split(sep).map(str::trim).collect();
                if cells.len() != header.len() {
                    return Err(Error::invalid_argument(format!(
                        "row {} has {} cells, header has {}",
                        i + 2,
                        cells.len(),
                        header.len()
                    )));
                }
                let mut m = Map::new();
                m.insert("row".into(), json!(i + 1));
                for (h, c) in header.iter().zip(cells) {
                    m.insert(h.clone(), Value::String(c.to_owned()));
                }
                out.push(base(m));
            }
            out
        }
        "application/json" => {
            let value: Value = serde_json::from_str(&document.content)
                .map_err(|e| Error::invalid_argument(format!("upload is not valid JSON: {e}")))?;
            let items = match value {
                Value::Array(items) => items,
                other => vec![other],
            };
            items
                .into_iter()
                .map(|item| match item {
                    Value::Object(m) => base(m),
                    other => {
                        let mut m = Map::new();
                        m.insert("value".into(), other);
                        base(m)
                    }
                })
                .collect()
        }
        other => {
            return Err(Error::new(
                ErrorCode::UnsupportedMedia,
                format!("cannot ingest '{other}'; supported: text/plain, text/markdown, text/csv, text/tab-separated-values, application/json"),
            ))
        }
    };
    if records.is_empty() {
        return Err(Error::invalid_argument("upload contains no records"));
    }
    Ok(records)
}

impl Engine<'_> {
    fn busy(&self) -> Result<()> {
        if let Some(active) = self.lock.holder() {
            return Err(Error::new(ErrorCode::SequentialViolation, format!("section {active} is running")));
        }
        if let Some(exec) = self.state.load_state()? {
            if exec.status == RunStatus::Running {
                let what = exec.current.map_or_else(|| "the pipeline".to_owned(), |s| format!("section {s}"));
                return Err(Error::new(ErrorCode::SequentialViolation, format!("{what} is running")));
            }
        }
        Ok(())
    }

    fn record_turn(&mut self, action: &RefinementAction, text: String) -> Result<()> {
        let turn = ConversationTurn {
            actor: action.actor().to_owned(),
            section_id: action.section_id(),
            action: action.kind().to_owned(),
            text,
            at: self.clock.now(),
        };
        self.state.append_turn(&turn)
    }

    fn finish(&mut self, action: &RefinementAction, mut outcome: ApplyOutcome) -> Result<ApplyOutcome> {
        let report = self.assemble()?;
        outcome.stale = staleness(&report, &self.plan.graph);
        if self.state.load_report()?.is_some() {
            self.state.save_report(&report)?;
        }
        self.event(
            EventKind::RefinementApplied,
            json!({
                "kind": action.kind(),
                "section": action.section_id(),
                "actor": action.actor(),
                "revision": outcome.draft.as_ref().map(|d| d.revision),
                "evidence_ids": outcome.evidence_ids,
                "noop": outcome.noop,
            }),
        )?;
        Ok(outcome)
    }

    fn current_draft(&self, section: SectionId) -> Result<SectionDraft> {
        self.state
            .load_section(section)?
            .filter(|d| d.status.has_content())
            .ok_or_else(|| Error::invalid_argument(format!("section {section} has no content yet")))
    }

    /// Applies one refinement action.
    pub fn apply(&mut self, action: &RefinementAction) -> Result<ApplyOutcome> {
        action.validate()?;
        self.busy()?;
        match action {
            RefinementAction::Edit { section_id, body, .. } => self.human_edit(action, *section_id, body.clone()),
            RefinementAction::Append { section_id, text, .. } => {
                let current = self.current_draft(*section_id)?;
                let body = format!("{}\n\n{}\n", current.body.trim_end(), text.trim());
                self.human_edit(action, *section_id, body)
            }
            RefinementAction::Upload { document, .. } => self.upload(action, document),
            RefinementAction::Reinvoke { section_id, instruction, .. } => self.reinvoke(action, *section_id, instruction),
        }
    }

    fn human_edit(&mut self, action: &RefinementAction, section: SectionId, body: String) -> Result<ApplyOutcome> {
        let current = self.current_draft(section)?;
        if current.body == body {
            let verification = self.state.load_verification(section)?;
            let outcome =
                ApplyOutcome { draft: Some(current), verification, evidence_ids: Vec::new(), noop: true, stale: BTreeMap::new() };
            return self.finish(action, outcome);
        }
        self.lock.try_acquire(section)?;
        let result = self.validate_human_draft(section, current, body);
        self.lock.release(section);
        let (draft, verification) = result?;
        let summary = match action {
            RefinementAction::Append { text, .. } => text.clone(),
            _ => format!("edited body to revision {}", draft.revision),
        };
        self.record_turn(action, summary)?;
        let outcome = ApplyOutcome {
            draft: Some(draft),
            verification: Some(verification),
            evidence_ids: Vec::new(),
            noop: false,
            stale: BTreeMap::new(),
        };
        self.finish(action, outcome)
    }

    fn validate_human_draft(
        &mut self,
        section: SectionId,
        current: SectionDraft,
        body: String,
    ) -> Result<(SectionDraft, SectionVerification)> {
        let mut draft = current;
        draft.transition(SectionStatus::UserEdited)?;
        draft.body = body;
        draft.claims = extract_claims(&draft.body);
        draft.revision += 1;
        draft.produced_by = ProducedBy::Human;
        let skill = self.plan.skills[&section].clone();
        let now = self.clock.now();
        let judge: Option<&mut dyn Judge> = match &mut self.judge {
            Some(j) => Some(&mut **j),
            None => None,
        };
        let ctx = PostContext {
            skill: &skill,
            store: self.store,
            judge,
            tau: self.options.tau,
            compressor: &mut *self.compressor,
            state: &mut *self.state,
            execution: None,
            now: &now,
        };
        let (outcome, artifacts) = post_execute(&draft, ctx)?;
        self.event(EventKind::HookVerdict, serde_json::to_value(&outcome)?)?;
        if outcome.is_blocked() {
            let code = outcome.block_code().unwrap_or("blocked").to_owned();
            let messages: Vec<String> = outcome.violations.iter().map(|v| format!("[{}] {}", v.code, v.message)).collect();
            return Err(Error::new(ErrorCode::ValidationFailed, messages.join("; ")).with_cause(code));
        }
        Ok((draft, artifacts.verification))
    }

    fn upload(&mut self, action: &RefinementAction, document: &UploadDocument) -> Result<ApplyOutcome> {
        if let Some(p) = self.options.denylist.scan(&document.content) {
            return Err(Error::new(
                ErrorCode::ValidationFailed,
                format!("uploaded document matches denylisted pattern '{p}'"),
            )
            .with_cause("prompt-injection"));
        }
        let records = ingest(document)?;
        let retrieved_at = self.clock.now();
        let mut ids = Vec::with_capacity(records.len());
        for record in records {
            let provenance = Provenance {
                invoking_agent: AGENT_REFINEMENT.to_owned(),
                tool_name: UPLOAD_TOOL.to_owned(),
                query: json!({"document": document.name, "media_type": document.media_type, "actor": action.actor()}),
                pipeline_stage: "refinement".to_owned(),
                source_database: format!("user upload: {}", document.name),
                retrieved_at: retrieved_at.clone(),
            };
            ids.push(self.store.put(provenance, record)?.id);
        }
        let (first, last) = (ids[0], ids[ids.len() - 1]);
        self.record_turn(
            action,
            format!("uploaded '{}' ({}) as evidence [ev:{first}]..[ev:{last}]", document.name, document.media_type),
        )?;
        let outcome = ApplyOutcome { draft: None, verification: None, evidence_ids: ids, noop: false, stale: BTreeMap::new() };
        self.finish(action, outcome)
    }

    fn reinvoke(&mut self, action: &RefinementAction, section: SectionId, instruction: &str) -> Result<ApplyOutcome> {
        let exec = self.state.load_state()?;
        let interrupted_here =
            exec.as_ref().is_some_and(|e| e.status == RunStatus::Interrupted && e.next_section() == Some(section));
        let current = self.state.load_section(section)?.filter(|d| d.status.has_content());
        let memory = ConversationMemory::new(self.state.conversation()?);
        let mut extra = memory.digest(section);
        if let Some(c) = &current {
            extra.push_str(&format!("\n<<<CURRENT DRAFT rev {}>>>\n{}\n<<<END CURRENT DRAFT>>>", c.revision, c.body.trim_end()));
        }
        extra.push_str(&format!("\n<<<REVISION INSTRUCTION>>>\n{}\n<<<END REVISION INSTRUCTION>>>\n", instruction.trim()));
        let scan = [instruction.to_owned()];

        let (draft, artifacts) = match (current, interrupted_here) {
            (Some(c), _) => {
                let g = Generation {
                    section,
                    extra: Some(extra),
                    revision: c.revision + 1,
                    status: SectionStatus::Revised,
                    scan: &scan,
                };
                self.generate(g, None)?
            }
            (None, true) => {
                let mut exec = exec.expect("checked above");
                let g =
                    Generation { section, extra: Some(extra), revision: 0, status: SectionStatus::Generated, scan: &scan };
                self.generate(g, Some(&mut exec))?
            }
            (None, false) => return Err(Error::invalid_argument(format!("section {section} has no content yet"))),
        };
        self.record_turn(action, instruction.to_owned())?;
        let outcome = ApplyOutcome {
            draft: Some(draft),
            verification: Some(artifacts.verification),
            evidence_ids: Vec::new(),
            noop: false,
            stale: BTreeMap::new(),
        };
        self.finish(action, outcome)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceStatus {
    Proposed,
    Accepted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceDelta {
    pub actor: String,
    pub key: String,
    pub value: DirectiveValue,
    /// Indices of the conversation turns that justify the delta.
    pub evidence: Vec<usize>,
    pub status: PreferenceStatus,
}

/// Repetitions needed before a pattern is proposed.
pub const DEFAULT_REPETITIONS: usize = 3;

fn number_after<'a>(words: &[&'a str], i: usize) -> Option<(i64, usize)> {
    words.iter().enumerate().skip(i).take(4).find_map(|(j, w)| w.parse::<i64>().ok().map(|n| (n, j)))
}

/// Recognised directive forms in one instruction:
///
/// * `limit sources|references|citations to N` → `retrieval.max_sources`
/// * `limit … to N words` / `keep … under N words` → `quality.max_words`
/// * `always include X` → `style.always_include`
/// * `never include X` / `do not include X` → `style.exclude`
/// * `prefer X over Y` → `evidence.preference`
pub fn directive_patterns(instruction: &str) -> Vec<(String, DirectiveValue)> {
    let mut out = Vec::new();
    let lower = instruction.to_lowercase();
    for clause in lower.split(['.', ';', '\n', '!']).map(str::trim).filter(|c| !c.is_empty()) {
        let words: Vec<&str> = clause.split_whitespace().map(|w| w.trim_matches(|c: char| c == ',' || c == '"')).collect();
        let rest_after = |i: usize| words[i..].join(" ");
        for (i, w) in words.iter().enumerate() {
            match *w {
                "limit" | "keep" | "cap" => {
                    if let Some((n, j)) = number_after(&words, i + 1) {
                        let between = &words[i + 1..j];
                        if words.get(j + 1).is_some_and(|u| u.starts_with("word")) {
                            out.push(("quality.max_words".into(), DirectiveValue::Int(n)));
                        } else if between
                            .iter()
                            .any(|b| ["source", "sources", "references", "citations", "records"].contains(b))
                        {
                            out.push(("retrieval.max_sources".into(), DirectiveValue::Int(n)));
                        }
                    }
                }
                "always" if words.get(i + 1) == Some(&"include") && i + 2 < words.len() => {
                    out.push(("style.always_include".into(), DirectiveValue::Text(rest_after(i + 2))));
                }
                "never" if words.get(i + 1) == Some(&"include") && i + 2 < words.len() => {
                    out.push(("style.exclude".into(), DirectiveValue::Text(rest_after(i + 2))));
                }
                "not" if i > 0 && words[i - 1] == "do" && words.get(i + 1) == Some(&"include") && i + 2 < words.len() => {
                    out.push(("style.exclude".into(), DirectiveValue::Text(rest_after(i + 2))));
                }
                "prefer" if words[i + 1..].contains(&"over") && i + 1 < words.len() => {
                    out.push(("evidence.preference".into(), DirectiveValue::Text(rest_after(i + 1))));
                }
                _ => {}
            }
        }
    }
    out
}

/// Mines reinvoke instructions for directive patterns repeated at least `k`
/// times by the same actor. Deltas are only ever proposed.
pub fn capture_preferences(turns: &[ConversationTurn], k: usize) -> Vec<PreferenceDelta> {
    let mut seen: BTreeMap<(String, String, String), (DirectiveValue, Vec<usize>)> = BTreeMap::new();
    for (i, t) in turns.iter().enumerate().filter(|(_, t)| t.action == "reinvoke") {
        for (key, value) in directive_patterns(&t.text) {
            let entry = seen.entry((t.actor.clone(), key, value.to_string())).or_insert_with(|| (value, Vec::new()));
            if !entry.1.contains(&i) {
                entry.1.push(i);
            }
        }
    }
    seen.into_iter()
        .filter(|(_, (_, ev))| ev.len() >= k.max(1))
        .map(|((actor, key, _), (value, evidence))| PreferenceDelta {
            actor,
            key,
            value,
            evidence,
            status: PreferenceStatus::Proposed,
        })
        .collect()
}

/// Accepted preferences per actor.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceBook {
    pub accepted: BTreeMap<String, BTreeMap<String, PreferenceDelta>>,
}

impl PreferenceBook {
    pub fn accept(&mut self, mut delta: PreferenceDelta) {
        delta.status = PreferenceStatus::Accepted;
        self.accepted.entry(delta.actor.clone()).or_default().insert(delta.key.clone(), delta);
    }

    /// Layer-3 defaults for `actor`'s next assessment.
    pub fn overlay(&self, actor: &str) -> Vec<Directive> {
        self.accepted
            .get(actor)
            .map(|m| m.values().map(|d| Directive::inferred(d.key.clone(), d.value.clone())).collect())
            .unwrap_or_default()
    }
}
