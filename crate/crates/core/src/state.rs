//! Execution state, progress events and the persistence contract behind
//! checkpoints and resume.
//!
//! Progress events share one sequence per assessment. `hook_verdict` events
//! form the hook trace; every other kind belongs to the state journal. A
//! reader replaying from seq 0 therefore sees both logs interleaved in the
//! order they were written.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::Message;
use crate::domain::{Report, SectionDraft, SectionId, ALL_SECTIONS};
use crate::error::{Error, ErrorCode, Result};
use crate::grounding::SectionVerification;
use crate::memory::CompressedSection;
use crate::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Interrupted,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionState {
    pub assessment_id: String,
    pub completed: Vec<SectionId>,
    pub current: Option<SectionId>,
    /// Evidence-journal events applied when the last checkpoint was written.
    pub journal_position: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Error>,
    pub updated_at: String,
}

impl ExecutionState {
    pub fn new(assessment_id: impl Into<String>, now: &str) -> Self {
        ExecutionState {
            assessment_id: assessment_id.into(),
            completed: Vec::new(),
            current: None,
            journal_position: 0,
            status: RunStatus::Running,
            failure: None,
            updated_at: now.to_owned(),
        }
    }

    /// First section not yet completed, in canonical order.
    pub fn next_section(&self) -> Option<SectionId> {
        ALL_SECTIONS.get(self.completed.len()).copied()
    }

    /// Records a checkpoint for `section`, which must be the next one.
    pub fn mark_completed(&mut self, section: SectionId, journal_position: u64, now: &str) -> Result<()> {
        if self.next_section() != Some(section) {
            return Err(Error::new(
                ErrorCode::SequentialViolation,
                format!("{section} cannot complete before {:?}", self.next_section()),
            ));
        }
        self.completed.push(section);
        self.current = None;
        self.journal_position = journal_position;
        self.updated_at = now.to_owned();
        Ok(())
    }

    /// Checks that `completed` is a canonical prefix.
    pub fn validate(&self) -> Result<()> {
        let prefix = self.completed.len() <= ALL_SECTIONS.len()
            && self.completed.iter().zip(ALL_SECTIONS.iter()).all(|(a, b)| a == b);
        if !prefix {
            return Err(Error::new(
                ErrorCode::StateCorrupt,
                "completed sections are not a prefix of the canonical order; delete state.json to restart the run",
            ));
        }
        if self.status == RunStatus::Completed && self.completed.len() != ALL_SECTIONS.len() {
            return Err(Error::new(ErrorCode::StateCorrupt, "state says completed but sections are missing"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    SectionStarted,
    ToolInvoked,
    HookVerdict,
    SectionCompleted,
    PipelineCompleted,
    PipelineInterrupted,
    RefinementApplied,
}

impl EventKind {
    /// Hook-trace entries; the rest belong to the state journal.
    pub fn is_hook_trace(self) -> bool {
        self == EventKind::HookVerdict
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub seq: u64,
    pub assessment_id: String,
    pub kind: EventKind,
    pub payload: Value,
    pub at: String,
}

/// The raw conversation of one agent attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub section_id: SectionId,
    pub attempt: u32,
    pub prompt: String,
    pub injected_manifest: Vec<SectionId>,
    pub injected_bundle: String,
    pub messages: Vec<Message>,
}

/// One entry of the per-assessment refinement conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub actor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section_id: Option<SectionId>,
    pub action: String,
    pub text: String,
    pub at: String,
}

/// Persistence for one assessment.
pub trait StateStore: Send {
    fn load_state(&self) -> Result<Option<ExecutionState>>;
    fn save_state(&mut self, state: &ExecutionState) -> Result<()>;

    fn save_section(&mut self, draft: &SectionDraft, verification: &SectionVerification) -> Result<()>;
    fn load_section(&self, id: SectionId) -> Result<Option<SectionDraft>>;
    fn load_verification(&self, id: SectionId) -> Result<Option<SectionVerification>>;

    fn save_digest(&mut self, digest: &CompressedSection) -> Result<()>;
    fn load_digest(&self, id: SectionId) -> Result<Option<CompressedSection>>;

    fn save_transcript(&mut self, transcript: &Transcript) -> Result<()>;
    fn transcripts(&self) -> Result<Vec<Transcript>>;

    /// Appends an event with the next sequence number.
    fn append_event(&mut self, kind: EventKind, payload: Value, at: &str) -> Result<ProgressEvent>;
    /// Events with `seq > after`.
    fn events(&self, after: u64) -> Result<Vec<ProgressEvent>>;

    fn append_turn(&mut self, turn: &ConversationTurn) -> Result<()>;
    fn conversation(&self) -> Result<Vec<ConversationTurn>>;

    fn save_report(&mut self, report: &Report) -> Result<()>;
    fn load_report(&self) -> Result<Option<Report>>;
}

/// Keeps everything in memory.
#[derive(Debug, Default, Clone)]
pub struct MemoryStateStore {
    pub assessment_id: String,
    pub state: Option<ExecutionState>,
    pub sections: BTreeMap<SectionId, (SectionDraft, SectionVerification)>,
    pub digests: BTreeMap<SectionId, CompressedSection>,
    pub transcripts: Vec<Transcript>,
    pub events: Vec<ProgressEvent>,
    pub conversation: Vec<ConversationTurn>,
    pub report: Option<Report>,
}

impl MemoryStateStore {
    pub fn new(assessment_id: impl Into<String>) -> Self {
        MemoryStateStore { assessment_id: assessment_id.into(), ..Default::default() }
    }
}

impl StateStore for MemoryStateStore {
    fn load_state(&self) -> Result<Option<ExecutionState>> {
        Ok(self.state.clone())
    }

    fn save_state(&mut self, state: &ExecutionState) -> Result<()> {
        self.state = Some(state.clone());
        Ok(())
    }

    fn save_section(&mut self, draft: &SectionDraft, verification: &SectionVerification) -> Result<()> {
        self.sections.insert(draft.section_id, (draft.clone(), verification.clone()));
        Ok(())
    }

    fn load_section(&self, id: SectionId) -> Result<Option<SectionDraft>> {
        Ok(self.sections.get(&id).map(|(d, _)| d.clone()))
    }

    fn load_verification(&self, id: SectionId) -> Result<Option<SectionVerification>> {
        Ok(self.sections.get(&id).map(|(_, v)| v.clone()))
    }

    fn save_digest(&mut self, digest: &CompressedSection) -> Result<()> {
        self.digests.insert(digest.section_id, digest.clone());
        Ok(())
    }

    fn load_digest(&self, id: SectionId) -> Result<Option<CompressedSection>> {
        Ok(self.digests.get(&id).cloned())
    }

    fn save_transcript(&mut self, transcript: &Transcript) -> Result<()> {
        self.transcripts.push(transcript.clone());
        Ok(())
    }

    fn transcripts(&self) -> Result<Vec<Transcript>> {
        Ok(self.transcripts.clone())
    }

    fn append_event(&mut self, kind: EventKind, payload: Value, at: &str) -> Result<ProgressEvent> {
        let seq = self.events.last().map_or(1, |e| e.seq + 1);
        let event = ProgressEvent { seq, assessment_id: self.assessment_id.clone(), kind, payload, at: at.to_owned() };
        self.events.push(event.clone());
        Ok(event)
    }

    fn events(&self, after: u64) -> Result<Vec<ProgressEvent>> {
        Ok(self.events.iter().filter(|e| e.seq > after).cloned().collect())
    }

    fn append_turn(&mut self, turn: &ConversationTurn) -> Result<()> {
        self.conversation.push(turn.clone());
        Ok(())
    }

    fn conversation(&self) -> Result<Vec<ConversationTurn>> {
        Ok(self.conversation.clone())
    }

    fn save_report(&mut self, report: &Report) -> Result<()> {
        self.report = Some(report.clone());
        Ok(())
    }

    fn load_report(&self) -> Result<Option<Report>> {
        Ok(self.report.clone())
    }
}
