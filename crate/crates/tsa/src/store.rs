//! On-disk assessment directory.
//!
//! ```text
//! <root>/<assessment_id>/
//!   config.json           frozen pipeline plan (settings inside plan.config)
//!   state.json            execution state, replaced atomically
//!   state.jsonl           state-journal events
//!   hooks.jsonl           hook-trace events (same seq space as state.jsonl)
//!   evidence.journal      evidence-store frames (u32 LE length + JSON)
//!   sections/<id>.json    draft + verification
//!   sections/<id>.md      draft body
//!   digests/<id>.json     compressed section
//!   transcripts/NNN-<id>-<attempt>.json
//!   conversation.jsonl    refinement turns
//!   report.json, report.md
//!   .lock                 lease holding the owner pid
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tsa_core::clock::Clock;
use tsa_core::domain::{Report, SectionDraft, SectionId, ALL_SECTIONS};
use tsa_core::evidence::{decode_frames, encode_frame, EvidenceStore, Journal, NullJournal, StoreEvent};
use tsa_core::grounding::SectionVerification;
use tsa_core::memory::CompressedSection;
use tsa_core::orchestrator::PipelinePlan;
use tsa_core::state::{ConversationTurn, EventKind, ExecutionState, ProgressEvent, StateStore, Transcript};
use tsa_core::{Error, ErrorCode, Result};

pub const CONFIG: &str = "config.json";
pub const STATE: &str = "state.json";
pub const STATE_JOURNAL: &str = "state.jsonl";
pub const HOOK_TRACE: &str = "hooks.jsonl";
pub const EVIDENCE_JOURNAL: &str = "evidence.journal";
pub const CONVERSATION: &str = "conversation.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const LEASE: &str = ".lock";

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::storage(format!("{}: {e}", path.display()))
}

/// Writes through a temporary file and a rename, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    let mut f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    match fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::new(ErrorCode::StateCorrupt, format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(path, e)),
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
    let mut buf = String::with_capacity(line.len() + 1);
    buf.push_str(line);
    buf.push('\n');
    f.write_all(buf.as_bytes()).map_err(|e| io_err(path, e))?;
    f.sync_data().map_err(|e| io_err(path, e))
}

/// Complete lines of a JSON-lines file; a torn last line (a writer died
/// mid-append) is skipped.
fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path, e)),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    complete
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::new(ErrorCode::StateCorrupt, format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredSection {
    pub draft: SectionDraft,
    pub verification: SectionVerification,
}

/// One assessment directory; implements the engine's persistence contract.
#[derive(Debug)]
pub struct AssessmentDir {
    root: PathBuf,
    id: String,
    last_seq: u64,
}

impl AssessmentDir {
    /// Creates `<parent>/<id>`; fails if it already holds a run.
    pub fn create(parent: &Path, id: &str) -> Result<Self> {
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(Error::invalid_argument(format!("'{id}' is not a valid assessment id")));
        }
        let root = parent.join(id);
        if root.join(STATE).exists() || root.join(CONFIG).exists() {
            return Err(Error::invalid_argument(format!("assessment '{id}' already exists at {}", root.display())));
        }
        for sub in ["", "sections", "digests", "transcripts"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
        }
        Self::open(&root)
    }

    /// Opens an existing directory.
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::not_found(format!("no assessment directory at {}", root.display())));
        }
        let id = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut dir = AssessmentDir { root: root.to_path_buf(), id, last_seq: 0 };
        dir.last_seq = dir.events(0)?.last().map_or(0, |e| e.seq);
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn section_file(&self, id: SectionId, ext: &str) -> PathBuf {
        self.root.join("sections").join(format!("{}.{ext}", id.as_str()))
    }

    pub fn write_plan(&self, plan: &PipelinePlan) -> Result<()> {
        write_json(&self.file(CONFIG), plan)
    }

    pub fn read_plan(&self) -> Result<PipelinePlan> {
        read_json(&self.file(CONFIG))?
            .ok_or_else(|| Error::new(ErrorCode::AssessmentIncomplete, format!("{} has no {CONFIG}", self.root.display())))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        write_atomic(&self.file(name), text.as_bytes())
    }

    pub fn stored_section(&self, id: SectionId) -> Result<Option<StoredSection>> {
        read_json(&self.section_file(id, "json"))
    }

    /// Raw journal bytes (empty when the file does not exist yet).
    pub fn journal_bytes(&self) -> Result<Vec<u8>> {
        let path = self.file(EVIDENCE_JOURNAL);
        match fs::read(&path) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(io_err(&path, e)),
        }
    }

    /// A read-only copy of the evidence store, rebuilt from the journal.
    pub fn read_store(&self, clock: Arc<dyn Clock>) -> Result<EvidenceStore> {
        let (events, _) = decode_frames(&self.journal_bytes()?)?;
        EvidenceStore::restore(self.id.clone(), None, events, Box::new(NullJournal), clock)
    }

    /// The report on record, or one assembled from the stored sections.
    pub fn current_report(&self) -> Result<Option<Report>> {
        let plan = match read_json::<PipelinePlan>(&self.file(CONFIG))? {
            Some(p) => p,
            None => return Ok(None),
        };
        let mut report = match self.load_report()? {
            Some(r) => r,
            None => Report::new(plan.assessment_id.clone(), plan.target.clone(), ""),
        };
        for slot in report.sections.iter_mut() {
            if let Some(d) = self.load_section(slot.section_id)? {
                *slot = d;
            }
        }
        Ok(Some(report))
    }
}

impl StateStore for AssessmentDir {
    fn load_state(&self) -> Result<Option<ExecutionState>> {
        read_json(&self.file(STATE))
    }

    fn save_state(&mut self, state: &ExecutionState) -> Result<()> {
        write_json(&self.file(STATE), state)
    }

    fn save_section(&mut self, draft: &SectionDraft, verification: &SectionVerification) -> Result<()> {
        let stored = StoredSection { draft: draft.clone(), verification: verification.clone() };
        write_json(&self.section_file(draft.section_id, "json"), &stored)?;
        write_atomic(&self.section_file(draft.section_id, "md"), draft.body.as_bytes())
    }

    fn load_section(&self, id: SectionId) -> Result<Option<SectionDraft>> {
        Ok(self.stored_section(id)?.map(|s| s.draft))
    }

    fn load_verification(&self, id: SectionId) -> Result<Option<SectionVerification>> {
        Ok(self.stored_section(id)?.map(|s| s.verification))
    }

    fn save_digest(&mut self, digest: &CompressedSection) -> Result<()> {
        write_json(&self.root.join("digests").join(format!("{}.json", digest.section_id.as_str())), digest)
    }

    fn load_digest(&self, id: SectionId) -> Result<Option<CompressedSection>> {
        read_json(&self.root.join("digests").join(format!("{}.json", id.as_str())))
    }

    fn save_transcript(&mut self, transcript: &Transcript) -> Result<()> {
        let dir = self.root.join("transcripts");
        let n = fs::read_dir(&dir).map_err(|e| io_err(&dir, e))?.count() + 1;
        let name = format!("{n:03}-{}-{}.json", transcript.section_id.as_str(), transcript.attempt);
        write_json(&dir.join(name), transcript)
    }

    fn transcripts(&self) -> Result<Vec<Transcript>> {
        let dir = self.root.join("transcripts");
        let mut files: Vec<PathBuf> = match fs::read_dir(&dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(&dir, e)),
        };
        files.sort();
        let mut out = Vec::with_capacity(files.len());
        for f in files {
            if let Some(t) = read_json(&f)? {
                out.push(t);
            }
        }
        Ok(out)
    }

    fn append_event(&mut self, kind: EventKind, payload: Value, at: &str) -> Result<ProgressEvent> {
        let event =
            ProgressEvent { seq: self.last_seq + 1, assessment_id: self.id.clone(), kind, payload, at: at.to_owned() };
        let file = if kind.is_hook_trace() { HOOK_TRACE } else { STATE_JOURNAL };
        append_line(&self.file(file), &serde_json::to_string(&event)?)?;
        self.last_seq = event.seq;
        Ok(event)
    }

    fn events(&self, after: u64) -> Result<Vec<ProgressEvent>> {
        let mut all: Vec<ProgressEvent> = read_lines(&self.file(STATE_JOURNAL))?;
        all.extend(read_lines::<ProgressEvent>(&self.file(HOOK_TRACE))?);
        all.retain(|e| e.seq > after);
        all.sort_by_key(|e| e.seq);
        Ok(all)
    }

    fn append_turn(&mut self, turn: &ConversationTurn) -> Result<()> {
        append_line(&self.file(CONVERSATION), &serde_json::to_string(turn)?)
    }

    fn conversation(&self) -> Result<Vec<ConversationTurn>> {
        read_lines(&self.file(CONVERSATION))
    }

    fn save_report(&mut self, report: &Report) -> Result<()> {
        write_json(&self.file(REPORT_JSON), report)
    }

    fn load_report(&self) -> Result<Option<Report>> {
        read_json(&self.file(REPORT_JSON))
    }
}

/// Appends framed store events to a file, syncing each one.
pub struct FileJournal {
    file: File,
    path: PathBuf,
}

impl FileJournal {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
        Ok(FileJournal { file, path: path.to_path_buf() })
    }
}

impl Journal for FileJournal {
    fn append(&mut self, event: &StoreEvent) -> Result<()> {
        let frame = encode_frame(event)?;
        self.file.write_all(&frame).map_err(|e| io_err(&self.path, e))?;
        self.file.sync_data().map_err(|e| io_err(&self.path, e))
    }
}

/// Byte length of the first `n` frames of `bytes`.
pub fn frames_prefix_len(bytes: &[u8], n: usize) -> usize {
    let mut pos = 0;
    for _ in 0..n {
        if pos + 4 > bytes.len() {
            break;
        }
        let len = u32::from_le_bytes([bytes[pos], bytes[pos + 1], bytes[pos + 2], bytes[pos + 3]]) as usize;
        if pos + 4 + len > bytes.len() {
            break;
        }
        pos += 4 + len;
    }
    pos
}

/// Opens the evidence store of `dir` for writing.
///
/// A torn final frame is cut off. When an unfinished run is being resumed
/// and everything journalled after the last checkpoint is research output of
/// the section that never completed, that tail is dropped as well, so the
/// section's rerun assigns the same evidence ids it did the first time.
pub fn open_store(dir: &AssessmentDir, state: Option<&ExecutionState>, clock: Arc<dyn Clock>) -> Result<EvidenceStore> {
    let path = dir.file(EVIDENCE_JOURNAL);
    let bytes = dir.journal_bytes()?;
    let (mut events, mut keep) = decode_frames(&bytes)?;
    if let Some(s) = state.filter(|s| s.status != tsa_core::state::RunStatus::Completed) {
        let pos = s.journal_position as usize;
        let orphan = |e: &StoreEvent| match e {
            StoreEvent::Put { record } => {
                record.provenance.pipeline_stage == "research"
                    && s.current.is_some_and(|c| record.provenance.invoking_agent == c.as_str())
            }
            _ => false,
        };
        if pos <= events.len() && events[pos..].iter().all(orphan) {
            events.truncate(pos);
            keep = frames_prefix_len(&bytes, pos);
        }
    }
    if keep < bytes.len() {
        let f = OpenOptions::new().write(true).open(&path).map_err(|e| io_err(&path, e))?;
        f.set_len(keep as u64).map_err(|e| io_err(&path, e))?;
        f.sync_all().map_err(|e| io_err(&path, e))?;
    }
    let journal = FileJournal::open(&path)?;
    EvidenceStore::restore(dir.id().to_owned(), None, events, Box::new(journal), clock)
}

/// Exclusive ownership of an assessment directory across processes. The
/// file holds the owner's pid; a lease whose process is gone is taken over.
#[derive(Debug)]
pub struct Lease {
    path: PathBuf,
}

fn process_alive(pid: u32) -> bool {
    Path::new("/proc").join(pid.to_string()).exists()
}

impl Lease {
    pub fn acquire(dir: &Path) -> Result<Lease> {
        let path = dir.join(LEASE);
        for _ in 0..3 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    f.write_all(std::process::id().to_string().as_bytes()).map_err(|e| io_err(&path, e))?;
                    return Ok(Lease { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let mut text = String::new();
                    if let Ok(mut f) = File::open(&path) {
                        let _ = f.read_to_string(&mut text);
                    }
                    match text.trim().parse::<u32>() {
                        Ok(pid) if pid != std::process::id() && !process_alive(pid) => {
                            let _ = fs::remove_file(&path);
                        }
                        Ok(pid) => {
                            return Err(Error::new(
                                ErrorCode::SequentialViolation,
                                format!("assessment is busy (held by process {pid})"),
                            ))
                        }
                        // Being written right now, or garbage left by a crash.
                        Err(_) if text.is_empty() => std::thread::sleep(std::time::Duration::from_millis(20)),
                        Err(_) => {
                            let _ = fs::remove_file(&path);
                        }
                    }
                }
                Err(e) => return Err(io_err(&path, e)),
            }
        }
        Err(Error::new(ErrorCode::SequentialViolation, "assessment is busy"))
    }
}

impl Drop for Lease {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Every section that has a draft on disk, in canonical order.
pub fn sections_on_disk(dir: &AssessmentDir) -> Result<Vec<SectionId>> {
    let mut out = Vec::new();
    for s in ALL_SECTIONS {
        if dir.stored_section(s)?.is_some() {
            out.push(s);
        }
    }
    Ok(out)
}
