//! Assessment sessions: plan creation, engine wiring over an assessment
//! directory, evaluation and export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::Value;
use tsa_core::backend::{Cassette, CassetteSink, ModelBackend, RecordingBackend, ReplayBackend};
use tsa_core::clock::{Clock, FixedClock};
use tsa_core::domain::{normalize_target_identifier, SectionId, ALL_SECTIONS};
use tsa_core::eval::{default_checklists, evaluate, EvalInput, EvaluationReport};
use tsa_core::evidence::EvidenceStore;
use tsa_core::gateway::Gateway;
use tsa_core::grounding::{BackendJudge, Judge};
use tsa_core::hooks::{Denylist, PipelineLock};
use tsa_core::instruction::{parse_skill, Directive, DirectiveValue, InstructionLayer, SkillModule};
use tsa_core::memory::{load_graph, DependencyGraph, ExtractiveBackend};
use tsa_core::orchestrator::{plan, user_layer, Engine, EngineOptions, PipelinePlan, RunOutcome};
use tsa_core::refinement::{ApplyOutcome, PreferenceBook, RefinementAction};
use tsa_core::report::{export, to_markdown, ExportFormat};
use tsa_core::rpc::{Loopback, ToolTransport};
use tsa_core::state::{RunStatus, StateStore};
use tsa_core::{Error, ErrorCode, Result};

use crate::config::{BackendSpec, ClockSpec, JudgeSpec, ServerKind, Settings, Source};
use crate::live::LiveBackend;
use crate::scripted::ScriptedAuthor;
use crate::store::{
    open_store, read_json, write_atomic, write_json, AssessmentDir, Lease, EVIDENCE_JOURNAL, REPORT_MD, STATE,
    STATE_JOURNAL,
};
use crate::transport::{load_corpus, HttpTransport, StdioTransport};

/// Wall-clock time in UTC.
#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> String {
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
    }

    fn millis(&self) -> u64 {
        chrono::Utc::now().timestamp_millis().max(0) as u64
    }
}

pub fn make_clock(spec: &ClockSpec) -> Arc<dyn Clock> {
    match spec {
        ClockSpec::Fixed { at } => Arc::new(FixedClock::new(at.clone())),
        ClockSpec::System => Arc::new(SystemClock),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn is_key(key: &str) -> bool {
    key.contains('.') && key.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.')
}

/// The system layer from a prompt file: `key = value` lines become
/// directives, everything else one prose block.
pub fn system_layer(text: &str, provenance: &str) -> InstructionLayer {
    let mut prose = Vec::new();
    let mut directives = Vec::new();
    for line in text.lines() {
        match line.split_once(" = ") {
            Some((k, v)) if is_key(k.trim()) && !v.trim().is_empty() => {
                directives.push(Directive::inferred(k.trim(), DirectiveValue::parse(v.trim())));
            }
            _ => prose.push(line),
        }
    }
    let mut layer = InstructionLayer::system_from_text(prose.join("\n").trim(), provenance);
    layer.directives.extend(directives);
    layer
}

const DEFAULT_SYSTEM: &str = "You are a drug-safety scientist writing one section of a target safety assessment. \
Cite every factual sentence with the [ev:N] marker of the evidence it comes from.";

pub fn load_system(settings: &Settings) -> Result<InstructionLayer> {
    match &settings.system_prompt {
        Some(p) => {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(system_layer(&read_text(p)?, &name))
        }
        None => Ok(InstructionLayer::system_from_text(DEFAULT_SYSTEM, "built-in")),
    }
}

/// `<dir>/<section>.md` for every section.
pub fn load_skills(dir: &Path) -> Result<BTreeMap<SectionId, SkillModule>> {
    let mut out = BTreeMap::new();
    for s in ALL_SECTIONS {
        let path = dir.join(format!("{}.md", s.as_str()));
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::new(ErrorCode::SkillNotFound, format!("{}: {e}", path.display())))?;
        out.insert(s, parse_skill(&text, s, &format!("skills/{}.md", s.as_str()))?);
    }
    Ok(out)
}

pub fn load_denylist(settings: &Settings) -> Result<Denylist> {
    match &settings.denylist {
        Some(p) => Ok(Denylist::parse(&read_text(p)?)),
        None => Ok(Denylist::default()),
    }
}

pub fn load_graph_setting(settings: &Settings) -> Result<DependencyGraph> {
    match &settings.graph {
        Some(g) => load_graph(g),
        None => Ok(DependencyGraph::default()),
    }
}

/// Connects to every configured server; failures become diagnostics.
pub fn connect_gateway(settings: &Settings, clock: Arc<dyn Clock>) -> Result<Gateway> {
    let mut transports: Vec<(String, Box<dyn ToolTransport>)> = Vec::new();
    let mut failures = Vec::new();
    for s in &settings.servers {
        let t: Result<Box<dyn ToolTransport>> = match &s.kind {
            ServerKind::Fixture { fixture } => load_corpus(fixture).map(|mut server| {
                Box::new(Loopback(move |f: &str| server.handle(f))) as Box<dyn ToolTransport>
            }),
            ServerKind::Stdio { command } => StdioTransport::spawn(command).map(|t| Box::new(t) as Box<dyn ToolTransport>),
            ServerKind::Http { url } => Ok(Box::new(HttpTransport::new(url.clone()))),
        };
        match t {
            Ok(t) => transports.push((s.name.clone(), t)),
            Err(e) => failures.push(format!("{}: {e}", s.name)),
        }
    }
    let mut gw = Gateway::connect(transports, &settings.domain_tags, clock)?;
    gw.diagnostics.splice(0..0, failures);
    for d in &gw.diagnostics {
        eprintln!("warning: tool server unavailable: {d}");
    }
    Ok(gw)
}

/// Writes the whole cassette to a file after every turn.
pub struct FileSink(pub PathBuf);

impl CassetteSink for FileSink {
    fn save(&mut self, cassette: &Cassette) -> Result<()> {
        write_atomic(&self.0, cassette.to_jsonl()?.as_bytes())
    }
}

pub fn read_cassette(path: &Path) -> Result<Cassette> {
    Cassette::from_jsonl(&read_text(path)?)
}

fn source_backend(source: Source) -> Result<Box<dyn ModelBackend>> {
    Ok(match source {
        Source::Live => Box::new(LiveBackend::from_env()?),
        Source::Scripted => Box::new(ScriptedAuthor),
    })
}

pub fn make_backend(spec: &BackendSpec) -> Result<Box<dyn ModelBackend>> {
    Ok(match spec {
        BackendSpec::Replay { cassette } => Box::new(ReplayBackend::new(read_cassette(cassette)?)),
        BackendSpec::Record { cassette, from } => {
            let inner = source_backend(*from)?;
            let sink = Box::new(FileSink(cassette.clone()));
            if cassette.exists() {
                Box::new(RecordingBackend::extending(inner, read_cassette(cassette)?, sink))
            } else {
                Box::new(RecordingBackend::new(inner, sink))
            }
        }
        BackendSpec::Live => source_backend(Source::Live)?,
        BackendSpec::Scripted => source_backend(Source::Scripted)?,
    })
}

pub type BoxedJudge = Box<dyn Judge + Send>;

pub fn make_judge(spec: JudgeSpec) -> Result<Option<BoxedJudge>> {
    Ok(match spec {
        JudgeSpec::Heuristic => None,
        JudgeSpec::Live => Some(Box::new(BackendJudge(LiveBackend::from_env()?))),
    })
}

/// What to assess.
#[derive(Debug, Clone, Default)]
pub struct NewAssessment {
    pub target: String,
    pub therapeutic_area: Option<String>,
    pub modality: Option<String>,
    pub species: Option<Vec<String>>,
    pub notes: Option<String>,
    /// Runtime layer-3 directives.
    pub directives: Vec<(String, String)>,
    pub id: Option<String>,
    /// Whose accepted preferences seed the user layer.
    pub actor: Option<String>,
}

pub const PREFERENCES: &str = "preferences.json";

pub fn load_preferences(assessments: &Path) -> Result<PreferenceBook> {
    Ok(read_json(&assessments.join(PREFERENCES))?.unwrap_or_default())
}

pub fn save_preferences(assessments: &Path, book: &PreferenceBook) -> Result<()> {
    fs::create_dir_all(assessments).map_err(|e| Error::storage(format!("{}: {e}", assessments.display())))?;
    write_json(&assessments.join(PREFERENCES), book)
}

/// Validates inputs and freezes them into a plan.
pub fn build_plan(settings: &Settings, req: &NewAssessment, id: &str) -> Result<PipelinePlan> {
    let target = normalize_target_identifier(&req.target)?.with_context(
        req.therapeutic_area.clone(),
        req.modality.clone(),
        req.species.clone(),
        req.notes.clone(),
    );
    let runtime: Vec<Directive> = req
        .directives
        .iter()
        .map(|(k, v)| {
            if is_key(k) {
                Ok(Directive::inferred(k.clone(), DirectiveValue::parse(v)))
            } else {
                Err(Error::invalid_argument(format!("'{k}' is not a directive key (expected namespace.name)")))
            }
        })
        .collect::<Result<_>>()?;
    let prefs = match &req.actor {
        Some(a) => load_preferences(&settings.assessments)?.overlay(a),
        None => Vec::new(),
    };
    let user = user_layer(&target, &prefs, &runtime);
    plan(
        id,
        target,
        load_system(settings)?,
        load_skills(&settings.skills)?,
        load_graph_setting(settings)?,
        user,
        serde_json::to_value(settings)?,
    )
}

/// One open assessment with everything the engine borrows.
pub struct Session {
    pub dir: AssessmentDir,
    pub plan: PipelinePlan,
    pub settings: Settings,
    pub store: EvidenceStore,
    pub gateway: Gateway,
    pub backend: Box<dyn ModelBackend>,
    pub judge: Option<BoxedJudge>,
    pub compressor: ExtractiveBackend,
    pub clock: Arc<dyn Clock>,
    pub lock: PipelineLock,
    pub denylist: Denylist,
    /// Stop after this many checkpoints (simulates a killed process).
    pub halt_after: Option<usize>,
    _lease: Lease,
}

impl Session {
    /// Plans a new assessment under `settings.assessments` and opens it.
    pub fn create(settings: &Settings, req: &NewAssessment) -> Result<Session> {
        let id = req.id.clone().unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
        let plan = build_plan(settings, req, &id)?;
        fs::create_dir_all(&settings.assessments)
            .map_err(|e| Error::storage(format!("{}: {e}", settings.assessments.display())))?;
        let dir = AssessmentDir::create(&settings.assessments, &id)?;
        let lease = Lease::acquire(dir.path())?;
        dir.write_plan(&plan)?;
        Self::wire(dir, plan, settings.clone(), lease)
    }

    /// Opens an existing assessment; `backend` replaces the recorded backend
    /// choice (e.g. a different cassette).
    pub fn open(root: &Path, backend: Option<BackendSpec>) -> Result<Session> {
        let dir = AssessmentDir::open(root)?;
        let lease = Lease::acquire(dir.path())?;
        let plan = dir.read_plan()?;
        let mut settings: Settings = serde_json::from_value(plan.config.clone())
            .map_err(|e| Error::new(ErrorCode::StateCorrupt, format!("frozen settings are unreadable: {e}")))?;
        if let Some(b) = backend {
            settings.backend = b;
        }
        Self::wire(dir, plan, settings, lease)
    }

    fn wire(dir: AssessmentDir, plan: PipelinePlan, settings: Settings, lease: Lease) -> Result<Session> {
        let clock = make_clock(&settings.clock);
        let state = dir.load_state()?;
        let store = open_store(&dir, state.as_ref(), clock.clone())?;
        let gateway = connect_gateway(&settings, clock.clone())?;
        let backend = make_backend(&settings.backend)?;
        let judge = make_judge(settings.judge)?;
        let denylist = load_denylist(&settings)?;
        Ok(Session {
            dir,
            plan,
            settings,
            store,
            gateway,
            backend,
            judge,
            compressor: ExtractiveBackend,
            clock,
            lock: PipelineLock::new(),
            denylist,
            halt_after: None,
            _lease: lease,
        })
    }

    pub fn id(&self) -> &str {
        self.dir.id()
    }

    fn with_engine<T>(&mut self, f: impl FnOnce(&mut Engine<'_>) -> Result<T>) -> Result<T> {
        let options = EngineOptions {
            budget: self.settings.budget,
            tau: self.settings.tau,
            workspace_root: self.dir.path().to_string_lossy().into_owned(),
            denylist: self.denylist.clone(),
            halt_after: self.halt_after,
        };
        let judge: Option<&mut dyn Judge> = match &mut self.judge {
            Some(j) => Some(&mut **j),
            None => None,
        };
        let mut engine = Engine {
            plan: &self.plan,
            backend: &mut *self.backend,
            compressor: &mut self.compressor,
            judge,
            gateway: &mut self.gateway,
            store: &mut self.store,
            state: &mut self.dir,
            lock: &self.lock,
            clock: &*self.clock,
            options,
        };
        f(&mut engine)
    }

    fn write_markdown(&self) -> Result<()> {
        if let Some(report) = self.dir.load_report()? {
            self.dir.write_text(REPORT_MD, &to_markdown(&report, &self.store))?;
        }
        Ok(())
    }

    fn finish(&mut self, outcome: Result<RunOutcome>) -> Result<RunOutcome> {
        let outcome = outcome?;
        if matches!(outcome, RunOutcome::Completed(_)) {
            self.write_markdown()?;
        }
        Ok(outcome)
    }

    pub fn run(&mut self) -> Result<RunOutcome> {
        let r = self.with_engine(|e| e.run());
        self.finish(r)
    }

    pub fn resume(&mut self) -> Result<RunOutcome> {
        let r = self.with_engine(|e| e.resume());
        self.finish(r)
    }

    pub fn apply(&mut self, action: &RefinementAction) -> Result<ApplyOutcome> {
        let out = self.with_engine(|e| e.apply(action))?;
        self.write_markdown()?;
        Ok(out)
    }

    pub fn status(&self) -> Result<Option<RunStatus>> {
        Ok(self.dir.load_state()?.map(|s| s.status))
    }
}

/// The id of an assessment directory under `assessments`.
pub fn assessment_path(assessments: &Path, id: &str) -> Result<PathBuf> {
    if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
        return Err(Error::invalid_argument(format!("'{id}' is not a valid assessment id")));
    }
    Ok(assessments.join(id))
}

fn settings_of(plan: &PipelinePlan) -> Option<Settings> {
    serde_json::from_value(plan.config.clone()).ok()
}

/// Scores a completed (or partly completed) assessment directory.
pub fn evaluate_all(root: &Path) -> Result<EvaluationReport> {
    let dir = AssessmentDir::open(root)?;
    for f in [STATE, STATE_JOURNAL, EVIDENCE_JOURNAL] {
        if !dir.file(f).exists() {
            return Err(Error::new(
                ErrorCode::AssessmentIncomplete,
                format!("{} has no {f}; run the pipeline first", root.display()),
            ));
        }
    }
    let plan = dir.read_plan()?;
    let settings = settings_of(&plan);
    let clock = settings.as_ref().map_or_else(|| make_clock(&ClockSpec::System), |s| make_clock(&s.clock));
    let tau = settings.as_ref().map_or(tsa_core::grounding::DEFAULT_TAU, |s| s.tau);
    let report = dir
        .current_report()?
        .ok_or_else(|| Error::new(ErrorCode::AssessmentIncomplete, "no report can be assembled"))?;
    let store = dir.read_store(clock)?;
    let events = dir.events(0)?;
    let checklists = default_checklists(&plan.skills);
    evaluate(&EvalInput { report: &report, store: &store, skills: &plan.skills, checklists: &checklists, events: &events, tau })
}

/// The report of an assessment directory in `format`.
pub fn export_dir(root: &Path, format: ExportFormat) -> Result<String> {
    let dir = AssessmentDir::open(root)?;
    let report = dir
        .current_report()?
        .ok_or_else(|| Error::new(ErrorCode::AssessmentIncomplete, format!("{} has no plan", root.display())))?;
    let clock = make_clock(&ClockSpec::System);
    let store = dir.read_store(clock)?;
    export(&report, &store, format)
}

/// Evidence record `id` of an assessment as JSON.
pub fn evidence_record(root: &Path, id: u64) -> Result<Value> {
    let dir = AssessmentDir::open(root)?;
    let store = dir.read_store(make_clock(&ClockSpec::System))?;
    Ok(serde_json::to_value(store.get(id)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tsa_core::instruction::Level;

    #[test]
    fn system_file_keys_become_directives() {
        let layer = system_layer("Be careful.\nstyle.tone = neutral\nNot a = directive\nretrieval.max_sources = 20\n", "system.md");
        assert_eq!(layer.level, Level::System);
        assert_eq!(layer.get("style.tone"), Some(&DirectiveValue::Text("neutral".into())));
        assert_eq!(layer.get("retrieval.max_sources"), Some(&DirectiveValue::Int(20)));
        let prose = layer.get("system.prompt").unwrap().to_string();
        assert!(prose.contains("Be careful.") && prose.contains("Not a = directive"));
    }

    #[test]
    fn fixture_skills_load() {
        let skills = load_skills(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/skills")).unwrap();
        assert_eq!(skills.len(), 8);
        assert_eq!(skills[&SectionId::Genetic].required_subsections.len(), 4);
    }
}
