//! The pipeline engine: eight section agents in canonical order, each in a
//! fresh conversation wrapped by the hooks, with a checkpoint after every
//! validated section.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backend::{Budget, Message, ModelBackend, ModelRequest, ModelTurn};
use crate::clock::Clock;
use crate::domain::{ProducedBy, Report, SectionDraft, SectionId, SectionStatus, TargetQuery, ALL_SECTIONS};
use crate::error::{Error, ErrorCode, Result};
use crate::evidence::EvidenceStore;
use crate::gateway::{Gateway, ToolResult};
use crate::grounding::{extract_claims, Judge, DEFAULT_TAU};
use crate::hooks::{
    post_execute, pre_execute, runtime_monitor, Denylist, HookOutcome, MonitorContext, MonitorEvent, PipelineLock,
    PostArtifacts, PostContext, PreContext,
};
use crate::instruction::{compose, ComposedPrompt, Directive, DirectiveValue, InstructionLayer, Level, SkillModule};
use crate::memory::{CompressedSection, DependencyGraph};
use crate::prelude::*;
use crate::state::{EventKind, ExecutionState, RunStatus, StateStore, Transcript};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub assessment_id: String,
    pub target: TargetQuery,
    pub sections: Vec<SectionId>,
    pub graph: DependencyGraph,
    pub skills: BTreeMap<SectionId, SkillModule>,
    pub system: InstructionLayer,
    pub user: InstructionLayer,
    /// Settings frozen at planning time; resume reuses them.
    pub config: Value,
}

/// Layer-3 directives for a target: accepted preferences, then runtime
/// directives, then the target itself, later entries replacing earlier ones.
pub fn user_layer(target: &TargetQuery, preferences: &[Directive], runtime: &[Directive]) -> InstructionLayer {
    let mut merged: BTreeMap<String, Directive> = BTreeMap::new();
    for d in preferences.iter().chain(runtime) {
        merged.insert(d.key.clone(), d.clone());
    }
    let text = |v: &str| DirectiveValue::Text(v.to_owned());
    let mut add = |key: &str, value: Option<DirectiveValue>| {
        if let Some(value) = value {
            merged.insert(key.to_owned(), Directive::inferred(key, value));
        }
    };
    add("target.identifier", Some(text(&target.identifier)));
    add(
        "target.identifier_kind",
        Some(text(serde_json::to_value(target.identifier_kind).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default().as_str())),
    );
    add("context.therapeutic_area", target.therapeutic_area.as_deref().map(text));
    add("context.modality", target.modality.as_deref().map(text));
    add("context.species", target.species_context.as_ref().map(|s| text(&s.join(", "))));
    add("context.notes", target.free_text_context.as_deref().map(text));
    let mut layer = InstructionLayer::new(Level::User, format!("target {}", target.identifier));
    layer.directives = merged.into_values().collect();
    layer
}

/// Validates inputs and freezes them into a plan.
pub fn plan(
    assessment_id: impl Into<String>,
    target: TargetQuery,
    system: InstructionLayer,
    skills: BTreeMap<SectionId, SkillModule>,
    graph: DependencyGraph,
    user: InstructionLayer,
    config: Value,
) -> Result<PipelinePlan> {
    for s in ALL_SECTIONS {
        match skills.get(&s) {
            None => return Err(Error::new(ErrorCode::SkillNotFound, format!("no skill module for {s}"))),
            Some(m) if m.domain != s => {
                return Err(Error::new(ErrorCode::SkillNotFound, format!("skill module for {s} declares {}", m.domain)))
            }
            _ => {}
        }
    }
    graph.validate()?;
    for s in ALL_SECTIONS {
        compose(&system, &skills[&s], &user)?;
    }
    Ok(PipelinePlan {
        assessment_id: assessment_id.into(),
        target,
        sections: ALL_SECTIONS.to_vec(),
        graph,
        skills,
        system,
        user,
        config,
    })
}

/// The prompt for a retry after a blocked draft.
pub fn retry_prompt(base: &str, outcome: &HookOutcome) -> String {
    let mut out = String::from(base);
    out.push_str("\n\n<<<RETRY>>>\nThe previous draft was rejected by automated checks. Fix every problem below and write the whole section again.\n");
    for v in &outcome.violations {
        out.push_str(&format!("- [{}] {}", v.code, v.message));
        if let Some(at) = &v.location {
            out.push_str(&format!(" (at {at})"));
        }
        out.push('\n');
    }
    out.push_str("<<<END RETRY>>>\n");
    out
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub budget: Budget,
    pub tau: f64,
    /// Absolute path all section outputs must stay inside.
    pub workspace_root: String,
    pub denylist: Denylist,
    /// Stop (leaving the state `running`, as a killed process would) once
    /// this many sections are checkpointed.
    pub halt_after: Option<usize>,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            budget: Budget::default(),
            tau: DEFAULT_TAU,
            workspace_root: "/".into(),
            denylist: Denylist::default(),
            halt_after: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Completed(Report),
    Halted { after: SectionId },
}

pub struct Engine<'a> {
    pub plan: &'a PipelinePlan,
    pub backend: &'a mut dyn ModelBackend,
    pub compressor: &'a mut dyn ModelBackend,
    pub judge: Option<&'a mut dyn Judge>,
    pub gateway: &'a mut Gateway,
    pub store: &'a mut EvidenceStore,
    pub state: &'a mut dyn StateStore,
    pub lock: &'a PipelineLock,
    pub clock: &'a dyn Clock,
    pub options: EngineOptions,
}

/// What a section lifecycle should produce.
pub(crate) struct Generation<'p> {
    pub section: SectionId,
    /// Appended to the composed prompt (revision context).
    pub extra: Option<String>,
    pub revision: u32,
    pub status: SectionStatus,
    /// Extra texts for the security scan.
    pub scan: &'p [String],
}

impl<'a> Engine<'a> {
    pub(crate) fn event(&mut self, kind: EventKind, payload: Value) -> Result<()> {
        self.state.append_event(kind, payload, &self.clock.now()).map(|_| ())
    }

    fn hook_event(&mut self, outcome: &HookOutcome) -> Result<()> {
        self.event(EventKind::HookVerdict, serde_json::to_value(outcome)?)
    }

    /// Digests currently on record, keyed by section.
    pub fn memory(&self) -> Result<BTreeMap<SectionId, CompressedSection>> {
        let mut out = BTreeMap::new();
        for s in ALL_SECTIONS {
            if let Some(d) = self.state.load_digest(s)? {
                out.insert(s, d);
            }
        }
        Ok(out)
    }

    pub fn composed(&self, section: SectionId) -> Result<ComposedPrompt> {
        let skill = self.plan.skills.get(&section).ok_or_else(|| Error::new(ErrorCode::SkillNotFound, format!("{section}")))?;
        compose(&self.plan.system, skill, &self.plan.user)
    }

    fn user_texts(&self) -> Vec<String> {
        self.plan.user.directives.iter().map(|d| d.value.to_string()).collect()
    }

    /// Starts a fresh run.
    pub fn run(&mut self) -> Result<RunOutcome> {
        if let Some(existing) = self.state.load_state()? {
            return Err(Error::new(
                ErrorCode::SequentialViolation,
                format!("assessment {} already has a run ({:?}); resume it instead", existing.assessment_id, existing.status),
            ));
        }
        let mut exec = ExecutionState::new(self.plan.assessment_id.clone(), &self.clock.now());
        self.state.save_state(&exec)?;
        self.drive(&mut exec)
    }

    /// Continues an interrupted (or abandoned) run from its first incomplete
    /// section; a completed run returns its stored report.
    pub fn resume(&mut self) -> Result<RunOutcome> {
        let mut exec = self
            .state
            .load_state()?
            .ok_or_else(|| Error::not_found(format!("assessment {} has no execution state", self.plan.assessment_id)))?;
        exec.validate()?;
        if exec.status == RunStatus::Completed {
            return self
                .state
                .load_report()?
                .map(RunOutcome::Completed)
                .ok_or_else(|| Error::new(ErrorCode::StateCorrupt, "completed run has no stored report; delete state.json to rerun"));
        }
        for s in &exec.completed {
            if self.state.load_digest(*s)?.is_none() || self.state.load_section(*s)?.is_none() {
                return Err(Error::new(
                    ErrorCode::StateCorrupt,
                    format!("checkpoint for {s} is missing its digest or section; delete state.json to rerun from scratch"),
                ));
            }
        }
        exec.status = RunStatus::Running;
        exec.failure = None;
        exec.updated_at = self.clock.now();
        self.state.save_state(&exec)?;
        self.drive(&mut exec)
    }

    fn drive(&mut self, exec: &mut ExecutionState) -> Result<RunOutcome> {
        while let Some(section) = exec.next_section() {
            exec.current = Some(section);
            self.state.save_state(exec)?;
            let generation =
                Generation { section, extra: None, revision: 0, status: SectionStatus::Generated, scan: &[] };
            if let Err(e) = self.generate(generation, Some(exec)) {
                exec.status = match e.code {
                    ErrorCode::StorageError | ErrorCode::StateCorrupt => RunStatus::Failed,
                    _ => RunStatus::Interrupted,
                };
                exec.current = Some(section);
                exec.failure = Some(e.clone());
                exec.updated_at = self.clock.now();
                self.state.save_state(exec)?;
                self.event(
                    EventKind::PipelineInterrupted,
                    json!({"section": section, "code": e.code, "cause": e.cause, "message": e.message}),
                )?;
                return Err(e);
            }
            if self.options.halt_after == Some(exec.completed.len()) && exec.next_section().is_some() {
                return Ok(RunOutcome::Halted { after: section });
            }
        }
        let report = self.assemble()?;
        exec.status = RunStatus::Completed;
        exec.current = None;
        exec.updated_at = self.clock.now();
        self.state.save_report(&report)?;
        self.state.save_state(exec)?;
        self.event(EventKind::PipelineCompleted, json!({"sections": report.sections.len()}))?;
        Ok(RunOutcome::Completed(report))
    }

    /// The report built from the stored sections.
    pub fn assemble(&self) -> Result<Report> {
        let now = self.clock.now();
        let mut report = Report::new(self.plan.assessment_id.clone(), self.plan.target.clone(), &now);
        for slot in report.sections.iter_mut() {
            if let Some(d) = self.state.load_section(slot.section_id)? {
                *slot = d;
            }
        }
        Ok(report)
    }

    /// One section lifecycle: pre hook, agent, post hook, one retry on a
    /// post block. The lock is held throughout.
    pub(crate) fn generate(
        &mut self,
        g: Generation<'_>,
        mut execution: Option<&mut ExecutionState>,
    ) -> Result<(SectionDraft, PostArtifacts)> {
        let section = g.section;
        let failed = |cause: &str, message: String| Error::new(ErrorCode::SectionFailed, message).with_cause(cause);
        self.event(EventKind::SectionStarted, json!({"section": section, "revision": g.revision, "millis": self.clock.millis()}))?;

        let memory = self.memory()?;
        let mut prompt = self.composed(section)?;
        let mut scan = self.user_texts();
        scan.extend(g.scan.iter().cloned());
        let output_path = format!("sections/{}.md", section.as_str());
        let (pre, bundle) = {
            let ctx = PreContext {
                section,
                user_texts: &scan,
                denylist: &self.options.denylist,
                graph: &self.plan.graph,
                memory: &memory,
                workspace_root: &self.options.workspace_root,
                output_path: &output_path,
                lock: self.lock,
            };
            pre_execute(&ctx, &mut prompt)?
        };
        self.hook_event(&pre)?;
        if pre.is_blocked() {
            let code = pre.block_code().unwrap_or("blocked").to_owned();
            return Err(failed(&code, format!("pre-execution hook blocked {section}: {}", pre.violations[0].message)));
        }

        let result = self.attempts(&g, prompt, bundle.manifest.clone(), bundle.text.clone(), &memory, execution.as_deref_mut());
        self.lock.release(section);
        let (draft, artifacts) = result?;
        self.event(
            EventKind::SectionCompleted,
            json!({
                "section": section,
                "revision": draft.revision,
                "status": draft.status,
                "claims": draft.claims.len(),
                "counts": artifacts.verification.counts,
                "millis": self.clock.millis(),
            }),
        )?;
        Ok((draft, artifacts))
    }

    fn attempts(
        &mut self,
        g: &Generation<'_>,
        prompt: ComposedPrompt,
        manifest: Vec<SectionId>,
        bundle: String,
        memory: &BTreeMap<SectionId, CompressedSection>,
        mut execution: Option<&mut ExecutionState>,
    ) -> Result<(SectionDraft, PostArtifacts)> {
        let section = g.section;
        let mut text = prompt.full_text();
        if let Some(extra) = &g.extra {
            text.push_str("\n\n");
            text.push_str(extra);
        }
        let upstream: Vec<&CompressedSection> = manifest.iter().filter_map(|s| memory.get(s)).collect();
        let skill = self.plan.skills[&section].clone();
        let mut inputs = BTreeMap::new();
        for u in self.plan.graph.transitive_upstream(section) {
            if let Some(d) = memory.get(&u) {
                inputs.insert(u, d.source_revision);
            }
        }

        for attempt in 1..=2u32 {
            let (body, messages) = match self.agent(section, &text, &upstream, skill.length_bounds()) {
                Ok(x) => x,
                Err((e, messages)) => {
                    self.save_transcript(section, attempt, &text, &manifest, &bundle, messages)?;
                    return Err(Error::new(ErrorCode::SectionFailed, format!("{section}: {}", e.message))
                        .with_cause(e.specific_code()));
                }
            };
            self.save_transcript(section, attempt, &text, &manifest, &bundle, messages)?;
            let mut draft = SectionDraft::pending(section);
            draft.body = body;
            draft.claims = extract_claims(&draft.body);
            draft.revision = g.revision;
            draft.inputs = inputs.clone();
            draft.produced_by = ProducedBy::Agent;
            draft.status = if g.status == SectionStatus::Generated {
                SectionStatus::Generated
            } else {
                g.status
            };
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
                execution: execution.as_deref_mut(),
                now: &now,
            };
            let (outcome, artifacts) = post_execute(&draft, ctx)?;
            self.hook_event(&outcome)?;
            if !outcome.is_blocked() {
                return Ok((draft, artifacts));
            }
            if attempt == 2 {
                let code = outcome.block_code().unwrap_or("blocked").to_owned();
                return Err(Error::new(
                    ErrorCode::SectionFailed,
                    format!("{section} blocked after retry: {}", outcome.violations[0].message),
                )
                .with_cause(code));
            }
            text = retry_prompt(&text, &outcome);
        }
        unreachable!("two attempts at most")
    }

    fn save_transcript(
        &mut self,
        section: SectionId,
        attempt: u32,
        prompt: &str,
        manifest: &[SectionId],
        bundle: &str,
        messages: Vec<Message>,
    ) -> Result<()> {
        self.state.save_transcript(&Transcript {
            section_id: section,
            attempt,
            prompt: prompt.to_owned(),
            injected_manifest: manifest.to_vec(),
            injected_bundle: bundle.to_owned(),
            messages,
        })
    }

    /// Runs an isolated conversation: the prompt and tool schemas are the
    /// only context.
    fn agent(
        &mut self,
        section: SectionId,
        prompt: &str,
        upstream: &[&CompressedSection],
        length_bounds: (Option<usize>, Option<usize>),
    ) -> core::result::Result<(String, Vec<Message>), (Error, Vec<Message>)> {
        let tools = self.gateway.tools_for(section);
        let budget = self.options.budget;
        let mut conversation: Vec<Message> = Vec::new();
        let mut turns = 0u32;
        let mut calls = 0u32;
        loop {
            if turns >= budget.max_turns {
                let e = Error::new(ErrorCode::BudgetExceeded, format!("{section} used all {} turns", budget.max_turns));
                return Err((e, conversation));
            }
            let request = ModelRequest {
                prompt: prompt.to_owned(),
                tool_schemas: tools.clone(),
                conversation: conversation.clone(),
                budget: Budget { max_turns: budget.max_turns - turns, max_tool_calls: budget.max_tool_calls.saturating_sub(calls) },
            };
            let turn = match self.backend.complete(&request) {
                Ok(t) => t,
                Err(e) => return Err((e, conversation)),
            };
            turns += 1;
            conversation.push(Message::Assistant { turn: turn.clone() });
            match turn {
                ModelTurn::ToolCall { tool_name, arguments } => {
                    calls += 1;
                    if calls > budget.max_tool_calls {
                        let e = Error::new(
                            ErrorCode::BudgetExceeded,
                            format!("{section} exceeded its tool-call budget of {}", budget.max_tool_calls),
                        );
                        return Err((e, conversation));
                    }
                    let result = self
                        .gateway
                        .invoke(&tool_name, &arguments, section, "research", self.store)
                        .unwrap_or_else(|e| ToolResult::failed(&tool_name, e));
                    let ev = json!({
                        "section": section,
                        "tool": tool_name,
                        "arguments": arguments,
                        "evidence_ids": result.evidence_ids,
                        "error": result.error.as_ref().map(|e| e.code),
                    });
                    if let Err(e) = self.event(EventKind::ToolInvoked, ev) {
                        return Err((e, conversation));
                    }
                    if result.error.is_none() && result.lookup.is_none() {
                        let ctx = MonitorContext { section, store: self.store, upstream: upstream.to_vec(), length_bounds };
                        let outcome = runtime_monitor(MonitorEvent::ToolResult(&result), &ctx);
                        if let Err(e) = self.hook_event(&outcome) {
                            return Err((e, conversation));
                        }
                    }
                    conversation.push(Message::Tool { tool_name, content: result.render() });
                }
                ModelTurn::FinalText { text } => {
                    let ctx = MonitorContext { section, store: self.store, upstream: upstream.to_vec(), length_bounds };
                    let outcome = runtime_monitor(MonitorEvent::PartialText(&text), &ctx);
                    if let Err(e) = self.hook_event(&outcome) {
                        return Err((e, conversation));
                    }
                    return Ok((text, conversation));
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use alloc::sync::Arc;

    use crate::backend::FnBackend;
    use crate::clock::FixedClock;
    use crate::domain::normalize_target_identifier;
    use crate::evidence::NullJournal;
    use crate::fixture::{FixtureCorpus, FixtureServer};
    use crate::instruction::parse_skill;
    use crate::memory::ExtractiveBackend;
    use crate::rpc::{Loopback, ToolTransport};
    use crate::state::MemoryStateStore;

    pub fn skills() -> BTreeMap<SectionId, SkillModule> {
        ALL_SECTIONS
            .iter()
            .map(|&s| {
                let text = format!(
                    "---\ndomain: {s}\nversion: 1\nrequired_subsections: Overview; Findings\nquality.min_words = 5\n---\nBe precise.\n"
                );
                (s, parse_skill(&text, s, "inline").unwrap())
            })
            .collect()
    }

    pub fn gateway() -> Gateway {
        let corpus: FixtureCorpus = serde_json::from_value(json!({
            "server": "lit", "version": "1",
            "tool": {"name": "pubmed_search", "description": "search",
                     "parameters": [{"name": "query", "type": "string", "required": true}]},
            "select": [{"field": "gene", "param": "query"}],
            "rows": [
                {"gene": "TP53", "title": "TP53 loss in 12 tumours", "source_database": "PubMed"},
                {"gene": "TP53", "title": "TP53 variant burden 3 studies", "source_database": "PubMed"}
            ]
        }))
        .unwrap();
        let mut server = FixtureServer::new(corpus).unwrap();
        let t: Box<dyn ToolTransport> = Box::new(Loopback(move |f: &str| server.handle(f)));
        Gateway::connect(vec![("lit".into(), t)], &BTreeMap::new(), Arc::new(FixedClock::default())).unwrap()
    }

    pub fn test_plan() -> PipelinePlan {
        let target = normalize_target_identifier("TP53").unwrap();
        let user = user_layer(&target, &[], &[]);
        plan(
            "asm-1",
            target,
            InstructionLayer::system_from_text("You write safety sections.", "system.md"),
            skills(),
            DependencyGraph::default(),
            user,
            json!({}),
        )
        .unwrap()
    }

    /// Calls the search tool once, then cites every returned id; `cite`
    /// overrides the cited id.
    pub fn author(cite: Option<u64>) -> impl FnMut(&ModelRequest) -> Result<ModelTurn> + Send {
        move |req: &ModelRequest| {
            if req.turn_index() == 0 {
                return Ok(ModelTurn::ToolCall { tool_name: "pubmed_search".into(), arguments: json!({"query": "TP53"}) });
            }
            let ids: Vec<u64> = match &req.conversation[1] {
                Message::Tool { content, .. } => {
                    let v: Value = serde_json::from_str(content).unwrap();
                    v["records"].as_array().map(|r| r.iter().filter_map(|x| x["evidence_id"].as_u64()).collect()).unwrap_or_default()
                }
                _ => Vec::new(),
            };
            let id = cite.unwrap_or_else(|| ids.first().copied().unwrap_or(1));
            Ok(ModelTurn::FinalText {
                text: format!("### Overview\nTP53 loss in 12 tumours [ev:{id}].\n\n### Findings\nTP53 variant burden 3 studies [ev:{}].\n", ids.last().copied().unwrap_or(id)),
            })
        }
    }

    fn run_with(
        backend: &mut dyn ModelBackend,
        state: &mut MemoryStateStore,
        options: EngineOptions,
        resume: bool,
    ) -> (Result<RunOutcome>, usize) {
        let p = test_plan();
        let mut gw = gateway();
        let mut store = EvidenceStore::new("asm-1", Box::new(NullJournal), Arc::new(FixedClock::default()));
        let lock = PipelineLock::new();
        let clock = FixedClock::default();
        let mut compressor = ExtractiveBackend;
        let mut engine = Engine {
            plan: &p,
            backend,
            compressor: &mut compressor,
            judge: None,
            gateway: &mut gw,
            store: &mut store,
            state,
            lock: &lock,
            clock: &clock,
            options,
        };
        let r = if resume { engine.resume() } else { engine.run() };
        (r, store.len())
    }

    #[test]
    fn full_run_generates_eight_sections() {
        let mut state = MemoryStateStore::new("asm-1");
        let (r, evidence) = run_with(&mut FnBackend(author(None)), &mut state, EngineOptions::default(), false);
        let RunOutcome::Completed(report) = r.unwrap() else { panic!("halted") };
        assert_eq!(evidence, 16);
        assert!(report.is_canonically_ordered());
        assert!(report.sections.iter().all(|s| s.status == SectionStatus::Generated));
        assert_eq!(state.state.as_ref().unwrap().status, RunStatus::Completed);
        let kinds: Vec<EventKind> = state
            .events
            .iter()
            .map(|e| e.kind)
            .filter(|k| matches!(k, EventKind::SectionStarted | EventKind::SectionCompleted | EventKind::PipelineCompleted))
            .collect();
        let mut expected = Vec::new();
        for _ in 0..8 {
            expected.extend([EventKind::SectionStarted, EventKind::SectionCompleted]);
        }
        expected.push(EventKind::PipelineCompleted);
        assert_eq!(kinds, expected);
        let seqs: Vec<u64> = state.events.iter().map(|e| e.seq).collect();
        assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1));
        let ir = report.section(SectionId::IntegratedRisk).unwrap();
        assert_eq!(ir.inputs.len(), 5);
    }

    #[test]
    fn transcripts_are_isolated() {
        let mut state = MemoryStateStore::new("asm-1");
        run_with(&mut FnBackend(author(None)), &mut state, EngineOptions::default(), false).0.unwrap();
        for t in &state.transcripts {
            let others: Vec<&Transcript> = state.transcripts.iter().filter(|o| o.section_id != t.section_id).collect();
            for m in &t.messages {
                for o in &others {
                    assert!(!o.messages.contains(m) || matches!(m, Message::Assistant { turn: ModelTurn::ToolCall { .. } }));
                }
            }
            assert_eq!(t.injected_manifest.is_empty(), t.section_id.kind() == crate::domain::SectionKind::Research);
        }
    }

    #[test]
    fn hallucinated_citation_interrupts_after_retry() {
        let mut state = MemoryStateStore::new("asm-1");
        let (r, _) = run_with(&mut FnBackend(author(Some(999))), &mut state, EngineOptions::default(), false);
        let e = r.unwrap_err();
        assert_eq!((e.code, e.cause.as_deref()), (ErrorCode::SectionFailed, Some("hallucinated-citation")));
        let s = state.state.as_ref().unwrap();
        assert_eq!(s.status, RunStatus::Interrupted);
        assert_eq!(s.current, Some(SectionId::Genetic));
        assert!(s.completed.is_empty());
        assert_eq!(state.transcripts.len(), 2);
        assert!(state.transcripts[1].prompt.contains("<<<RETRY>>>"));
        assert_eq!(state.events.last().unwrap().kind, EventKind::PipelineInterrupted);
    }

    #[test]
    fn tool_budget_exceeded_fails_section() {
        let mut state = MemoryStateStore::new("asm-1");
        let greedy = |_: &ModelRequest| {
            Ok(ModelTurn::ToolCall { tool_name: "pubmed_search".into(), arguments: json!({"query": "TP53"}) })
        };
        let options = EngineOptions { budget: Budget { max_turns: 12, max_tool_calls: 1 }, ..Default::default() };
        let e = run_with(&mut FnBackend(greedy), &mut state, options, false).0.unwrap_err();
        assert_eq!(e.cause.as_deref(), Some("budget-exceeded"));
    }

    #[test]
    fn halt_and_resume_match_uninterrupted_run() {
        let mut golden_state = MemoryStateStore::new("asm-1");
        let RunOutcome::Completed(golden) =
            run_with(&mut FnBackend(author(None)), &mut golden_state, EngineOptions::default(), false).0.unwrap()
        else {
            panic!()
        };
        for k in 1..8 {
            let mut state = MemoryStateStore::new("asm-1");
            let options = EngineOptions { halt_after: Some(k), ..Default::default() };
            let r = run_with(&mut FnBackend(author(None)), &mut state, options, false).0.unwrap();
            assert_eq!(r, RunOutcome::Halted { after: ALL_SECTIONS[k - 1] });
            assert_eq!(state.state.as_ref().unwrap().status, RunStatus::Running);
            // The evidence store below restarts empty; a real resume replays
            // the journal. Sections only cite ids they just retrieved, so the
            // renumbering does not matter for this author.
            let r = run_with(&mut FnBackend(author(None)), &mut state, EngineOptions::default(), true).0;
            let RunOutcome::Completed(report) = r.unwrap() else { panic!() };
            assert_eq!(report.sections.len(), golden.sections.len());
            for (a, b) in report.sections.iter().zip(&golden.sections) {
                assert_eq!(a.section_id, b.section_id);
                assert_eq!(a.body.replace(|c: char| c.is_ascii_digit(), ""), b.body.replace(|c: char| c.is_ascii_digit(), ""));
            }
        }
    }

    #[test]
    fn resume_edge_cases() {
        let mut state = MemoryStateStore::new("asm-1");
        let RunOutcome::Completed(first) =
            run_with(&mut FnBackend(author(None)), &mut state, EngineOptions::default(), false).0.unwrap()
        else {
            panic!()
        };
        let events = state.events.len();
        let never = |_: &ModelRequest| -> Result<ModelTurn> { panic!("no execution expected") };
        let again = run_with(&mut FnBackend(never), &mut state, EngineOptions::default(), true).0.unwrap();
        assert_eq!(again, RunOutcome::Completed(first));
        assert_eq!(state.events.len(), events);

        let mut state = MemoryStateStore::new("asm-1");
        let options = EngineOptions { halt_after: Some(2), ..Default::default() };
        run_with(&mut FnBackend(author(None)), &mut state, options, false).0.unwrap();
        state.digests.remove(&SectionId::Transcriptomic);
        let e = run_with(&mut FnBackend(author(None)), &mut state, EngineOptions::default(), true).0.unwrap_err();
        assert_eq!(e.code, ErrorCode::StateCorrupt);
    }

    #[test]
    fn plan_checks_skills_and_is_deterministic() {
        let target = normalize_target_identifier("TP53").unwrap();
        let mut sk = skills();
        sk.remove(&SectionId::Clinical);
        let e = plan("x", target.clone(), InstructionLayer::new(Level::System, "s"), sk, DependencyGraph::default(), user_layer(&target, &[], &[]), json!({}))
            .unwrap_err();
        assert_eq!(e.code, ErrorCode::SkillNotFound);
        let mut a = test_plan();
        let mut b = test_plan();
        a.assessment_id.clear();
        b.assessment_id.clear();
        assert_eq!(a, b);
        assert_eq!(a.sections, ALL_SECTIONS);
    }

    #[test]
    fn user_layer_precedence() {
        let target = normalize_target_identifier("TP53").unwrap();
        let pref = [Directive::inferred("retrieval.max_sources", DirectiveValue::Int(5))];
        let runtime = [Directive::inferred("retrieval.max_sources", DirectiveValue::Int(9))];
        let layer = user_layer(&target, &pref, &runtime);
        assert_eq!(layer.get("retrieval.max_sources"), Some(&DirectiveValue::Int(9)));
        assert_eq!(layer.get("target.identifier"), Some(&DirectiveValue::Text("TP53".into())));
        let layer = user_layer(&target, &pref, &[]);
        assert_eq!(layer.get("retrieval.max_sources"), Some(&DirectiveValue::Int(5)));
    }
}
