//! Builds assessment directories from the hand-labelled evaluation fixture.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use serde_json::{json, Value};
use tsa::config::{BackendSpec, ClockSpec, Overrides, Settings};
use tsa::runner::{build_plan, NewAssessment};
use tsa::store::{open_store, AssessmentDir};
use tsa_core::clock::FixedClock;
use tsa_core::domain::{ProducedBy, SectionDraft, SectionId, SectionStatus, ALL_SECTIONS};
use tsa_core::evidence::Provenance;
use tsa_core::grounding::{extract_claims, verify_section, DEFAULT_TAU};
use tsa_core::state::{EventKind, ExecutionState, RunStatus, StateStore};

#[derive(Debug, Deserialize)]
pub struct Record {
    pub agent: String,
    pub tool: String,
    pub database: String,
    pub payload: Value,
    #[serde(default)]
    pub invalidated: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct ClaimLabel {
    pub section: SectionId,
    pub starts: String,
    pub category: String,
    pub traceable: bool,
}

#[derive(Debug, Deserialize)]
pub struct Labels {
    pub claims: Vec<ClaimLabel>,
    pub genetic_coverage: BTreeMap<String, f64>,
    pub priority: BTreeMap<SectionId, bool>,
}

#[derive(Debug, Deserialize)]
pub struct Labelled {
    pub assessment_id: String,
    pub target: String,
    pub retrieved_at: String,
    pub records: Vec<Record>,
    pub sections: BTreeMap<SectionId, String>,
    pub genetic_variants: BTreeMap<String, Option<String>>,
    pub labels: Labels,
}

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn load() -> Labelled {
    let text = std::fs::read_to_string(fixtures().join("eval/labelled.json")).expect("labelled fixture");
    serde_json::from_str(&text).expect("labelled fixture parses")
}

/// The case names in a fixed order: the main fixture first.
pub fn cases(l: &Labelled) -> Vec<String> {
    let mut out = vec![l.assessment_id.clone()];
    out.extend(l.genetic_variants.keys().cloned());
    out
}

/// Writes case `case` under `parent` and returns its directory. Any case
/// other than the main one swaps in a genetic variant body (`null` leaves
/// the section without content).
pub fn materialize(l: &Labelled, case: &str, parent: &Path) -> PathBuf {
    let overrides =
        Overrides { fixtures: Some(fixtures()), assessments: Some(parent.to_path_buf()), ..Default::default() };
    let mut settings = Settings::resolve(None, &overrides).expect("settings");
    settings.backend = BackendSpec::Scripted;
    settings.clock = ClockSpec::Fixed { at: l.retrieved_at.clone() };
    let req = NewAssessment { target: l.target.clone(), id: Some(case.to_owned()), ..Default::default() };
    let plan = build_plan(&settings, &req, case).expect("plan");
    let mut dir = AssessmentDir::create(parent, case).expect("assessment dir");
    dir.write_plan(&plan).expect("plan written");

    let clock = Arc::new(FixedClock::new(l.retrieved_at.clone()));
    let mut store = open_store(&dir, None, clock).expect("store");
    for r in &l.records {
        let provenance = Provenance {
            invoking_agent: r.agent.clone(),
            tool_name: r.tool.clone(),
            query: json!({"target": l.target}),
            pipeline_stage: "research".into(),
            source_database: r.database.clone(),
            retrieved_at: l.retrieved_at.clone(),
        };
        let rec = store.put(provenance, r.payload.clone()).expect("put");
        if let Some(reason) = &r.invalidated {
            store.invalidate(rec.id, reason).expect("invalidate");
        }
    }

    let at = l.retrieved_at.as_str();
    let mut state = ExecutionState::new(case, at);
    let mut millis = 0u64;
    for s in ALL_SECTIONS {
        let body = if s == SectionId::Genetic && case != l.assessment_id {
            l.genetic_variants[case].clone()
        } else {
            l.sections.get(&s).cloned()
        };
        dir.append_event(EventKind::SectionStarted, json!({"section": s, "millis": millis}), at).unwrap();
        millis += 100 * (s.index() as u64 + 1);
        if let Some(body) = body {
            let mut draft = SectionDraft::pending(s);
            draft.claims = extract_claims(&body);
            draft.body = body;
            draft.status = SectionStatus::Generated;
            draft.produced_by = ProducedBy::Agent;
            let verification = verify_section(&draft, &store, None, DEFAULT_TAU);
            dir.save_section(&draft, &verification).unwrap();
        }
        dir.append_event(EventKind::SectionCompleted, json!({"section": s, "millis": millis}), at).unwrap();
        state.completed.push(s);
    }
    state.journal_position = store.events_applied();
    state.status = RunStatus::Completed;
    dir.save_state(&state).unwrap();
    dir.path().to_path_buf()
}
