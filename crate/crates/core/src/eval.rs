//! Report evaluation: factual consistency (D1), evidence completeness (D2),
//! structural alignment (D3), evidence traceability (D4) and workflow
//! efficiency counters. Scores are reported separately and never combined.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{Report, SectionId, SectionKind, ALL_SECTIONS, RESEARCH_SECTIONS};
use crate::error::{Error, Result};
use crate::evidence::{EvidenceRecord, EvidenceStore};
use crate::grounding::{verify_section, CategoryCounts, Category, Judge};
use crate::hooks::{headings, missing_subsections};
use crate::instruction::SkillModule;
use crate::prelude::*;
use crate::state::{EventKind, ProgressEvent};
use crate::text::word_count;

pub const SCHEMA_VERSION: &str = "1.0";

pub const CLINICAL_TAG: &str = "<!-- evidence:clinical -->";
pub const PRECLINICAL_TAG: &str = "<!-- evidence:preclinical -->";

pub const HEDGING_LEXICON: &[&str] = &[
    "may", "might", "could", "suggests", "suggest", "likely", "unlikely", "possibly", "possible", "potential",
    "potentially", "appears", "uncertain", "unclear", "limited evidence",
];

/// One expected sub-topic: matched by a heading with its name or by any
/// keyword group whose terms all occur in the body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChecklistItem {
    pub name: String,
    #[serde(default)]
    pub keyword_groups: Vec<Vec<String>>,
}

impl ChecklistItem {
    pub fn heading_only(name: &str) -> Self {
        ChecklistItem { name: name.to_owned(), keyword_groups: Vec::new() }
    }

    fn matches(&self, body: &str, heads: &[String]) -> bool {
        let lower = body.to_lowercase();
        heads.contains(&self.name.trim().to_lowercase())
            || self.keyword_groups.iter().any(|g| !g.is_empty() && g.iter().all(|k| lower.contains(&k.to_lowercase())))
    }
}

pub type Checklists = BTreeMap<SectionId, Vec<ChecklistItem>>;

/// The genetic checklist, four sub-topics.
pub fn genetic_checklist() -> Vec<ChecklistItem> {
    let g = |terms: &[&str]| terms.iter().map(|t| (*t).to_owned()).collect::<Vec<_>>();
    vec![
        ChecklistItem { name: "GWAS signals".into(), keyword_groups: vec![g(&["gwas"]), g(&["genome-wide association"])] },
        ChecklistItem { name: "Rare variant burden".into(), keyword_groups: vec![g(&["rare variant", "burden"])] },
        ChecklistItem { name: "Knockout phenotype".into(), keyword_groups: vec![g(&["knockout", "phenotype"])] },
        ChecklistItem {
            name: "Loss-of-function carriers".into(),
            keyword_groups: vec![g(&["loss-of-function", "carrier"]), g(&["lof", "carrier"])],
        },
    ]
}

/// Genetic defaults plus one heading item per required subsection of the
/// other research domains.
pub fn default_checklists(skills: &BTreeMap<SectionId, SkillModule>) -> Checklists {
    let mut out = BTreeMap::new();
    out.insert(SectionId::Genetic, genetic_checklist());
    for s in RESEARCH_SECTIONS.iter().filter(|s| **s != SectionId::Genetic) {
        if let Some(skill) = skills.get(s) {
            out.insert(*s, skill.required_subsections.iter().map(|r| ChecklistItem::heading_only(r)).collect());
        }
    }
    out
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct D1Scores {
    pub counts: CategoryCounts,
    /// Contradicted plus citing-invalidated claims.
    pub contradicted_total: usize,
    pub consistency: f64,
    pub per_section: BTreeMap<SectionId, CategoryCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct D2Domain {
    pub coverage: f64,
    pub matched: Vec<String>,
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct D3Section {
    pub headings_fraction: f64,
    pub conformance: f64,
    /// `None` unless the section carries both clinical and preclinical blocks.
    pub priority_ok: Option<bool>,
    pub hedged: bool,
    pub within_length: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct D3Scores {
    pub inversions: usize,
    pub order_factor: f64,
    pub conformance: f64,
    pub per_section: BTreeMap<SectionId, D3Section>,
    /// Share of sections using hedging language; advisory only.
    pub hedging_advisory: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct D4Scores {
    pub traceable: usize,
    pub total: usize,
    pub traceability: f64,
    pub untraceable: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionEfficiency {
    pub revisions: u32,
    pub wall_clock_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub per_section: BTreeMap<SectionId, SectionEfficiency>,
    pub refinement_actions: usize,
    pub total_revisions: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: String,
    pub target: String,
    pub d1: D1Scores,
    pub d2: BTreeMap<SectionId, D2Domain>,
    pub d3: D3Scores,
    pub d4: D4Scores,
    pub efficiency: Efficiency,
}

pub fn evaluate_d1(report: &Report, store: &EvidenceStore, mut judge: Option<&mut dyn Judge>, tau: f64) -> D1Scores {
    let mut counts = CategoryCounts::default();
    let mut per_section = BTreeMap::new();
    for s in report.sections.iter().filter(|s| s.status.has_content()) {
        let v = match &mut judge {
            Some(j) => verify_section(s, store, Some(&mut **j), tau),
            None => verify_section(s, store, None, tau),
        };
        counts.merge(&v.counts);
        per_section.insert(s.section_id, v.counts);
    }
    D1Scores {
        counts,
        contradicted_total: counts.contradicted + counts.citing_invalidated,
        consistency: ratio(counts.supported, counts.total()),
        per_section,
    }
}

pub fn evaluate_d2(report: &Report, checklists: &Checklists) -> Result<BTreeMap<SectionId, D2Domain>> {
    let mut out = BTreeMap::new();
    for s in RESEARCH_SECTIONS {
        let items =
            checklists.get(&s).ok_or_else(|| Error::config(format!("no completeness checklist for {s}")))?;
        let body = report.section(s).filter(|d| d.status.has_content()).map(|d| d.body.as_str());
        let (matched, missing): (Vec<&ChecklistItem>, Vec<&ChecklistItem>) = match body {
            Some(b) => {
                let heads = headings(b);
                items.iter().partition(|i| i.matches(b, &heads))
            }
            None => (Vec::new(), items.iter().collect()),
        };
        let coverage = if items.is_empty() { 1.0 } else if body.is_none() { 0.0 } else { ratio(matched.len(), items.len()) };
        out.insert(
            s,
            D2Domain {
                coverage,
                matched: matched.iter().map(|i| i.name.clone()).collect(),
                missing: missing.iter().map(|i| i.name.clone()).collect(),
            },
        );
    }
    Ok(out)
}

/// Pairs out of canonical order among the report's sections.
pub fn inversions(order: &[SectionId]) -> usize {
    let mut n = 0;
    for i in 0..order.len() {
        for j in i + 1..order.len() {
            if order[i].index() > order[j].index() {
                n += 1;
            }
        }
    }
    n
}

fn contains_word(lower: &str, term: &str) -> bool {
    let mut from = 0;
    while let Some(p) = lower[from..].find(term) {
        let at = from + p;
        let before = lower[..at].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
        let after = lower[at + term.len()..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        if before && after {
            return true;
        }
        from = at + term.len();
    }
    false
}

pub fn evaluate_d3(report: &Report, skills: &BTreeMap<SectionId, SkillModule>) -> D3Scores {
    let order: Vec<SectionId> = report.sections.iter().map(|s| s.section_id).collect();
    let inv = inversions(&order);
    let n = ALL_SECTIONS.len();
    let max = n * (n - 1) / 2;
    let order_factor = 1.0 - inv as f64 / max as f64;
    let mut per_section = BTreeMap::new();
    for s in &report.sections {
        let required: &[String] = skills.get(&s.section_id).map_or(&[], |k| &k.required_subsections);
        let present = if s.status.has_content() { required.len() - missing_subsections(&s.body, required).len() } else { 0 };
        let headings_fraction = if !s.status.has_content() { 0.0 } else { ratio(present, required.len()) };
        let clinical = s.body.find(CLINICAL_TAG);
        let preclinical = s.body.find(PRECLINICAL_TAG);
        let priority_ok = match (clinical, preclinical) {
            (Some(c), Some(p)) => Some(c < p),
            _ => None,
        };
        let lower = s.body.to_lowercase();
        let hedged = HEDGING_LEXICON.iter().any(|t| contains_word(&lower, t));
        let within_length = skills.get(&s.section_id).and_then(|k| {
            let (min, max) = k.length_bounds();
            if min.is_none() && max.is_none() {
                return None;
            }
            let w = word_count(&s.body);
            Some(min.is_none_or(|m| w >= m) && max.is_none_or(|m| w <= m))
        });
        per_section.insert(
            s.section_id,
            D3Section { headings_fraction, conformance: order_factor * headings_fraction, priority_ok, hedged, within_length },
        );
    }
    let conformance = if per_section.is_empty() {
        1.0
    } else {
        per_section.values().map(|v| v.conformance).sum::<f64>() / per_section.len() as f64
    };
    let with_content: Vec<_> = report.sections.iter().filter(|s| s.status.has_content()).collect();
    let hedging_advisory =
        ratio(with_content.iter().filter(|s| per_section[&s.section_id].hedged).count(), with_content.len());
    D3Scores { inversions: inv, order_factor, conformance, per_section, hedging_advisory }
}

/// Aggregator records declare `primary_source`; an empty one is not a
/// primary source.
pub fn is_primary_less_aggregator(record: &EvidenceRecord) -> bool {
    match record.payload.get("primary_source") {
        None => false,
        Some(Value::Null) => true,
        Some(Value::String(s)) => s.trim().is_empty(),
        Some(Value::Array(a)) => a.is_empty(),
        Some(_) => false,
    }
}

/// A citation id that resolves to a live, primary-sourced record.
pub fn is_traceable_citation(store: &EvidenceStore, id: u64) -> bool {
    store.get(id).is_ok_and(|r| !r.invalidated && !is_primary_less_aggregator(r))
}

pub fn evaluate_d4(report: &Report, store: &EvidenceStore) -> D4Scores {
    let mut traceable = 0;
    let mut total = 0;
    let mut untraceable = Vec::new();
    for s in report.sections.iter().filter(|s| s.status.has_content()) {
        for c in &s.claims {
            total += 1;
            if c.citation_ids.iter().any(|id| is_traceable_citation(store, *id)) {
                traceable += 1;
            } else {
                untraceable.push(format!("{}: {}", s.section_id, c.text));
            }
        }
    }
    D4Scores { traceable, total, traceability: ratio(traceable, total), untraceable }
}

pub fn efficiency(report: &Report, events: &[ProgressEvent]) -> Efficiency {
    let mut started: BTreeMap<SectionId, u64> = BTreeMap::new();
    let mut wall: BTreeMap<SectionId, u64> = BTreeMap::new();
    let section_of = |e: &ProgressEvent| e.payload.get("section").and_then(|v| serde_json::from_value::<SectionId>(v.clone()).ok());
    let millis = |e: &ProgressEvent| e.payload.get("millis").and_then(Value::as_u64).unwrap_or(0);
    let mut refinement_actions = 0;
    for e in events {
        match e.kind {
            EventKind::SectionStarted => {
                if let Some(s) = section_of(e) {
                    started.insert(s, millis(e));
                }
            }
            EventKind::SectionCompleted => {
                if let Some(s) = section_of(e) {
                    let d = millis(e).saturating_sub(started.get(&s).copied().unwrap_or(0));
                    *wall.entry(s).or_default() += d;
                }
            }
            EventKind::RefinementApplied => refinement_actions += 1,
            _ => {}
        }
    }
    let per_section: BTreeMap<SectionId, SectionEfficiency> = report
        .sections
        .iter()
        .map(|s| (s.section_id, SectionEfficiency { revisions: s.revision, wall_clock_ms: wall.get(&s.section_id).copied().unwrap_or(0) }))
        .collect();
    let total_revisions = per_section.values().map(|e| e.revisions).sum();
    Efficiency { per_section, refinement_actions, total_revisions }
}

pub struct EvalInput<'a> {
    pub report: &'a Report,
    pub store: &'a EvidenceStore,
    pub skills: &'a BTreeMap<SectionId, SkillModule>,
    pub checklists: &'a Checklists,
    pub events: &'a [ProgressEvent],
    pub tau: f64,
}

/// All four dimensions plus efficiency, with the heuristic judge.
pub fn evaluate(input: &EvalInput<'_>) -> Result<EvaluationReport> {
    Ok(EvaluationReport {
        schema_version: SCHEMA_VERSION.into(),
        target: input.report.target.identifier.clone(),
        d1: evaluate_d1(input.report, input.store, None, input.tau),
        d2: evaluate_d2(input.report, input.checklists)?,
        d3: evaluate_d3(input.report, input.skills),
        d4: evaluate_d4(input.report, input.store),
        efficiency: efficiency(input.report, input.events),
    })
}

/// Terminal table of the headline numbers.
pub fn render_summary(e: &EvaluationReport) -> String {
    let mut out = format!("Evaluation of {} (schema {})\n", e.target, e.schema_version);
    let c = &e.d1.counts;
    out.push_str(&format!(
        "D1 factual consistency   {:.3}  ({} claims: {} supported, {} unsupported, {} contradicted, {} hallucinated, {} citing invalidated)\n",
        e.d1.consistency,
        c.total(),
        c.supported,
        c.unsupported,
        c.contradicted,
        c.hallucinated,
        c.citing_invalidated
    ));
    for (s, d) in &e.d2 {
        out.push_str(&format!("D2 completeness {:<22} {:.3}\n", s.as_str(), d.coverage));
    }
    out.push_str(&format!(
        "D3 structure conformance {:.3}  (order factor {:.3}, {} inversions, hedging advisory {:.3})\n",
        e.d3.conformance, e.d3.order_factor, e.d3.inversions, e.d3.hedging_advisory
    ));
    for (s, d) in e.d3.per_section.iter().filter(|(_, d)| d.priority_ok.is_some()) {
        out.push_str(&format!(
            "D3 evidence priority {:<17} {}\n",
            s.as_str(),
            if d.priority_ok == Some(true) { "pass" } else { "fail" }
        ));
    }
    out.push_str(&format!("D4 traceability          {:.3}  ({}/{})\n", e.d4.traceability, e.d4.traceable, e.d4.total));
    out.push_str(&format!(
        "Efficiency: {} revisions, {} refinement actions\n",
        e.efficiency.total_revisions, e.efficiency.refinement_actions
    ));
    out
}

/// Category of each claim, for partition checks.
pub fn claim_categories(report: &Report, store: &EvidenceStore, tau: f64) -> Vec<Category> {
    report
        .sections
        .iter()
        .filter(|s| s.status.has_content())
        .flat_map(|s| verify_section(s, store, None, tau).claims.into_iter().map(|c| c.verdict.category))
        .collect()
}

/// Research sections in the report that lack content.
pub fn missing_research(report: &Report) -> Vec<SectionId> {
    RESEARCH_SECTIONS
        .iter()
        .copied()
        .filter(|s| !report.section(*s).is_some_and(|d| d.status.has_content()))
        .filter(|s| s.kind() == SectionKind::Research)
        .collect()
}
