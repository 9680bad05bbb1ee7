//! A deterministic section author that reads only what a real model would
//! see: its prompt, the tool schemas and the tool results of its own
//! conversation. Used to record the golden cassette and for offline runs.
//!
//! Research sections call a fixed set of tools and then write one cited
//! sentence per retrieved record under the subsection the record belongs
//! to. Synthesis sections make no calls and work from the injected digests.

use std::collections::BTreeMap;

use serde_json::{json, Value};
use tsa_core::backend::{Message, ModelBackend, ModelRequest, ModelTurn};
use tsa_core::domain::{SectionId, SectionKind, RESEARCH_SECTIONS};
use tsa_core::eval::{CLINICAL_TAG, PRECLINICAL_TAG};
use tsa_core::memory::{BUNDLE_CLOSE, BUNDLE_OPEN};
use tsa_core::{Error, ErrorCode, Result};

#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedAuthor;

/// Instruction fragment that makes a knockout-phenotype revision add the
/// allele description.
pub const EXPAND_KNOCKOUT: &str = "expand knockout phenotype coverage";

const REQUIRED_PREFIX: &str = "Required subsections (use a '### ' heading for each): ";

/// Keyword, liability, severity.
const LIABILITIES: &[(&str, &str, &str)] = &[
    ("thrombocytopenia", "thrombocytopenia", "high"),
    ("febrile neutropenia", "febrile neutropenia", "high"),
    ("intestinal crypts", "intestinal crypt apoptosis", "moderate"),
    ("spontaneous tumours", "spontaneous tumour formation", "high"),
    ("premature ageing", "premature ageing", "moderate"),
];

fn script_error(message: impl Into<String>) -> Error {
    Error::new(ErrorCode::BackendUnavailable, message)
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let end = text[start..].find(close)? + start;
    Some(&text[start..end])
}

fn section_of(prompt: &str) -> Result<SectionId> {
    let raw = between(prompt, "| skill ", "@").ok_or_else(|| script_error("prompt names no skill"))?;
    raw.trim().parse()
}

fn target_of(prompt: &str) -> String {
    between(prompt, "target.identifier = ", "\n")
        .map(|t| t.split_whitespace().next().unwrap_or_default().to_owned())
        .unwrap_or_default()
}

fn required_of(prompt: &str) -> Vec<String> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(REQUIRED_PREFIX))
        .map(|rest| rest.split(';').map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect())
        .unwrap_or_default()
}

fn instruction_of(prompt: &str) -> Option<&str> {
    between(prompt, "<<<REVISION INSTRUCTION>>>\n", "\n<<<END REVISION INSTRUCTION>>>")
}

fn tool_plan(section: SectionId, gene: &str) -> Vec<(&'static str, Value)> {
    let pubmed = |topic: &str| ("pubmed_search", json!({"query": gene, "topic": topic}));
    match section {
        SectionId::Genetic => vec![
            ("gwas_associations", json!({"gene": gene})),
            ("mouse_phenotypes", json!({"gene": gene})),
            pubmed("genetic"),
        ],
        SectionId::Transcriptomic => vec![("expression_profile", json!({"gene": gene})), pubmed("transcriptomic")],
        SectionId::Homology => vec![("ensembl_gene", json!({"gene": gene})), ("uniprot_entry", json!({"gene": gene}))],
        SectionId::Pharmacological => vec![("known_drugs", json!({"gene": gene})), pubmed("pharmacological")],
        SectionId::Clinical => vec![("clinical_trials", json!({"gene": gene})), pubmed("clinical")],
        _ => Vec::new(),
    }
}

/// One retrieved record as the author sees it.
struct Retrieved {
    id: u64,
    record: Value,
}

impl Retrieved {
    fn str(&self, key: &str) -> &str {
        self.record.get(key).and_then(Value::as_str).unwrap_or_default()
    }

    fn sentence(&self) -> Option<String> {
        let summary = self.str("summary").trim().trim_end_matches('.');
        (!summary.is_empty()).then(|| format!("{summary} [ev:{}].", self.id))
    }
}

fn retrieved(conversation: &[Message]) -> Vec<Retrieved> {
    let mut out = Vec::new();
    for m in conversation {
        let Message::Tool { content, .. } = m else { continue };
        let Ok(v) = serde_json::from_str::<Value>(content) else { continue };
        for r in v.get("records").and_then(Value::as_array).into_iter().flatten() {
            if let (Some(id), Some(record)) = (r.get("evidence_id").and_then(Value::as_u64), r.get("record")) {
                out.push(Retrieved { id, record: record.clone() });
            }
        }
    }
    out
}

fn paragraph(out: &mut String, sentences: &[String]) {
    if !sentences.is_empty() {
        out.push_str(&sentences.join(" "));
        out.push_str("\n\n");
    }
}

fn research_text(required: &[String], records: &[Retrieved], instruction: Option<&str>) -> String {
    let mut out = String::new();
    for heading in required {
        out.push_str(&format!("### {heading}\n\n"));
        let here: Vec<&Retrieved> = records.iter().filter(|r| r.str("fixture_subtopic") == heading).collect();
        let level = |l: &str| -> Vec<String> {
            here.iter().filter(|r| r.str("evidence_level") == l).filter_map(|r| r.sentence()).collect()
        };
        let (clinical, preclinical) = (level("clinical"), level("preclinical"));
        if !clinical.is_empty() && !preclinical.is_empty() {
            out.push_str(CLINICAL_TAG);
            out.push('\n');
            paragraph(&mut out, &clinical);
            out.push_str(PRECLINICAL_TAG);
            out.push('\n');
            paragraph(&mut out, &preclinical);
            let rest: Vec<String> = here
                .iter()
                .filter(|r| !matches!(r.str("evidence_level"), "clinical" | "preclinical"))
                .filter_map(|r| r.sentence())
                .collect();
            paragraph(&mut out, &rest);
        } else {
            let all: Vec<String> = here.iter().filter_map(|r| r.sentence()).collect();
            if all.is_empty() {
                out.push_str("No retrieved record addresses this topic.\n\n");
            } else {
                paragraph(&mut out, &all);
            }
        }
        let expand = instruction.is_some_and(|i| i.to_lowercase().contains(EXPAND_KNOCKOUT));
        if expand && heading.eq_ignore_ascii_case("Knockout phenotype") {
            let mut seen = Vec::new();
            let mut extra = Vec::new();
            for r in &here {
                let (allele, kind) = (r.str("allele"), r.str("allele_type"));
                if allele.is_empty() || kind.is_empty() || seen.contains(&allele) {
                    continue;
                }
                seen.push(allele);
                extra.push(format!("The {} {allele} allele is a {kind} allele [ev:{}].", r.str("zygosity"), r.id));
            }
            paragraph(&mut out, &extra);
        }
    }
    out.trim_end().to_owned() + "\n"
}

/// Facts and risk lines of one injected digest.
#[derive(Default)]
struct Digest {
    facts: Vec<String>,
    risks: Vec<(String, String, String)>,
}

fn digests(prompt: &str) -> BTreeMap<SectionId, Digest> {
    let mut out = BTreeMap::new();
    let Some(bundle) = between(prompt, BUNDLE_OPEN, BUNDLE_CLOSE) else { return out };
    let mut current: Option<(SectionId, Digest)> = None;
    let mut block = "";
    for line in bundle.lines() {
        if let Some(rest) = line.strip_prefix("--- DIGEST: ") {
            let id = rest.split_whitespace().next().and_then(|s| s.parse().ok());
            current = id.map(|id| (id, Digest::default()));
            block = "";
        } else if line.starts_with("--- END DIGEST: ") {
            if let Some((id, d)) = current.take() {
                out.insert(id, d);
            }
        } else if line == "FACTS:" || line == "RISKS:" || line.starts_with("TABLE ") {
            block = line;
        } else if let (Some((_, d)), Some(item)) = (current.as_mut(), line.strip_prefix("- ")) {
            match block {
                "FACTS:" if item.contains("[ev:") => d.facts.push(item.trim().to_owned()),
                "RISKS:" => {
                    let parts: Vec<&str> = item.split(" | ").collect();
                    if parts.len() == 3 {
                        d.risks.push((parts[0].trim().into(), parts[1].trim().into(), parts[2].trim().into()));
                    }
                }
                _ => {}
            }
        }
    }
    out
}

fn whole(fact: &str) -> bool {
    !fact.contains('…') && fact.starts_with(|c: char| c.is_uppercase())
}

/// The first whole-sentence fact of each research digest; shortened facts
/// only when nothing else is there.
fn lead_facts(d: &BTreeMap<SectionId, Digest>) -> Vec<String> {
    RESEARCH_SECTIONS
        .iter()
        .filter_map(|s| d.get(s))
        .filter_map(|g| g.facts.iter().find(|f| whole(f)).or(g.facts.first()).cloned())
        .collect()
}

fn matching(d: Option<&Digest>, keys: &[&str]) -> Vec<String> {
    d.map(|g| {
        g.facts.iter().filter(|f| keys.iter().any(|k| f.to_lowercase().contains(k))).cloned().collect()
    })
    .unwrap_or_default()
}

fn synthesis_text(section: SectionId, required: &[String], prompt: &str) -> String {
    let d = digests(prompt);
    let mut bodies: Vec<Vec<String>> = Vec::new();
    match section {
        SectionId::SpeciesTranslatability => {
            bodies.push(matching(d.get(&SectionId::Homology), &["orthologue"]));
            bodies.push(matching(d.get(&SectionId::Genetic), &["mice", "knockout", "animals", "embryos"]));
        }
        SectionId::IntegratedRisk => {
            bodies.push(lead_facts(&d));
            let mut lines = Vec::new();
            for s in RESEARCH_SECTIONS {
                for fact in d.get(&s).map(|g| g.facts.as_slice()).unwrap_or_default() {
                    let lower = fact.to_lowercase();
                    if let Some((_, liability, severity)) = LIABILITIES.iter().find(|(k, _, _)| lower.contains(k)) {
                        let ids: Vec<String> =
                            tsa_core::grounding::parse_marker_ids(fact).iter().map(|i| format!("[ev:{i}]")).collect();
                        lines.push(fact.clone());
                        lines.push(format!("Risk classification: {liability} ({severity}) {}.", ids.join(" ")));
                    }
                }
            }
            bodies.push(lines);
        }
        SectionId::ExecutiveSummary => {
            bodies.push(lead_facts(&d));
            let risks: Vec<String> = d
                .get(&SectionId::IntegratedRisk)
                .map(|g| g.risks.iter().map(|(l, s, ids)| format!("{} is rated {s} {ids}.", capitalise(l))).collect())
                .unwrap_or_default();
            bodies.push(risks);
        }
        _ => {}
    }
    let mut out = String::new();
    for (i, heading) in required.iter().enumerate() {
        out.push_str(&format!("### {heading}\n\n"));
        match bodies.get(i).filter(|b| !b.is_empty()) {
            Some(lines) => {
                for l in lines {
                    out.push_str(&capitalise(l));
                    if !l.ends_with('.') {
                        out.push('.');
                    }
                    out.push('\n');
                }
                out.push('\n');
            }
            None => out.push_str("No upstream digest addresses this topic.\n\n"),
        }
    }
    out.trim_end().to_owned() + "\n"
}

fn capitalise(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

impl ModelBackend for ScriptedAuthor {
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelTurn> {
        request.check_budget()?;
        let section = section_of(&request.prompt)?;
        let required = required_of(&request.prompt);
        if section.kind() == SectionKind::Synthesis {
            return Ok(ModelTurn::FinalText { text: synthesis_text(section, &required, &request.prompt) });
        }
        let available: Vec<String> = request.tool_schemas.iter().map(|t| t.name.clone()).collect();
        let plan: Vec<(&str, Value)> = tool_plan(section, &target_of(&request.prompt))
            .into_iter()
            .filter(|(t, _)| available.iter().any(|a| a == t))
            .collect();
        let calls = request
            .conversation
            .iter()
            .filter(|m| matches!(m, Message::Assistant { turn: ModelTurn::ToolCall { .. } }))
            .count();
        if let Some((tool, args)) = plan.get(calls) {
            return Ok(ModelTurn::ToolCall { tool_name: (*tool).to_owned(), arguments: args.clone() });
        }
        let records = retrieved(&request.conversation);
        Ok(ModelTurn::FinalText { text: research_text(&required, &records, instruction_of(&request.prompt)) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: u64, subtopic: &str, level: &str, summary: &str) -> Retrieved {
        Retrieved { id, record: json!({"summary": summary, "fixture_subtopic": subtopic, "evidence_level": level}) }
    }

    #[test]
    fn clinical_sentences_come_first() {
        let records = [
            record(1, "A", "preclinical", "Mice show x in 5% of animals."),
            record(2, "A", "clinical", "Patients show x in 7% of cases."),
            record(3, "B", "", "Nothing else."),
        ];
        let text = research_text(&["A".into(), "B".into(), "C".into()], &records, None);
        let c = text.find(CLINICAL_TAG).unwrap();
        let p = text.find(PRECLINICAL_TAG).unwrap();
        assert!(c < p && text.find("[ev:2]").unwrap() < text.find("[ev:1]").unwrap());
        assert!(text.contains("### C\n\nNo retrieved record"));
    }

    #[test]
    fn prompt_parsing() {
        let prompt = "<<<LAYER 2 | skill homology@1 | section homology (Homology)>>>\n\
                      Required subsections (use a '### ' heading for each): Orthologues; Paralogues\n\
                      - target.identifier = TP53\n";
        assert_eq!(section_of(prompt).unwrap(), SectionId::Homology);
        assert_eq!(target_of(prompt), "TP53");
        assert_eq!(required_of(prompt), ["Orthologues", "Paralogues"]);
    }

    #[test]
    fn digest_parsing() {
        let prompt = format!(
            "{BUNDLE_OPEN} (1 sections) ===\n--- DIGEST: integrated_risk (Integrated Risk) rev 0 ---\nFACTS:\n- A fact [ev:1].\n- heading\n\
             RISKS:\n- thrombocytopenia | high | [ev:4]\n--- END DIGEST: integrated_risk ---\n{BUNDLE_CLOSE}\n"
        );
        let d = digests(&prompt);
        let g = &d[&SectionId::IntegratedRisk];
        assert_eq!(g.facts, ["A fact [ev:1]."]);
        assert_eq!(g.risks[0], ("thrombocytopenia".into(), "high".into(), "[ev:4]".into()));
    }
}
