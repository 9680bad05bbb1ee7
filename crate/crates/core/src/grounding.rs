//! Citation markers, claim extraction and claim verification.
//!
//! Marker grammar: `[ev:` decimal digits `]`, id ≥ 1. A claim is one
//! sentence of prose (headings, tables, comments, list labels ending in `:`
//! and sentences under four words are skipped) together with the ids of the
//! markers inside it.
//!
//! Verification order: no citation → unsupported; an unresolvable id →
//! hallucinated; an invalidated record → citing_invalidated; then the
//! heuristic (numbers and content words against the cited payloads), then the
//! optional judge for whatever the heuristic cannot decide.

use serde::{Deserialize, Serialize};

use crate::backend::{ModelBackend, ModelRequest, ModelTurn};
use crate::domain::{Claim, SectionDraft, Span, Violation};
use crate::error::{Error, ErrorCode, Result};
use crate::evidence::EvidenceStore;
use crate::prelude::*;
use crate::text::{self, content_words, marker_spans, numeric_token_set, quantities, same_subject, sentence_spans};

/// Default content-word overlap needed for a heuristic `supported`.
pub const DEFAULT_TAU: f64 = 0.5;

pub const MALFORMED_MARKER: &str = "malformed-marker";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitationMarker {
    pub evidence_id: u64,
    pub span: Span,
}

pub fn render_marker(id: u64) -> String {
    format!("[ev:{id}]")
}

fn marker_id(raw: &str) -> Option<u64> {
    let digits = raw.strip_prefix("[ev:")?.strip_suffix(']')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok().filter(|&id| id >= 1)
}

/// Well-formed markers left to right, plus a violation per malformed one.
pub fn parse_citations(body: &str) -> (Vec<CitationMarker>, Vec<Violation>) {
    let mut markers = Vec::new();
    let mut violations = Vec::new();
    let spans = marker_spans(body);
    for &(s, e) in &spans {
        match marker_id(&body[s..e]) {
            Some(id) => markers.push(CitationMarker { evidence_id: id, span: Span { start: s, end: e } }),
            None => violations.push(
                Violation::warning(MALFORMED_MARKER, format!("'{}' is not a valid citation marker", &body[s..e]))
                    .at(format!("byte {s}")),
            ),
        }
    }
    let mut from = 0;
    while let Some(p) = body[from..].find("[ev:") {
        let at = from + p;
        if !spans.iter().any(|&(s, _)| s == at) {
            violations.push(Violation::warning(MALFORMED_MARKER, "unterminated citation marker").at(format!("byte {at}")));
        }
        from = at + 4;
    }
    (markers, violations)
}

/// Ids of the well-formed markers in `text`, in order.
pub fn parse_marker_ids(text: &str) -> Vec<u64> {
    parse_citations(text).0.into_iter().map(|m| m.evidence_id).collect()
}

/// Claims of `body`: filtered sentences with the ids cited inside them.
pub fn extract_claims(body: &str) -> Vec<Claim> {
    let markers = parse_citations(body).0;
    let mut claims = Vec::new();
    for (s, e) in sentence_spans(body) {
        let raw = &body[s..e];
        let clean = text::strip_markers(raw);
        let mut clean = clean.split_whitespace().collect::<Vec<_>>().join(" ");
        for p in [" .", " ,", " ;", " :", " !", " ?"] {
            clean = clean.replace(p, &p[1..]);
        }
        if clean.ends_with(':') || text::word_count(&clean) < 4 {
            continue;
        }
        let mut ids: Vec<u64> = Vec::new();
        for m in markers.iter().filter(|m| m.span.start >= s && m.span.end <= e) {
            if !ids.contains(&m.evidence_id) {
                ids.push(m.evidence_id);
            }
        }
        claims.push(Claim { text: clean, citation_ids: ids, span: Span { start: s, end: e } });
    }
    claims
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Supported,
    Unsupported,
    Contradicted,
    Hallucinated,
    CitingInvalidated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    Heuristic,
    Model,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationVerdict {
    pub category: Category,
    pub rationale: String,
    pub judge: JudgeKind,
}

impl VerificationVerdict {
    fn heuristic(category: Category, rationale: impl Into<String>) -> Self {
        VerificationVerdict { category, rationale: rationale.into(), judge: JudgeKind::Heuristic }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeLabel {
    Entailed,
    Contradicted,
    Neutral,
}

/// Entailment judge for claims the heuristic cannot decide.
pub trait Judge {
    fn judge(&mut self, claim: &str, evidence: &str) -> Result<JudgeLabel>;
}

/// A judge backed by a model: asks for one word and maps it to a label.
pub struct BackendJudge<B>(pub B);

pub fn judge_prompt(claim: &str, evidence: &str) -> String {
    format!(
        "<<<ENTAILMENT JUDGE>>>\nDecide whether the evidence entails, contradicts or is neutral towards the claim. \
         Answer with exactly one word: entailed, contradicted or neutral.\nCLAIM: {claim}\nEVIDENCE:\n{evidence}\n"
    )
}

impl<B: ModelBackend> Judge for BackendJudge<B> {
    fn judge(&mut self, claim: &str, evidence: &str) -> Result<JudgeLabel> {
        match self.0.complete(&ModelRequest::new(judge_prompt(claim, evidence)))? {
            ModelTurn::FinalText { text } => {
                let word = text.split_whitespace().next().unwrap_or("").trim_matches(|c: char| !c.is_alphabetic());
                match word.to_lowercase().as_str() {
                    "entailed" | "entailment" => Ok(JudgeLabel::Entailed),
                    "contradicted" | "contradiction" => Ok(JudgeLabel::Contradicted),
                    "neutral" => Ok(JudgeLabel::Neutral),
                    _ => Err(Error::new(ErrorCode::BackendUnavailable, format!("judge answered '{text}'"))),
                }
            }
            ModelTurn::ToolCall { .. } => Err(Error::new(ErrorCode::BackendUnavailable, "judge asked for a tool")),
        }
    }
}

enum Heuristic {
    Supported(String),
    Contradicted(String),
    Undecided(String),
}

fn heuristic(claim: &str, evidence: &str, tau: f64) -> Heuristic {
    let claim_numbers = numeric_token_set(claim);
    let evidence_numbers = numeric_token_set(evidence);
    let missing: Vec<&String> = claim_numbers.difference(&evidence_numbers).collect();
    let words = content_words(claim);
    let evidence_words = content_words(evidence);
    let overlap = if words.is_empty() {
        1.0
    } else {
        words.intersection(&evidence_words).count() as f64 / words.len() as f64
    };
    if missing.is_empty() && overlap >= tau {
        return Heuristic::Supported(format!("all numbers found in cited evidence; word overlap {overlap:.2}"));
    }
    let claim_q = quantities(claim);
    let evidence_q = quantities(evidence);
    for cq in &claim_q {
        let same: Vec<&text::Quantity> = evidence_q.iter().filter(|eq| same_subject(cq, eq)).collect();
        if !same.is_empty() && !same.iter().any(|eq| eq.value == cq.value) {
            return Heuristic::Contradicted(format!(
                "claim states {} for '{}' but the cited evidence gives {}",
                cq.value,
                cq.key,
                same.iter().map(|q| q.value.as_str()).collect::<Vec<_>>().join(", ")
            ));
        }
    }
    Heuristic::Undecided(if missing.is_empty() {
        format!("word overlap {overlap:.2} below threshold {tau:.2}")
    } else {
        format!(
            "numbers not found in cited evidence: {}",
            missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )
    })
}

/// Verifies one claim against the store.
pub fn verify_claim(claim: &Claim, store: &EvidenceStore, judge: Option<&mut dyn Judge>, tau: f64) -> VerificationVerdict {
    if claim.citation_ids.is_empty() {
        return VerificationVerdict::heuristic(Category::Unsupported, "claim has no citation");
    }
    let mut records = Vec::new();
    for id in &claim.citation_ids {
        match store.get(*id) {
            Ok(r) => records.push(r),
            Err(_) => {
                return VerificationVerdict::heuristic(
                    Category::Hallucinated,
                    format!("cited evidence {id} does not exist (store holds {} records)", store.len()),
                )
            }
        }
    }
    if let Some(r) = records.iter().find(|r| r.invalidated) {
        return VerificationVerdict::heuristic(
            Category::CitingInvalidated,
            format!("cited evidence {} was invalidated: {}", r.id, r.invalidation_reason.as_deref().unwrap_or("")),
        );
    }
    let evidence: String = records.iter().map(|r| r.payload_text()).collect::<Vec<_>>().join("\n");
    match heuristic(&claim.text, &evidence, tau) {
        Heuristic::Supported(why) => VerificationVerdict::heuristic(Category::Supported, why),
        Heuristic::Contradicted(why) => VerificationVerdict::heuristic(Category::Contradicted, why),
        Heuristic::Undecided(why) => match judge {
            None => VerificationVerdict::heuristic(Category::Unsupported, format!("warning: {why}; no judge configured")),
            Some(j) => match j.judge(&claim.text, &evidence) {
                Ok(label) => VerificationVerdict {
                    category: match label {
                        JudgeLabel::Entailed => Category::Supported,
                        JudgeLabel::Contradicted => Category::Contradicted,
                        JudgeLabel::Neutral => Category::Unsupported,
                    },
                    rationale: format!("judge: {label:?}; heuristic: {why}"),
                    judge: JudgeKind::Model,
                },
                Err(e) => VerificationVerdict::heuristic(
                    Category::Unsupported,
                    format!("warning: {why}; judge failed ({e}), heuristic verdict kept"),
                ),
            },
        },
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub supported: usize,
    pub unsupported: usize,
    pub contradicted: usize,
    pub hallucinated: usize,
    pub citing_invalidated: usize,
}

impl CategoryCounts {
    pub fn add(&mut self, c: Category) {
        match c {
            Category::Supported => self.supported += 1,
            Category::Unsupported => self.unsupported += 1,
            Category::Contradicted => self.contradicted += 1,
            Category::Hallucinated => self.hallucinated += 1,
            Category::CitingInvalidated => self.citing_invalidated += 1,
        }
    }

    pub fn merge(&mut self, other: &CategoryCounts) {
        self.supported += other.supported;
        self.unsupported += other.unsupported;
        self.contradicted += other.contradicted;
        self.hallucinated += other.hallucinated;
        self.citing_invalidated += other.citing_invalidated;
    }

    pub fn total(&self) -> usize {
        self.supported + self.unsupported + self.contradicted + self.hallucinated + self.citing_invalidated
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimVerdict {
    pub claim: Claim,
    pub verdict: VerificationVerdict,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionVerification {
    pub claims: Vec<ClaimVerdict>,
    pub counts: CategoryCounts,
    /// Malformed markers and cited ids that do not resolve.
    pub marker_violations: Vec<Violation>,
}

pub fn verify_section(
    section: &SectionDraft,
    store: &EvidenceStore,
    mut judge: Option<&mut dyn Judge>,
    tau: f64,
) -> SectionVerification {
    let mut out = SectionVerification { marker_violations: parse_citations(&section.body).1, ..Default::default() };
    for claim in &section.claims {
        let verdict = match &mut judge {
            Some(j) => verify_claim(claim, store, Some(&mut **j), tau),
            None => verify_claim(claim, store, None, tau),
        };
        out.counts.add(verdict.category);
        out.claims.push(ClaimVerdict { claim: claim.clone(), verdict });
    }
    out
}

/// Ids cited anywhere in `body` (claims or not) that the store cannot resolve.
pub fn unresolvable_ids(body: &str, store: &EvidenceStore) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::new();
    for id in parse_marker_ids(body) {
        if store.get(id).is_err() && !out.contains(&id) {
            out.push(id);
        }
    }
    out
}
