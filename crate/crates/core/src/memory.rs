//! Agent memory: prose-free digests of completed sections and their
//! injection into downstream sections along a dependency graph.
//!
//! A backend proposes the digest; [`compress`] then checks it against the
//! source with the shared numeric-token and table extractors and appends
//! whatever the backend dropped, so preservation never depends on the model.

use serde::{Deserialize, Serialize};

use crate::backend::{ModelBackend, ModelRequest, ModelTurn};
use crate::domain::{SectionDraft, SectionId, SectionKind, ALL_SECTIONS};
use crate::error::{Error, ErrorCode, Result};
use crate::grounding::parse_marker_ids;
use crate::prelude::*;
use crate::text::{self, numeric_token_set, numeric_tokens, parse_tables, sentence_spans, token_estimate, Table};

/// Target digest size as a fraction of the source token estimate.
pub const COMPRESSION_RATIO: f64 = 0.4;
/// Sources below this many estimated tokens have no size target.
pub const FLOOR_TOKENS: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskClassification {
    pub liability: String,
    pub severity: String,
    pub citation_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressedSection {
    pub section_id: SectionId,
    pub facts: Vec<String>,
    pub tables: Vec<Table>,
    pub risk_classifications: Vec<RiskClassification>,
    pub numeric_tokens: BTreeSet<String>,
    pub source_revision: u32,
    pub token_estimate: usize,
    pub source_token_estimate: usize,
    /// True when preserved content alone exceeds the size target.
    #[serde(default)]
    pub over_budget: bool,
}

impl CompressedSection {
    pub fn render(&self) -> String {
        render_parts(&self.facts, &self.tables, &self.risk_classifications)
    }

    /// Size target in tokens, or `None` below the floor.
    pub fn budget(&self) -> Option<usize> {
        size_target(self.source_token_estimate)
    }
}

fn size_target(source_tokens: usize) -> Option<usize> {
    (source_tokens >= FLOOR_TOKENS).then(|| (source_tokens as f64 * COMPRESSION_RATIO) as usize)
}

fn render_parts(facts: &[String], tables: &[Table], risks: &[RiskClassification]) -> String {
    let mut out = String::new();
    if !facts.is_empty() {
        out.push_str("FACTS:\n");
        for f in facts {
            out.push_str("- ");
            out.push_str(f);
            out.push('\n');
        }
    }
    for (i, t) in tables.iter().enumerate() {
        out.push_str(&format!("TABLE {}:\n", i + 1));
        out.push_str(&t.render());
    }
    if !risks.is_empty() {
        out.push_str("RISKS:\n");
        for r in risks {
            let ids: Vec<String> = r.citation_ids.iter().map(|id| format!("[ev:{id}]")).collect();
            out.push_str(&format!("- {} | {} | {}\n", r.liability, r.severity, ids.join(" ")));
        }
    }
    out
}

const SOURCE_OPEN: &str = "<<<SOURCE>>>\n";
const SOURCE_CLOSE: &str = "\n<<<END SOURCE>>>";

/// Prompt asking a backend for a digest of `section`.
pub fn compression_prompt(section: &SectionDraft) -> String {
    format!(
        "<<<COMPRESS SECTION {} rev {}>>>\nProduce a prose-free digest of the source. Write one '- ' line per fact, \
         copy every Markdown table verbatim, and write one 'RISK: liability | severity | ids' line per risk \
         classification. Keep every number with its unit and keep [ev:N] markers.\n{SOURCE_OPEN}{}{SOURCE_CLOSE}\n",
        section.section_id, section.revision, section.body
    )
}

fn source_of(prompt: &str) -> Option<&str> {
    let start = prompt.find(SOURCE_OPEN)? + SOURCE_OPEN.len();
    let end = prompt.rfind(SOURCE_CLOSE)?;
    (end >= start).then(|| &prompt[start..end])
}

const RISK_PREFIX: &str = "risk classification:";

/// Deterministic digest writer: every sentence becomes a fact, tables are
/// copied, `Risk classification: <liability> (<severity>) [ev:N].`
/// sentences become risk lines. The default compression backend.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExtractiveBackend;

impl ModelBackend for ExtractiveBackend {
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelTurn> {
        let source = source_of(&request.prompt)
            .ok_or_else(|| Error::new(ErrorCode::CompressionError, "prompt carries no source block"))?;
        let mut out = String::new();
        for (s, e) in sentence_spans(source) {
            let sentence = &source[s..e];
            if sentence.to_lowercase().starts_with(RISK_PREFIX) {
                let rest = sentence[RISK_PREFIX.len()..].trim();
                let ids = parse_marker_ids(rest);
                let clean = text::strip_markers(rest);
                let clean = clean.trim().trim_end_matches('.').trim();
                let (liability, severity) = match (clean.rfind('('), clean.rfind(')')) {
                    (Some(o), Some(c)) if c > o => (clean[..o].trim(), clean[o + 1..c].trim()),
                    _ => (clean, "unspecified"),
                };
                let ids: Vec<String> = ids.iter().map(u64::to_string).collect();
                out.push_str(&format!("RISK: {liability} | {severity} | {}\n", ids.join(",")));
            } else {
                out.push_str("- ");
                out.push_str(&sentence.split_whitespace().collect::<Vec<_>>().join(" "));
                out.push('\n');
            }
        }
        for t in parse_tables(source) {
            out.push_str(&t.render());
        }
        Ok(ModelTurn::FinalText { text: out })
    }
}

/// Splits digest text into facts, tables and risk classifications.
pub fn parse_digest(text: &str) -> (Vec<String>, Vec<Table>, Vec<RiskClassification>) {
    let mut facts = Vec::new();
    let mut risks = Vec::new();
    for line in text.lines() {
        let t = line.trim();
        if let Some(rest) = t.strip_prefix("RISK:") {
            let parts: Vec<&str> = rest.split('|').map(str::trim).collect();
            let ids = parts
                .get(2)
                .map(|p| {
                    let mut ids = parse_marker_ids(p);
                    ids.extend(p.split(|c: char| c == ',' || c.is_whitespace()).filter_map(|x| x.parse::<u64>().ok()));
                    ids
                })
                .unwrap_or_default();
            risks.push(RiskClassification {
                liability: parts.first().copied().unwrap_or("").to_owned(),
                severity: parts.get(1).copied().unwrap_or("unspecified").to_owned(),
                citation_ids: ids,
            });
        } else if let Some(rest) = t.strip_prefix("- ").or_else(|| t.strip_prefix("* ")) {
            if !rest.is_empty() {
                facts.push(rest.to_owned());
            }
        }
    }
    (facts, parse_tables(text), risks)
}

/// Sentence (or, outside prose, the trimmed line) containing byte `at`.
fn context_of(body: &str, at: usize) -> String {
    if let Some((s, e)) = sentence_spans(body).into_iter().find(|&(s, e)| s <= at && at < e) {
        return body[s..e].split_whitespace().collect::<Vec<_>>().join(" ");
    }
    let start = body[..at].rfind('\n').map_or(0, |p| p + 1);
    let end = body[at..].find('\n').map_or(body.len(), |p| at + p);
    body[start..end].trim().trim_start_matches('#').trim().to_owned()
}

/// Byte span of a few words either side of `[start, end)` inside `fact`.
fn window(fact: &str, start: usize, end: usize, words: usize) -> (usize, usize) {
    let mut s = start;
    let mut seen = 0;
    for (i, c) in fact[..start].char_indices().rev() {
        if c.is_whitespace() {
            seen += 1;
            if seen > words {
                break;
            }
        }
        s = i;
    }
    let mut e = end;
    let mut seen = 0;
    for (i, c) in fact[end..].char_indices() {
        if c.is_whitespace() {
            seen += 1;
            if seen > words {
                break;
            }
        }
        e = end + i + c.len_utf8();
    }
    (s, e)
}

/// Shortens a fact to windows around its numbers, if that keeps every
/// number intact. Overlapping windows merge; the fact's citation markers
/// are kept at the end.
fn clause_windows(fact: &str) -> Option<String> {
    let tokens = numeric_tokens(fact);
    if tokens.is_empty() {
        return None;
    }
    let mut spans: Vec<(usize, usize)> = tokens.iter().map(|t| window(fact, t.start, t.end, 3)).collect();
    spans.sort_unstable();
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (s, e) in spans {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    let mut joined = merged.iter().map(|&(s, e)| fact[s..e].trim()).collect::<Vec<_>>().join(" … ");
    let kept = parse_marker_ids(&joined);
    for id in parse_marker_ids(fact) {
        if !kept.contains(&id) {
            joined.push_str(&format!(" [ev:{id}]"));
        }
    }
    (numeric_token_set(&joined) == numeric_token_set(fact) && joined.len() < fact.len()).then_some(joined)
}

fn repair(body: &str, facts: &mut Vec<String>, tables: &mut Vec<Table>, risks: &[RiskClassification]) {
    for t in parse_tables(body) {
        if !tables.contains(&t) {
            tables.push(t);
        }
    }
    for token in numeric_tokens(body) {
        let present = numeric_token_set(&render_parts(facts, tables, risks));
        if !present.contains(&token.canonical()) {
            let ctx = context_of(body, token.start);
            let ctx_tokens = numeric_token_set(&ctx);
            if ctx_tokens.contains(&token.canonical()) {
                facts.push(ctx);
            } else {
                facts.push(token.canonical());
            }
        }
    }
}

/// Compresses a section with `backend`, then enforces preservation of every
/// numeric token and table and trims toward the size target.
pub fn compress(section: &SectionDraft, backend: &mut dyn ModelBackend) -> Result<CompressedSection> {
    if !section.status.has_content() {
        return Err(Error::new(
            ErrorCode::CompressionError,
            format!("section {} has no content to compress ({:?})", section.section_id, section.status),
        ));
    }
    let body = section.body.as_str();
    let source_tokens = token_estimate(body);
    let (mut facts, mut tables, risks) = if body.trim().is_empty() {
        (Vec::new(), Vec::new(), Vec::new())
    } else {
        let turn = backend
            .complete(&ModelRequest::new(compression_prompt(section)))
            .map_err(|e| Error::new(ErrorCode::CompressionError, format!("compression backend failed: {e}")))?;
        match turn {
            ModelTurn::FinalText { text } => parse_digest(&text),
            ModelTurn::ToolCall { .. } => {
                return Err(Error::new(ErrorCode::CompressionError, "compression backend asked for a tool"))
            }
        }
    };
    repair(body, &mut facts, &mut tables, &risks);

    let mut over_budget = false;
    if let Some(limit) = size_target(source_tokens) {
        let size = |f: &[String], t: &[Table]| token_estimate(&render_parts(f, t, &risks));
        while size(&facts, &tables) > limit {
            match facts.iter().rposition(|f| numeric_tokens(f).is_empty()) {
                Some(i) => {
                    facts.remove(i);
                }
                None => break,
            }
        }
        if size(&facts, &tables) > limit {
            for f in facts.iter_mut() {
                if let Some(w) = clause_windows(f) {
                    *f = w;
                }
            }
            facts.dedup();
        }
        repair(body, &mut facts, &mut tables, &risks);
        over_budget = size(&facts, &tables) > limit;
    }

    let rendered = render_parts(&facts, &tables, &risks);
    let digest_tokens = numeric_token_set(&rendered);
    let missing: Vec<String> = numeric_token_set(body).difference(&digest_tokens).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::new(ErrorCode::CompressionError, format!("digest lost numeric tokens: {}", missing.join(", "))));
    }
    Ok(CompressedSection {
        section_id: section.section_id,
        token_estimate: token_estimate(&rendered),
        facts,
        tables,
        risk_classifications: risks,
        numeric_tokens: digest_tokens,
        source_revision: section.revision,
        source_token_estimate: source_tokens,
        over_budget,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyGraph {
    pub edges: BTreeMap<SectionId, BTreeSet<SectionId>>,
}

impl Default for DependencyGraph {
    /// Research sections stand alone; species translatability reads homology
    /// and genetics; integrated risk reads all research sections; the
    /// executive summary reads everything before it.
    fn default() -> Self {
        use SectionId::*;
        let research: BTreeSet<SectionId> = [Genetic, Transcriptomic, Homology, Pharmacological, Clinical].into();
        let mut edges = BTreeMap::new();
        for r in &research {
            edges.insert(*r, BTreeSet::new());
        }
        edges.insert(SpeciesTranslatability, [Homology, Genetic].into());
        edges.insert(IntegratedRisk, research.clone());
        let mut all = research;
        all.insert(SpeciesTranslatability);
        all.insert(IntegratedRisk);
        edges.insert(ExecutiveSummary, all);
        DependencyGraph { edges }
    }
}

impl DependencyGraph {
    pub fn upstream(&self, id: SectionId) -> BTreeSet<SectionId> {
        self.edges.get(&id).cloned().unwrap_or_default()
    }

    pub fn transitive_upstream(&self, id: SectionId) -> BTreeSet<SectionId> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<SectionId> = self.upstream(id).into_iter().collect();
        while let Some(s) = stack.pop() {
            if out.insert(s) {
                stack.extend(self.upstream(s));
            }
        }
        out
    }

    /// Sections that depend on `id`, directly or transitively.
    pub fn downstream(&self, id: SectionId) -> BTreeSet<SectionId> {
        ALL_SECTIONS.iter().copied().filter(|s| self.transitive_upstream(*s).contains(&id)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Error::new(ErrorCode::GraphInvalid, m);
        for s in ALL_SECTIONS {
            let up = self.upstream(s);
            match s.kind() {
                SectionKind::Research if !up.is_empty() => {
                    return Err(invalid(format!("research section {s} cannot have upstream sections")))
                }
                SectionKind::Synthesis if up.is_empty() => {
                    return Err(invalid(format!("synthesis section {s} needs at least one upstream section")))
                }
                _ => {}
            }
            if up.contains(&s) {
                return Err(invalid(format!("section {s} depends on itself")));
            }
        }
        for s in ALL_SECTIONS {
            if self.transitive_upstream(s).contains(&s) {
                return Err(invalid(format!("dependency cycle through {s}")));
            }
        }
        for s in ALL_SECTIONS {
            if let Some(later) = self.upstream(s).into_iter().find(|u| u.index() > s.index()) {
                return Err(invalid(format!("{s} depends on {later}, which runs after it")));
            }
        }
        Ok(())
    }
}

/// Builds the graph from `section → [upstream…]` overrides on top of the
/// default graph, then validates it.
pub fn load_graph(config: &BTreeMap<String, Vec<String>>) -> Result<DependencyGraph> {
    let mut graph = DependencyGraph::default();
    for (section, upstream) in config {
        let id: SectionId = section.parse().map_err(|_| Error::new(ErrorCode::GraphInvalid, format!("unknown section '{section}'")))?;
        let mut set = BTreeSet::new();
        for u in upstream {
            set.insert(u.parse().map_err(|_| Error::new(ErrorCode::GraphInvalid, format!("unknown section '{u}'")))?);
        }
        graph.edges.insert(id, set);
    }
    graph.validate()?;
    Ok(graph)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionBundle {
    pub text: String,
    pub manifest: Vec<SectionId>,
}

pub const BUNDLE_OPEN: &str = "=== INJECTED MEMORY";
pub const BUNDLE_CLOSE: &str = "=== END INJECTED MEMORY ===";

/// The digests of exactly the direct upstream sections of `id`, in canonical
/// order, each between labelled delimiters.
pub fn inject_for(
    id: SectionId,
    graph: &DependencyGraph,
    memory: &BTreeMap<SectionId, CompressedSection>,
) -> Result<InjectionBundle> {
    let upstream = graph.upstream(id);
    if upstream.is_empty() {
        return Ok(InjectionBundle::default());
    }
    let mut text = format!("{BUNDLE_OPEN} ({} sections) ===\n", upstream.len());
    let mut manifest = Vec::new();
    for u in upstream {
        let digest = memory.get(&u).ok_or_else(|| {
            Error::new(ErrorCode::DependencyUnsatisfied, format!("{id} needs the digest of {u}, which is missing"))
        })?;
        text.push_str(&format!("--- DIGEST: {u} ({}) rev {} ---\n", u.title(), digest.source_revision));
        text.push_str(&digest.render());
        text.push_str(&format!("--- END DIGEST: {u} ---\n"));
        manifest.push(u);
    }
    text.push_str(BUNDLE_CLOSE);
    text.push('\n');
    Ok(InjectionBundle { text, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::SectionStatus;

    fn draft(id: SectionId, body: &str) -> SectionDraft {
        let mut d = SectionDraft::pending(id);
        d.body = body.into();
        d.status = SectionStatus::Generated;
        d
    }

    /// Drops everything: the repair pass has to restore all content.
    struct Forgetful;
    impl ModelBackend for Forgetful {
        fn complete(&mut self, _: &ModelRequest) -> Result<ModelTurn> {
            Ok(ModelTurn::FinalText { text: "- nothing to see".into() })
        }
    }

    const HOMOLOGY: &str = "### Orthologues\nIdentity is high across species [ev:2].\n\n\
| Species | Identity | Similarity |\n| --- | --- | --- |\n| Mouse | 86% | 91% |\n| Rat | 85% | 90% |\n| Cyno | 99% | 99.5% |\n";

    #[test]
    fn table_rows_survive_a_forgetful_backend() {
        let c = compress(&draft(SectionId::Homology, HOMOLOGY), &mut Forgetful).unwrap();
        let source = parse_tables(HOMOLOGY);
        assert_eq!(c.tables, source);
        assert_eq!(c.tables[0].rows.len(), 4);
        assert!(numeric_token_set(HOMOLOGY).is_subset(&c.numeric_tokens));
    }

    #[test]
    fn shortened_facts_keep_markers_and_do_not_repeat() {
        let fact = "The TP53 3' UTR variant rs78378222 is associated with basal cell carcinoma with an odds ratio of 2.16 (p = 2e-17) [ev:1].";
        let w = clause_windows(fact).unwrap();
        assert!(w.ends_with("[ev:1]") || w.contains("[ev:1]"), "{w}");
        assert_eq!(w.matches("2.16").count(), 1, "{w}");
        assert_eq!(numeric_token_set(&w), numeric_token_set(fact));
    }

    #[test]
    fn empty_body_compresses_to_nothing() {
        let c = compress(&draft(SectionId::Genetic, ""), &mut Forgetful).unwrap();
        assert!(c.facts.is_empty() && c.tables.is_empty());
    }

    #[test]
    fn percentages_are_kept() {
        let c = compress(&draft(SectionId::Clinical, "QT prolongation in 12% of patients [ev:1]."), &mut ExtractiveBackend)
            .unwrap();
        assert!(c.numeric_tokens.contains("12%"));
    }

    #[test]
    fn pending_section_is_rejected() {
        let d = SectionDraft::pending(SectionId::Genetic);
        assert_eq!(compress(&d, &mut ExtractiveBackend).unwrap_err().code, ErrorCode::CompressionError);
    }

    #[test]
    fn risk_lines_are_extracted() {
        let body = "Risk classification: cardiac liability (high) [ev:3][ev:4].\nThe signal replicates in 2 cohorts [ev:5].";
        let c = compress(&draft(SectionId::IntegratedRisk, body), &mut ExtractiveBackend).unwrap();
        assert_eq!(
            c.risk_classifications,
            [RiskClassification { liability: "cardiac liability".into(), severity: "high".into(), citation_ids: vec![3, 4] }]
        );
        assert_eq!(c.facts, ["The signal replicates in 2 cohorts [ev:5]."]);
    }

    #[test]
    fn long_sources_are_trimmed_toward_target() {
        let mut body = String::new();
        for i in 0..40 {
            body.push_str(&format!(
                "Tissue panel {i} shows broadly unremarkable expression with no notable restriction to any organ system [ev:{}]. ",
                i + 1
            ));
            body.push_str("Further descriptive commentary repeats background context without adding any quantitative content. ");
        }
        let c = compress(&draft(SectionId::Transcriptomic, &body), &mut ExtractiveBackend).unwrap();
        assert!(numeric_token_set(&body).is_subset(&c.numeric_tokens));
        assert!(c.token_estimate <= c.budget().unwrap(), "{} > {:?}", c.token_estimate, c.budget());
        assert!(!c.over_budget);
    }

    #[test]
    fn default_graph_and_injection() {
        let g = DependencyGraph::default();
        g.validate().unwrap();
        let mut memory = BTreeMap::new();
        for s in ALL_SECTIONS {
            memory.insert(s, compress(&draft(s, &format!("Sentinel {s} has 3 facts here.")), &mut ExtractiveBackend).unwrap());
        }
        let ir = inject_for(SectionId::IntegratedRisk, &g, &memory).unwrap();
        assert_eq!(ir.manifest.len(), 5);
        assert!(!ir.text.contains("Sentinel integrated_risk"));
        assert!(inject_for(SectionId::Genetic, &g, &memory).unwrap().manifest.is_empty());
        assert_eq!(inject_for(SectionId::ExecutiveSummary, &g, &memory).unwrap().manifest.len(), 7);
        memory.remove(&SectionId::Homology);
        let err = inject_for(SectionId::SpeciesTranslatability, &g, &memory).unwrap_err();
        assert_eq!(err.code, ErrorCode::DependencyUnsatisfied);
    }

    #[test]
    fn graph_loading() {
        assert_eq!(load_graph(&BTreeMap::new()).unwrap(), DependencyGraph::default());
        let mut cyc = BTreeMap::new();
        cyc.insert("executive_summary".to_string(), vec!["integrated_risk".to_string()]);
        cyc.insert("integrated_risk".to_string(), vec!["executive_summary".to_string()]);
        assert_eq!(load_graph(&cyc).unwrap_err().code, ErrorCode::GraphInvalid);
        let mut bad = BTreeMap::new();
        bad.insert("genetic".to_string(), vec!["clinical".to_string()]);
        assert_eq!(load_graph(&bad).unwrap_err().code, ErrorCode::GraphInvalid);
    }

    #[test]
    fn downstream_closure() {
        let g = DependencyGraph::default();
        let d: Vec<SectionId> = g.downstream(SectionId::Genetic).into_iter().collect();
        assert_eq!(d, [SectionId::SpeciesTranslatability, SectionId::IntegratedRisk, SectionId::ExecutiveSummary]);
        assert!(g.downstream(SectionId::ExecutiveSummary).is_empty());
    }
}
