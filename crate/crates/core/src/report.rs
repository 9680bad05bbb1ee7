//! Report export (Markdown, HTML, JSON) and parse-back.
//!
//! Markdown layout:
//!
//! ```text
//! # Target Safety Assessment: TP53
//!
//! <!-- section:genetic -->
//! ## Genetic Evidence
//!
//! {body}
//!
//! <!-- references -->
//! ## References
//!
//! [1] tool | source | query summary | retrieved_at
//! ```
//!
//! (Reference fields are separated by U+2014 with a space either side.)
//!
//! Every body is followed by exactly one blank line, so parsing strips
//! exactly `\n\n` and bodies survive byte for byte.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{Report, SectionId};
use crate::error::{Error, Result};
use crate::evidence::EvidenceStore;
use crate::grounding::parse_marker_ids;
use crate::prelude::*;
use crate::text::marker_spans;

pub const TITLE_PREFIX: &str = "# Target Safety Assessment: ";
const SECTION_OPEN: &str = "<!-- section:";
const REFERENCES_MARK: &str = "<!-- references -->";
pub const EXPORT_SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Markdown,
    Html,
    Json,
}

impl core::str::FromStr for ExportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "md" | "markdown" => Ok(ExportFormat::Markdown),
            "html" => Ok(ExportFormat::Html),
            "json" => Ok(ExportFormat::Json),
            other => Err(Error::invalid_argument(format!("unknown export format {other:?}; expected md, html or json"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reference {
    pub id: u64,
    pub line: String,
    pub resolved: bool,
    pub invalidated: bool,
}

/// Distinct cited ids in ascending order.
pub fn cited_ids(report: &Report) -> Vec<u64> {
    let ids: BTreeSet<u64> = report.sections.iter().flat_map(|s| parse_marker_ids(&s.body)).collect();
    ids.into_iter().collect()
}

/// `k=v; k=v` over the query object, `-` when empty.
pub fn query_summary(query: &Value) -> String {
    let render = |v: &Value| match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    let out = match query {
        Value::Object(m) => m.iter().map(|(k, v)| format!("{k}={}", render(v))).collect::<Vec<_>>().join("; "),
        Value::Null => String::new(),
        other => render(other),
    };
    if out.is_empty() {
        "-".into()
    } else {
        out
    }
}

pub fn references(report: &Report, store: &EvidenceStore) -> Vec<Reference> {
    cited_ids(report)
        .into_iter()
        .map(|id| match store.get(id) {
            Ok(r) => {
                let p = &r.provenance;
                let mut line = format!(
                    "[{id}] {} — {} — {} — {}",
                    p.tool_name,
                    p.source_database,
                    query_summary(&p.query),
                    p.retrieved_at
                );
                if r.invalidated {
                    line.push_str(&format!(" (invalidated: {})", r.invalidation_reason.as_deref().unwrap_or("no reason")));
                }
                Reference { id, line, resolved: true, invalidated: r.invalidated }
            }
            Err(_) => Reference { id, line: format!("[{id}] unresolved evidence id"), resolved: false, invalidated: false },
        })
        .collect()
}

pub fn to_markdown(report: &Report, store: &EvidenceStore) -> String {
    let mut out = format!("{TITLE_PREFIX}{}\n\n", report.target.identifier);
    for s in &report.sections {
        out.push_str(&format!("{SECTION_OPEN}{} -->\n## {}\n\n{}\n\n", s.section_id, s.section_id.title(), s.body));
    }
    out.push_str(REFERENCES_MARK);
    out.push_str("\n## References\n\n");
    for r in references(report, store) {
        out.push_str(&r.line);
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedReport {
    pub target: String,
    pub sections: Vec<(SectionId, String)>,
    pub references: Vec<String>,
}

impl ParsedReport {
    pub fn body(&self, id: SectionId) -> Option<&str> {
        self.sections.iter().find(|(s, _)| *s == id).map(|(_, b)| b.as_str())
    }
}

pub fn parse_markdown(text: &str) -> Result<ParsedReport> {
    let first = text.lines().next().unwrap_or("");
    let target = first
        .strip_prefix(TITLE_PREFIX)
        .ok_or_else(|| Error::invalid_argument("report must start with the assessment title"))?
        .to_owned();
    let refs_at = text.find(&format!("\n{REFERENCES_MARK}\n")).map(|p| p + 1).unwrap_or(text.len());
    let mut sections = Vec::new();
    let mut cursor = text.find(&format!("\n{SECTION_OPEN}")).map(|p| p + 1);
    while let Some(start) = cursor.filter(|&p| p < refs_at) {
        let rest = &text[start + SECTION_OPEN.len()..];
        let close = rest.find(" -->\n").ok_or_else(|| Error::invalid_argument("unterminated section marker"))?;
        let id: SectionId = rest[..close].parse()?;
        let after_marker = &rest[close + 5..];
        let heading_end = after_marker.find('\n').ok_or_else(|| Error::invalid_argument("section heading missing"))?;
        if !after_marker.starts_with("## ") {
            return Err(Error::invalid_argument(format!("section {id} lacks a heading")));
        }
        let body_start = start + SECTION_OPEN.len() + close + 5 + heading_end + 1;
        if !text[body_start..].starts_with('\n') {
            return Err(Error::invalid_argument(format!("section {id} heading must be followed by a blank line")));
        }
        let body_start = body_start + 1;
        let next = text[body_start..refs_at]
            .match_indices(&format!("\n\n{SECTION_OPEN}"))
            .map(|(p, _)| body_start + p)
            .next();
        let end = next.unwrap_or_else(|| refs_at.saturating_sub(2).max(body_start));
        let raw = &text[body_start..end.max(body_start)];
        sections.push((id, raw.to_owned()));
        cursor = next.map(|p| p + 2);
    }
    if let Some(n) = sections.last_mut().filter(|_| refs_at == text.len()) {
        // No appendix: the final body still ends with its blank line.
        if let Some(b) = n.1.strip_suffix("\n\n") {
            n.1 = b.to_owned();
        }
    }
    let references = if refs_at < text.len() {
        text[refs_at..].lines().filter(|l| l.starts_with('[')).map(str::to_owned).collect()
    } else {
        Vec::new()
    };
    Ok(ParsedReport { target, sections, references })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonExport {
    pub schema_version: String,
    #[serde(flatten)]
    pub report: Report,
    pub references: Vec<Reference>,
}

pub fn to_json(report: &Report, store: &EvidenceStore) -> Result<String> {
    let doc = JsonExport {
        schema_version: EXPORT_SCHEMA_VERSION.into(),
        report: report.clone(),
        references: references(report, store),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::invalid_argument(format!("report serialization failed: {e}")))
}

pub fn parse_json(text: &str) -> Result<JsonExport> {
    serde_json::from_str(text).map_err(|e| Error::invalid_argument(format!("not a report export: {e}")))
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

/// Escapes text and links citation markers to the references list.
fn inline(text: &str) -> String {
    let mut out = String::new();
    let mut last = 0;
    for (s, e) in marker_spans(text) {
        out.push_str(&escape(&text[last..s]));
        let marker = &text[s..e];
        match parse_marker_ids(marker).first() {
            Some(id) => out.push_str(&format!("<a class=\"cite\" href=\"#ev-{id}\">{}</a>", escape(marker))),
            None => out.push_str(&escape(marker)),
        }
        last = e;
    }
    out.push_str(&escape(&text[last..]));
    out
}

fn body_html(body: &str) -> String {
    let mut out = String::new();
    let mut para: Vec<&str> = Vec::new();
    let mut list = false;
    let mut table = false;
    let flush = |out: &mut String, para: &mut Vec<&str>| {
        if !para.is_empty() {
            out.push_str(&format!("<p>{}</p>\n", inline(&para.join(" "))));
            para.clear();
        }
    };
    for line in body.lines() {
        let t = line.trim();
        let is_item = t.starts_with("- ") || t.starts_with("* ");
        let is_row = t.starts_with('|');
        if !is_item && list {
            out.push_str("</ul>\n");
            list = false;
        }
        if !is_row && table {
            out.push_str("</table>\n");
            table = false;
        }
        if t.is_empty() {
            flush(&mut out, &mut para);
        } else if t.starts_with("<!--") {
            flush(&mut out, &mut para);
            out.push_str(t);
            out.push('\n');
        } else if t.starts_with('#') {
            flush(&mut out, &mut para);
            let level = t.chars().take_while(|c| *c == '#').count().min(6);
            out.push_str(&format!("<h{level}>{}</h{level}>\n", inline(t[level..].trim())));
        } else if is_item {
            flush(&mut out, &mut para);
            if !list {
                out.push_str("<ul>\n");
                list = true;
            }
            out.push_str(&format!("<li>{}</li>\n", inline(&t[2..])));
        } else if is_row {
            flush(&mut out, &mut para);
            let cells: Vec<&str> = t.trim_matches('|').split('|').map(str::trim).collect();
            if cells.iter().all(|c| !c.is_empty() && c.chars().all(|ch| ch == '-' || ch == ':')) {
                continue;
            }
            let tag = if table { "td" } else { "th" };
            if !table {
                out.push_str("<table>\n");
                table = true;
            }
            out.push_str("<tr>");
            for c in cells {
                out.push_str(&format!("<{tag}>{}</{tag}>", inline(c)));
            }
            out.push_str("</tr>\n");
        } else {
            para.push(t);
        }
    }
    flush(&mut out, &mut para);
    if list {
        out.push_str("</ul>\n");
    }
    if table {
        out.push_str("</table>\n");
    }
    out
}

pub fn to_html(report: &Report, store: &EvidenceStore) -> String {
    let title = format!("Target Safety Assessment: {}", report.target.identifier);
    let mut out = format!(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{t}</title>\n</head>\n<body>\n<h1>{t}</h1>\n",
        t = escape(&title)
    );
    for s in &report.sections {
        out.push_str(&format!(
            "<section id=\"{id}\" data-status=\"{status}\" data-revision=\"{rev}\">\n<h2>{title}</h2>\n{body}</section>\n",
            id = s.section_id,
            status = serde_json::to_value(s.status).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
            rev = s.revision,
            title = escape(s.section_id.title()),
            body = body_html(&s.body),
        ));
    }
    out.push_str("<section id=\"references\">\n<h2>References</h2>\n<ol class=\"references\">\n");
    for r in references(report, store) {
        out.push_str(&format!("<li id=\"ev-{}\">{}</li>\n", r.id, escape(&r.line)));
    }
    out.push_str("</ol>\n</section>\n</body>\n</html>\n");
    out
}

pub fn export(report: &Report, store: &EvidenceStore, format: ExportFormat) -> Result<String> {
    match format {
        ExportFormat::Markdown => Ok(to_markdown(report, store)),
        ExportFormat::Html => Ok(to_html(report, store)),
        ExportFormat::Json => to_json(report, store),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::sync::Arc;
    use serde_json::json;

    use crate::clock::FixedClock;
    use crate::domain::{normalize_target_identifier, SectionStatus, ALL_SECTIONS};
    use crate::evidence::{NullJournal, Provenance};

    fn fixture() -> (Report, EvidenceStore) {
        let mut store = EvidenceStore::new("a", Box::new(NullJournal), Arc::new(FixedClock::default()));
        for q in ["TP53", "MDM2"] {
            store
                .put(
                    Provenance {
                        invoking_agent: "genetic".into(),
                        tool_name: "gwas_catalog_search".into(),
                        query: json!({"gene": q, "limit": 5}),
                        pipeline_stage: "research".into(),
                        source_database: "GWAS Catalog".into(),
                        retrieved_at: "2026-01-01T00:00:00Z".into(),
                    },
                    json!({"text": "row"}),
                )
                .unwrap();
        }
        store.invalidate(2, "retracted").unwrap();
        let mut r = Report::new("asm-7f3c", normalize_target_identifier("TP53").unwrap(), "t");
        let g = r.section_mut(SectionId::Genetic).unwrap();
        g.body = "### GWAS signals\nTP53 has 3 loci [ev:1] and <b> [ev:2].\n\n| a | b |\n|---|---|\n| 1 | [ev:9] |\n".into();
        g.status = SectionStatus::Generated;
        r.section_mut(SectionId::Clinical).unwrap().body = "No trailing newline [ev:1]".into();
        (r, store)
    }

    #[test]
    fn markdown_has_sections_in_order_and_references() {
        let (r, store) = fixture();
        let md = to_markdown(&r, &store);
        let mut last = 0;
        for s in ALL_SECTIONS {
            let at = md.find(&format!("## {}\n", s.title())).unwrap();
            assert!(at > last);
            last = at;
        }
        assert!(md.contains("[1] gwas_catalog_search — GWAS Catalog — gene=TP53; limit=5 — 2026-01-01T00:00:00Z\n"));
        assert!(md.contains("[2] gwas_catalog_search — GWAS Catalog — gene=MDM2; limit=5 — 2026-01-01T00:00:00Z (invalidated: retracted)\n"));
        assert!(md.contains("[9] unresolved evidence id\n"));
        assert!(!md.contains(&r.assessment_id));
    }

    #[test]
    fn markdown_round_trips_bodies() {
        let (r, store) = fixture();
        let parsed = parse_markdown(&to_markdown(&r, &store)).unwrap();
        assert_eq!(parsed.target, "TP53");
        assert_eq!(parsed.sections.len(), 8);
        for s in &r.sections {
            assert_eq!(parsed.body(s.section_id), Some(s.body.as_str()), "{}", s.section_id);
        }
        assert_eq!(parsed.references.len(), 3);
    }

    #[test]
    fn json_round_trips() {
        let (r, store) = fixture();
        let doc = parse_json(&to_json(&r, &store).unwrap()).unwrap();
        assert_eq!(doc.report, r);
        assert_eq!(doc.schema_version, EXPORT_SCHEMA_VERSION);
        assert_eq!(doc.references.iter().filter(|x| !x.resolved).count(), 1);
    }

    #[test]
    fn html_escapes_and_links() {
        let (r, store) = fixture();
        let html = to_html(&r, &store);
        assert!(html.contains("&lt;b&gt;"));
        assert!(html.contains("<a class=\"cite\" href=\"#ev-1\">[ev:1]</a>"));
        assert!(html.contains("<li id=\"ev-1\">"));
        assert!(html.contains("<th>a</th>") && html.contains("<td>1</td>"));
        assert!(!html.contains("<b>"));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(parse_markdown("nope").is_err());
        assert!("pdf".parse::<ExportFormat>().is_err());
        assert_eq!("md".parse::<ExportFormat>().unwrap(), ExportFormat::Markdown);
    }
}
