//! Three-layer instruction hierarchy: system prompt (1), domain skill module
//! (2), runtime user instructions (3). A key defined at several levels resolves
//! to its highest-level definition.
//!
//! Skill module files carry a front-matter header between `---` lines:
//!
//! ```text
//! ---
//! domain: genetic
//! version: 1.2.0
//! required_subsections: GWAS signals; Rare variant burden; Knockout phenotype
//! retrieval.max_sources = 20
//! evidence.weighting = prefer human genetic evidence over model organisms
//! ---
//! Free-text writing guidelines.
//! ```
//!
//! `name: value` lines are module metadata; `dotted.key = value` lines are
//! machine directives. Integer and boolean values become constraints, text
//! values guidance.

use core::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::{SectionId, SectionKind, Severity, Violation};
use crate::error::{Error, ErrorCode, Result};
use crate::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    System = 1,
    Skill = 2,
    User = 3,
}

impl Level {
    pub fn number(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DirectiveValue {
    Bool(bool),
    Int(i64),
    Text(String),
}

impl DirectiveValue {
    pub fn parse(text: &str) -> Self {
        let t = text.trim();
        match t {
            "true" => DirectiveValue::Bool(true),
            "false" => DirectiveValue::Bool(false),
            _ => t.parse::<i64>().map(DirectiveValue::Int).unwrap_or_else(|_| DirectiveValue::Text(t.to_owned())),
        }
    }

    pub fn is_scalar(&self) -> bool {
        !matches!(self, DirectiveValue::Text(_))
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            DirectiveValue::Int(n) => Some(*n),
            _ => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, DirectiveValue::Text(t) if t.trim().is_empty())
    }
}

impl fmt::Display for DirectiveValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DirectiveValue::Bool(b) => write!(f, "{b}"),
            DirectiveValue::Int(n) => write!(f, "{n}"),
            DirectiveValue::Text(t) => f.write_str(t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectiveKind {
    Constraint,
    Guidance,
    Prose,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directive {
    pub key: String,
    pub value: DirectiveValue,
    pub kind: DirectiveKind,
}

impl Directive {
    /// Constraint for scalar values, guidance for text.
    pub fn inferred(key: impl Into<String>, value: DirectiveValue) -> Self {
        let kind = if value.is_scalar() { DirectiveKind::Constraint } else { DirectiveKind::Guidance };
        Directive { key: key.into(), value, kind }
    }

    pub fn prose(key: impl Into<String>, text: impl Into<String>) -> Self {
        Directive { key: key.into(), value: DirectiveValue::Text(text.into()), kind: DirectiveKind::Prose }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionLayer {
    pub level: Level,
    pub directives: Vec<Directive>,
    pub provenance: String,
}

impl InstructionLayer {
    pub fn new(level: Level, provenance: impl Into<String>) -> Self {
        InstructionLayer { level, directives: Vec::new(), provenance: provenance.into() }
    }

    pub fn with(mut self, directive: Directive) -> Self {
        self.directives.push(directive);
        self
    }

    pub fn get(&self, key: &str) -> Option<&DirectiveValue> {
        self.directives.iter().find(|d| d.key == key).map(|d| &d.value)
    }

    /// The system layer from a prompt file: the whole text becomes one prose
    /// directive.
    pub fn system_from_text(text: &str, provenance: impl Into<String>) -> Self {
        InstructionLayer::new(Level::System, provenance).with(Directive::prose("system.prompt", text.trim()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillModule {
    pub domain: SectionId,
    pub version: String,
    pub directives: Vec<Directive>,
    pub required_subsections: Vec<String>,
    pub writing_guidelines: String,
    #[serde(default)]
    pub source: String,
}

impl SkillModule {
    pub fn directive(&self, key: &str) -> Option<&DirectiveValue> {
        self.directives.iter().find(|d| d.key == key).map(|d| &d.value)
    }

    pub fn as_layer(&self) -> InstructionLayer {
        InstructionLayer { level: Level::Skill, directives: self.directives.clone(), provenance: self.source.clone() }
    }

    /// Word-count bounds from `quality.min_words` / `quality.max_words`.
    pub fn length_bounds(&self) -> (Option<usize>, Option<usize>) {
        let get = |k: &str| self.directive(k).and_then(DirectiveValue::as_int).map(|n| n.max(0) as usize);
        (get("quality.min_words"), get("quality.max_words"))
    }
}

fn parse_error(source: &str, line: usize, message: impl fmt::Display) -> Error {
    Error::new(ErrorCode::ParseError, format!("{source}:{line}: {message}"))
}

fn is_directive_key(key: &str) -> bool {
    !key.is_empty()
        && key.contains('.')
        && key.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.')
}

/// Parses a skill module file. `expected` is the domain the caller asked for;
/// a file declaring another domain is rejected.
pub fn parse_skill(text: &str, expected: SectionId, source: &str) -> Result<SkillModule> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == "---" => {}
        _ => return Err(parse_error(source, 1, "expected front-matter opening '---'")),
    }
    let mut domain = None;
    let mut version = None;
    let mut required = Vec::new();
    let mut directives = Vec::new();
    let mut closed = false;
    let mut body_start = 0;
    for (idx, raw) in lines.by_ref() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line == "---" {
            closed = true;
            body_start = idx + 1;
            break;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((key, value)) = line.split_once('=') {
            let key = key.trim();
            if is_directive_key(key) {
                directives.push(Directive::inferred(key, DirectiveValue::parse(value)));
                continue;
            }
        }
        let Some((name, value)) = line.split_once(':') else {
            return Err(parse_error(source, lineno, format!("expected 'name: value' or 'key = value', found '{line}'")));
        };
        let value = value.trim();
        match name.trim() {
            "domain" => {
                let parsed: SectionId =
                    value.parse().map_err(|_| parse_error(source, lineno, format!("unknown domain '{value}'")))?;
                domain = Some(parsed);
            }
            "version" => version = Some(value.to_owned()),
            "required_subsections" => {
                required = value.split(';').map(str::trim).filter(|s| !s.is_empty()).map(str::to_owned).collect();
            }
            other => return Err(parse_error(source, lineno, format!("unknown header field '{other}'"))),
        }
    }
    if !closed {
        return Err(parse_error(source, text.lines().count().max(1), "front matter is not closed with '---'"));
    }
    let domain = domain.ok_or_else(|| parse_error(source, 1, "missing 'domain'"))?;
    if domain != expected {
        return Err(parse_error(source, 1, format!("declares domain '{domain}', expected '{expected}'")));
    }
    let version = version.filter(|v| !v.is_empty()).ok_or_else(|| parse_error(source, 1, "missing 'version'"))?;
    if domain.kind() == SectionKind::Research && required.is_empty() {
        return Err(parse_error(source, 1, "research skill modules must list required_subsections"));
    }
    let guidelines: Vec<&str> = text.lines().skip(body_start).collect();
    Ok(SkillModule {
        domain,
        version,
        directives,
        required_subsections: required,
        writing_guidelines: guidelines.join("\n").trim().to_owned(),
        source: source.to_owned(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectiveDirective {
    pub value: DirectiveValue,
    pub level: Level,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedPrompt {
    pub section_id: SectionId,
    pub system_text: String,
    pub effective_directives: BTreeMap<String, EffectiveDirective>,
    pub rendered: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injected_memory: Option<String>,
}

impl ComposedPrompt {
    pub fn effective(&self, key: &str) -> Option<&DirectiveValue> {
        self.effective_directives.get(key).map(|e| &e.value)
    }

    /// Rendered prompt plus the injected memory bundle, if any.
    pub fn full_text(&self) -> String {
        match &self.injected_memory {
            Some(memory) if !memory.is_empty() => format!("{}\n\n{}", self.rendered, memory),
            _ => self.rendered.clone(),
        }
    }
}

/// Opening delimiter of a rendered layer.
pub fn layer_open(level: Level, label: &str) -> String {
    format!("<<<LAYER {} | {}>>>", level.number(), label)
}

/// Closing delimiter of a rendered layer.
pub fn layer_close(level: Level) -> String {
    format!("<<<END LAYER {}>>>", level.number())
}

fn check_unique(layer: &InstructionLayer, name: &str) -> Result<()> {
    let mut seen = BTreeSet::new();
    for d in &layer.directives {
        if !seen.insert(d.key.as_str()) {
            return Err(Error::new(ErrorCode::LayerInvalid, format!("duplicate key '{}' in {name} layer", d.key)));
        }
    }
    Ok(())
}

fn render_directives(out: &mut String, directives: &[Directive]) {
    for d in directives.iter().filter(|d| d.kind == DirectiveKind::Prose) {
        out.push_str(&d.value.to_string());
        out.push_str("\n\n");
    }
    let listed: Vec<&Directive> = directives.iter().filter(|d| d.kind != DirectiveKind::Prose).collect();
    if !listed.is_empty() {
        for d in listed {
            out.push_str(&format!("- {} = {}\n", d.key, d.value));
        }
        out.push('\n');
    }
}

/// Merges the three layers for one section.
pub fn compose(system: &InstructionLayer, skill: &SkillModule, user: &InstructionLayer) -> Result<ComposedPrompt> {
    if system.level != Level::System {
        return Err(Error::new(ErrorCode::LayerInvalid, "first layer must be the system layer"));
    }
    if user.level != Level::User {
        return Err(Error::new(ErrorCode::LayerInvalid, "third layer must be the user layer"));
    }
    let skill_layer = skill.as_layer();
    check_unique(system, "system")?;
    check_unique(&skill_layer, "skill")?;
    check_unique(user, "user")?;

    let mut effective = BTreeMap::new();
    for layer in [system, &skill_layer, user] {
        for d in &layer.directives {
            effective.insert(d.key.clone(), EffectiveDirective { value: d.value.clone(), level: layer.level });
        }
    }

    let system_text = system
        .directives
        .iter()
        .filter(|d| d.kind == DirectiveKind::Prose)
        .map(|d| d.value.to_string())
        .collect::<Vec<_>>()
        .join("\n\n");

    let mut rendered = String::new();
    rendered.push_str(&layer_open(Level::System, &format!("system | {}", system.provenance)));
    rendered.push('\n');
    render_directives(&mut rendered, &system.directives);
    rendered.push_str(&layer_close(Level::System));
    rendered.push_str("\n\n");

    let section = skill.domain;
    rendered.push_str(&layer_open(
        Level::Skill,
        &format!("skill {}@{} | section {} ({})", section, skill.version, section, section.title()),
    ));
    rendered.push('\n');
    if !skill.required_subsections.is_empty() {
        rendered.push_str("Required subsections (use a '### ' heading for each): ");
        rendered.push_str(&skill.required_subsections.join("; "));
        rendered.push_str("\n\n");
    }
    render_directives(&mut rendered, &skill.directives);
    if !skill.writing_guidelines.is_empty() {
        rendered.push_str(&skill.writing_guidelines);
        rendered.push_str("\n\n");
    }
    rendered.push_str(&layer_close(Level::Skill));
    rendered.push_str("\n\n");

    rendered.push_str(&layer_open(Level::User, &format!("user | {}", user.provenance)));
    rendered.push('\n');
    render_directives(&mut rendered, &user.directives);
    rendered.push_str(&layer_close(Level::User));
    rendered.push_str("\n\n<<<EFFECTIVE DIRECTIVES>>>\n");
    for (key, e) in &effective {
        if !matches!(e.value, DirectiveValue::Text(ref t) if t.contains('\n')) {
            rendered.push_str(&format!("{key} = {} [L{}]\n", e.value, e.level.number()));
        }
    }
    rendered.push_str("<<<END EFFECTIVE DIRECTIVES>>>\n");

    Ok(ComposedPrompt { section_id: section, system_text, effective_directives: effective, rendered, injected_memory: None })
}

const KNOWN_NAMESPACES: &[&str] = &[
    "retrieval", "style", "evidence", "output", "quality", "species", "target", "section", "report", "memory", "system",
    "context", "user", "tools", "format",
];

pub mod codes {
    pub const DUPLICATE_KEY: &str = "duplicate-key";
    pub const EMPTY_KEY: &str = "empty-key";
    pub const EMPTY_VALUE: &str = "empty-value";
    pub const UNKNOWN_NAMESPACE: &str = "unknown-namespace";
}

/// Reports duplicate keys, empty keys, empty constraint values and (as
/// warnings) unknown key namespaces.
pub fn validate_layer(layer: &InstructionLayer) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, d) in layer.directives.iter().enumerate() {
        let location = format!("{}#{}", layer.provenance, i + 1);
        if d.key.trim().is_empty() {
            out.push(Violation::error(codes::EMPTY_KEY, "directive key is empty").at(location));
            continue;
        }
        if !seen.insert(d.key.as_str()) {
            out.push(
                Violation::error(codes::DUPLICATE_KEY, format!("key '{}' is defined more than once", d.key))
                    .at(location.clone()),
            );
        }
        if d.kind == DirectiveKind::Constraint && d.value.is_empty() {
            out.push(
                Violation::error(codes::EMPTY_VALUE, format!("constraint '{}' has an empty value", d.key))
                    .at(location.clone()),
            );
        }
        let namespace = d.key.split('.').next().unwrap_or("");
        if !KNOWN_NAMESPACES.contains(&namespace) {
            out.push(Violation {
                code: codes::UNKNOWN_NAMESPACE.to_owned(),
                message: format!("namespace '{namespace}' is not recognised"),
                location: Some(location),
                severity: Severity::Warning,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const GENETIC: &str = "---\ndomain: genetic\nversion: 1.0.0\nrequired_subsections: GWAS signals; Knockout phenotype\nretrieval.max_sources = 20\nstyle.hedging = moderate\n---\nWrite concisely.\n";

    fn skill() -> SkillModule {
        parse_skill(GENETIC, SectionId::Genetic, "genetic.skill.md").unwrap()
    }

    #[test]
    fn parses_front_matter() {
        let s = skill();
        assert_eq!(s.version, "1.0.0");
        assert_eq!(s.required_subsections, ["GWAS signals", "Knockout phenotype"]);
        assert_eq!(s.directive("retrieval.max_sources"), Some(&DirectiveValue::Int(20)));
        assert_eq!(s.directives[0].kind, DirectiveKind::Constraint);
        assert_eq!(s.directives[1].kind, DirectiveKind::Guidance);
        assert_eq!(s.writing_guidelines, "Write concisely.");
    }

    #[test]
    fn parse_errors_name_the_line() {
        let bad = "---\ndomain: genetic\nversion: 1\nthis line is wrong\n---\n";
        let err = parse_skill(bad, SectionId::Genetic, "g.md").unwrap_err();
        assert_eq!(err.code, ErrorCode::ParseError);
        assert!(err.message.starts_with("g.md:4:"), "{}", err.message);

        let err = parse_skill("domain: genetic", SectionId::Genetic, "g.md").unwrap_err();
        assert!(err.message.starts_with("g.md:1:"));

        let unclosed = "---\ndomain: genetic\nversion: 1\n";
        assert_eq!(parse_skill(unclosed, SectionId::Genetic, "g.md").unwrap_err().code, ErrorCode::ParseError);

        let no_subsections = "---\ndomain: genetic\nversion: 1\n---\n";
        assert!(parse_skill(no_subsections, SectionId::Genetic, "g.md").is_err());

        let synthesis = "---\ndomain: integrated_risk\nversion: 1\n---\nBody";
        assert!(parse_skill(synthesis, SectionId::IntegratedRisk, "r.md").is_ok());
        assert!(parse_skill(synthesis, SectionId::Genetic, "r.md").is_err());
    }

    #[test]
    fn user_layer_overrides_skill() {
        let system = InstructionLayer::system_from_text("You are a section agent.", "system.md")
            .with(Directive::inferred("style.hedging", DirectiveValue::parse("strict")));
        let user = InstructionLayer::new(Level::User, "runtime")
            .with(Directive::inferred("retrieval.max_sources", DirectiveValue::Int(5)));
        let p = compose(&system, &skill(), &user).unwrap();
        let e = &p.effective_directives["retrieval.max_sources"];
        assert_eq!(e.value, DirectiveValue::Int(5));
        assert_eq!(e.level, Level::User);
        assert_eq!(p.effective_directives["style.hedging"].level, Level::Skill);
        assert_eq!(p.system_text, "You are a section agent.");
    }

    #[test]
    fn empty_user_layer_passes_lower_layers_through() {
        let system = InstructionLayer::system_from_text("Base.", "system.md")
            .with(Directive::inferred("output.format", DirectiveValue::parse("markdown")));
        let user = InstructionLayer::new(Level::User, "runtime");
        let p = compose(&system, &skill(), &user).unwrap();
        let keys: Vec<&str> = p.effective_directives.keys().map(String::as_str).collect();
        assert_eq!(keys, ["output.format", "retrieval.max_sources", "style.hedging", "system.prompt"]);
    }

    #[test]
    fn single_definer_wins_at_its_level() {
        let system = InstructionLayer::new(Level::System, "s")
            .with(Directive::inferred("style.tone", DirectiveValue::parse("neutral")));
        let mut sk = skill();
        sk.directives.clear();
        let p = compose(&system, &sk, &InstructionLayer::new(Level::User, "u")).unwrap();
        assert_eq!(p.effective_directives["style.tone"].level, Level::System);
    }

    #[test]
    fn rendered_layers_appear_in_order() {
        let system = InstructionLayer::system_from_text("SYSTEM-TEXT", "system.md");
        let user = InstructionLayer::new(Level::User, "runtime").with(Directive::prose("context.note", "USER-TEXT"));
        let p = compose(&system, &skill(), &user).unwrap();
        let a = p.rendered.find("SYSTEM-TEXT").unwrap();
        let b = p.rendered.find("Write concisely.").unwrap();
        let c = p.rendered.find("USER-TEXT").unwrap();
        assert!(a < b && b < c);
        assert!(p.rendered.contains("<<<LAYER 2 | skill genetic@1.0.0"));
        assert_eq!(p.rendered, compose(&system, &skill(), &user).unwrap().rendered);
    }

    #[test]
    fn duplicate_key_in_one_layer_is_an_error() {
        let user = InstructionLayer::new(Level::User, "u")
            .with(Directive::inferred("retrieval.max_sources", DirectiveValue::Int(5)))
            .with(Directive::inferred("retrieval.max_sources", DirectiveValue::Int(6)));
        let err = compose(&InstructionLayer::new(Level::System, "s"), &skill(), &user).unwrap_err();
        assert_eq!(err.code, ErrorCode::LayerInvalid);
    }

    #[test]
    fn wrong_levels_are_rejected() {
        let s = InstructionLayer::new(Level::User, "s");
        let err = compose(&s, &skill(), &InstructionLayer::new(Level::User, "u")).unwrap_err();
        assert_eq!(err.code, ErrorCode::LayerInvalid);
    }

    #[test]
    fn validate_layer_reports() {
        let dup = InstructionLayer::new(Level::Skill, "x")
            .with(Directive::inferred("retrieval.max_sources", DirectiveValue::Int(1)))
            .with(Directive::inferred("retrieval.max_sources", DirectiveValue::Int(2)));
        let v = validate_layer(&dup);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].code, codes::DUPLICATE_KEY);

        let good = InstructionLayer::new(Level::User, "x").with(Directive::inferred("style.tone", DirectiveValue::parse("x")));
        assert!(validate_layer(&good).is_empty());

        let empty = InstructionLayer::new(Level::User, "x").with(Directive::inferred("", DirectiveValue::Int(1)));
        let v = validate_layer(&empty);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].code, codes::EMPTY_KEY);

        let odd = InstructionLayer::new(Level::User, "x")
            .with(Directive { key: "weird.key".into(), value: DirectiveValue::Text(" ".into()), kind: DirectiveKind::Constraint });
        let found = validate_layer(&odd);
        let codes_found: Vec<&str> = found.iter().map(|v| v.code.as_str()).collect();
        assert_eq!(codes_found, [codes::EMPTY_VALUE, codes::UNKNOWN_NAMESPACE]);
    }
}
