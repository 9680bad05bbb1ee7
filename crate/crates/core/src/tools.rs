//! Tool schemas, argument validation and the multi-step record pipeline
//! (filter, dedupe, cross-reference, aggregate) that every tool runs before
//! returning analysis-ready records.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::domain::SectionId;
use crate::error::{Error, ErrorCode, Result};
use crate::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamType {
    String,
    Integer,
    Number,
    Boolean,
}

impl ParamType {
    fn json_name(self) -> &'static str {
        match self {
            ParamType::String => "string",
            ParamType::Integer => "integer",
            ParamType::Number => "number",
            ParamType::Boolean => "boolean",
        }
    }

    fn from_json_name(name: &str) -> Option<Self> {
        Some(match name {
            "string" => ParamType::String,
            "integer" => ParamType::Integer,
            "number" => ParamType::Number,
            "boolean" => ParamType::Boolean,
            _ => return None,
        })
    }

    fn accepts(self, value: &Value) -> bool {
        match self {
            ParamType::String => value.is_string(),
            ParamType::Integer => value.is_i64() || value.is_u64(),
            ParamType::Number => value.is_number(),
            ParamType::Boolean => value.is_boolean(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ParamType,
    #[serde(default)]
    pub required: bool,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
}

/// Domain tag meaning "every section may call this tool".
pub const TAG_ALL: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Vec<ParamSpec>,
    #[serde(default)]
    pub domain_tags: Vec<String>,
}

impl ToolSchema {
    pub fn permits(&self, caller: SectionId) -> bool {
        self.domain_tags.iter().any(|t| t == TAG_ALL || t == caller.as_str())
    }

    /// MCP `tools/list` entry: name, description and a JSON Schema object.
    pub fn to_mcp(&self) -> Value {
        let mut properties = Map::new();
        let mut required = Vec::new();
        for p in &self.parameters {
            let mut prop = Map::new();
            prop.insert("type".into(), Value::String(p.ty.json_name().into()));
            if !p.description.is_empty() {
                prop.insert("description".into(), Value::String(p.description.clone()));
            }
            if let Some(d) = &p.default {
                prop.insert("default".into(), d.clone());
            }
            properties.insert(p.name.clone(), Value::Object(prop));
            if p.required {
                required.push(Value::String(p.name.clone()));
            }
        }
        json!({
            "name": self.name,
            "description": self.description,
            "inputSchema": {"type": "object", "properties": properties, "required": required},
        })
    }

    /// Parses an MCP tool description. Domain tags are not part of the wire
    /// format; the caller assigns them.
    pub fn from_mcp(value: &Value) -> Result<ToolSchema> {
        let bad = |what: &str| Error::tool_unavailable(format!("malformed tool description: {what}"));
        let obj = value.as_object().ok_or_else(|| bad("not an object"))?;
        let name = obj.get("name").and_then(Value::as_str).filter(|n| !n.is_empty()).ok_or_else(|| bad("name"))?;
        let description = obj.get("description").and_then(Value::as_str).unwrap_or("").to_owned();
        let schema = obj.get("inputSchema").and_then(Value::as_object).ok_or_else(|| bad("inputSchema"))?;
        let required: BTreeSet<&str> = match schema.get("required") {
            None => BTreeSet::new(),
            Some(Value::Array(items)) => items.iter().filter_map(Value::as_str).collect(),
            Some(_) => return Err(bad("required")),
        };
        let mut parameters = Vec::new();
        if let Some(props) = schema.get("properties") {
            let props = props.as_object().ok_or_else(|| bad("properties"))?;
            for (pname, spec) in props {
                let ty = spec
                    .get("type")
                    .and_then(Value::as_str)
                    .and_then(ParamType::from_json_name)
                    .ok_or_else(|| bad("parameter type"))?;
                parameters.push(ParamSpec {
                    name: pname.clone(),
                    ty,
                    required: required.contains(pname.as_str()),
                    description: spec.get("description").and_then(Value::as_str).unwrap_or("").to_owned(),
                    default: spec.get("default").cloned(),
                });
            }
        }
        Ok(ToolSchema { name: name.to_owned(), description, parameters, domain_tags: Vec::new() })
    }
}

/// Default section permissions per tool name.
pub fn default_domain_tags(tool: &str) -> Vec<String> {
    let tags: &[&str] = match tool {
        "pubmed_search" | "evidence_lookup" => &[TAG_ALL],
        "ensembl_gene" | "uniprot_entry" => &["genetic", "homology"],
        "gwas_associations" | "mouse_phenotypes" => &["genetic"],
        "expression_profile" => &["transcriptomic"],
        "known_drugs" => &["pharmacological"],
        "clinical_trials" => &["clinical"],
        _ => &[],
    };
    tags.iter().map(|t| (*t).to_owned()).collect()
}

/// Checks `arguments` against the schema: an object, every required
/// parameter present, no unknown parameters, every value of the declared type.
pub fn validate_arguments(schema: &ToolSchema, arguments: &Value) -> Result<()> {
    let invalid = |msg: String| Error::new(ErrorCode::InvalidArguments, format!("{}: {msg}", schema.name));
    let obj = arguments.as_object().ok_or_else(|| invalid("arguments must be an object".into()))?;
    for p in &schema.parameters {
        match obj.get(&p.name) {
            None | Some(Value::Null) if p.required => return Err(invalid(format!("missing required '{}'", p.name))),
            None | Some(Value::Null) => {}
            Some(v) if !p.ty.accepts(v) => {
                return Err(invalid(format!("'{}' must be of type {}", p.name, p.ty.json_name())))
            }
            Some(_) => {}
        }
    }
    for key in obj.keys() {
        if !schema.parameters.iter().any(|p| &p.name == key) {
            return Err(invalid(format!("unknown parameter '{key}'")));
        }
    }
    Ok(())
}

/// Arguments with schema defaults filled in for absent parameters.
pub fn with_defaults(schema: &ToolSchema, arguments: &Value) -> Map<String, Value> {
    let mut out = arguments.as_object().cloned().unwrap_or_default();
    for p in &schema.parameters {
        if let Some(d) = &p.default {
            out.entry(p.name.clone()).or_insert_with(|| d.clone());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterOp {
    Eq,
    Ne,
    Gte,
    Lte,
    Contains,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reducer {
    Max,
    Min,
    Sum,
    Count,
}

/// One processing step. Values written as `"$name"` are read from the call
/// arguments (with schema defaults) at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case", deny_unknown_fields)]
pub enum PipelineStep {
    Filter { field: String, op: FilterOp, value: Value },
    Dedupe { key: Vec<String> },
    CrossReference { join_key: String, companion: String, fields: Vec<String> },
    Aggregate { group_by: Vec<String>, field: String, reducer: Reducer },
}

impl PipelineStep {
    pub fn name(&self) -> &'static str {
        match self {
            PipelineStep::Filter { .. } => "filter",
            PipelineStep::Dedupe { .. } => "dedupe",
            PipelineStep::CrossReference { .. } => "cross_reference",
            PipelineStep::Aggregate { .. } => "aggregate",
        }
    }
}

/// Parses step descriptions; anything unrecognised is a configuration error.
pub fn parse_steps(steps: &[Value]) -> Result<Vec<PipelineStep>> {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            serde_json::from_value(s.clone()).map_err(|e| Error::config(format!("pipeline step {}: {e}", i + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: String,
    pub input: usize,
    pub output: usize,
}

/// Pipeline counts. `input = output + filtered + deduplicated + aggregated`,
/// where `aggregated` counts rows folded into another row of their group.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub input: usize,
    pub output: usize,
    pub filtered: usize,
    pub deduplicated: usize,
    pub cross_referenced: usize,
    pub aggregated: usize,
    pub steps: Vec<StepTrace>,
}

impl Diagnostics {
    pub fn is_consistent(&self) -> bool {
        self.input == self.output + self.filtered + self.deduplicated + self.aggregated
    }
}

/// Reads a dotted path out of a record.
pub fn field<'a>(record: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(record, |v, part| v.get(part))
}

fn resolve(value: &Value, params: &Map<String, Value>) -> Result<Value> {
    match value {
        Value::String(s) if s.starts_with('$') => params
            .get(&s[1..])
            .cloned()
            .ok_or_else(|| Error::config(format!("pipeline parameter '{}' has no value", &s[1..]))),
        other => Ok(other.clone()),
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn loose_eq(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::String(x), Value::String(y)) => x.eq_ignore_ascii_case(y),
        _ => match (as_f64(a), as_f64(b)) {
            (Some(x), Some(y)) if a.is_number() || b.is_number() => x == y,
            _ => a == b,
        },
    }
}

fn matches_filter(record: &Value, path: &str, op: FilterOp, target: &Value) -> bool {
    let Some(v) = field(record, path) else { return false };
    match op {
        FilterOp::Eq => loose_eq(v, target),
        FilterOp::Ne => !loose_eq(v, target),
        FilterOp::Gte => matches!((as_f64(v), as_f64(target)), (Some(a), Some(b)) if a >= b),
        FilterOp::Lte => matches!((as_f64(v), as_f64(target)), (Some(a), Some(b)) if a <= b),
        FilterOp::Contains => {
            let needle = match target {
                Value::String(s) => s.to_lowercase(),
                other => other.to_string(),
            };
            match v {
                Value::String(s) => s.to_lowercase().contains(&needle),
                Value::Array(items) => items.iter().any(|i| match i {
                    Value::String(s) => s.to_lowercase() == needle,
                    other => other.to_string() == needle,
                }),
                _ => false,
            }
        }
    }
}

fn key_of(record: &Value, fields: &[String]) -> String {
    let parts: Vec<Value> = fields.iter().map(|f| field(record, f).cloned().unwrap_or(Value::Null)).collect();
    serde_json::to_string(&parts).unwrap_or_default()
}

/// Applies `steps` in order. `params` supplies `$name` values and
/// `companions` the named record sets used by cross-reference steps.
pub fn run_pipeline_steps(
    raw: Vec<Value>,
    steps: &[PipelineStep],
    params: &Map<String, Value>,
    companions: &BTreeMap<String, Vec<Value>>,
) -> Result<(Vec<Value>, Diagnostics)> {
    let mut diag = Diagnostics { input: raw.len(), ..Diagnostics::default() };
    let mut rows = raw;
    for step in steps {
        let before = rows.len();
        match step {
            PipelineStep::Filter { field: path, op, value } => {
                let target = resolve(value, params)?;
                rows.retain(|r| matches_filter(r, path, *op, &target));
                diag.filtered += before - rows.len();
            }
            PipelineStep::Dedupe { key } => {
                let mut seen = BTreeSet::new();
                rows.retain(|r| seen.insert(key_of(r, key)));
                diag.deduplicated += before - rows.len();
            }
            PipelineStep::CrossReference { join_key, companion, fields } => {
                let set = companions
                    .get(companion)
                    .ok_or_else(|| Error::config(format!("unknown companion set '{companion}'")))?;
                for row in rows.iter_mut() {
                    let Some(k) = field(row, join_key).cloned() else { continue };
                    let Some(hit) = set.iter().find(|c| field(c, join_key).is_some_and(|v| loose_eq(v, &k))) else {
                        continue;
                    };
                    if let Value::Object(obj) = row {
                        for f in fields {
                            if let Some(v) = field(hit, f) {
                                obj.insert(f.clone(), v.clone());
                            }
                        }
                        diag.cross_referenced += 1;
                    }
                }
            }
            PipelineStep::Aggregate { group_by, field: target, reducer } => {
                rows = aggregate(rows, group_by, target, *reducer);
                diag.aggregated += before - rows.len();
            }
        }
        diag.steps.push(StepTrace { step: step.name().into(), input: before, output: rows.len() });
    }
    diag.output = rows.len();
    Ok((rows, diag))
}

/// One row per group, in first-appearance order. Max and min keep the row
/// holding the extreme value; sum and count keep the first row with `field`
/// replaced by the reduced value. Every output row gains `group_size`.
fn aggregate(rows: Vec<Value>, group_by: &[String], target: &str, reducer: Reducer) -> Vec<Value> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<Value>> = BTreeMap::new();
    for row in rows {
        let k = key_of(&row, group_by);
        if !groups.contains_key(&k) {
            order.push(k.clone());
        }
        groups.entry(k).or_default().push(row);
    }
    let mut out = Vec::with_capacity(order.len());
    for k in order {
        let members = groups.remove(&k).unwrap_or_default();
        let size = members.len();
        let values: Vec<f64> = members.iter().filter_map(|r| field(r, target).and_then(as_f64)).collect();
        let mut chosen = match reducer {
            Reducer::Max | Reducer::Min => {
                let mut best: Option<(f64, usize)> = None;
                for (i, r) in members.iter().enumerate() {
                    if let Some(v) = field(r, target).and_then(as_f64) {
                        let better = match (best, reducer) {
                            (None, _) => true,
                            (Some((b, _)), Reducer::Max) => v > b,
                            (Some((b, _)), _) => v < b,
                        };
                        if better {
                            best = Some((v, i));
                        }
                    }
                }
                members[best.map_or(0, |(_, i)| i)].clone()
            }
            Reducer::Sum => {
                let mut first = members[0].clone();
                if let Value::Object(obj) = &mut first {
                    obj.insert(target.into(), json_number(values.iter().sum()));
                }
                first
            }
            Reducer::Count => {
                let mut first = members[0].clone();
                if let Value::Object(obj) = &mut first {
                    obj.insert(target.into(), Value::from(size as u64));
                }
                first
            }
        };
        if let Value::Object(obj) = &mut chosen {
            obj.insert("group_size".into(), Value::from(size as u64));
        }
        out.push(chosen);
    }
    out
}

fn json_number(x: f64) -> Value {
    if x == (x as i64) as f64 && x < 9.0e15 && x > -9.0e15 {
        Value::from(x as i64)
    } else {
        serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
    }
}
