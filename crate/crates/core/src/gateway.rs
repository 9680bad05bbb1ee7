//! Tool gateway: connects to tool servers, enforces schemas and section
//! permissions, and indexes every returned record into the evidence store.

use alloc::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::clock::Clock;
use crate::domain::SectionId;
use crate::error::{Error, ErrorCode, Result};
use crate::evidence::{EvidenceRecord, EvidenceStore, Provenance, LOOKUP_TOOL};
use crate::prelude::*;
use crate::rpc::{McpClient, ToolTransport};
use crate::tools::{default_domain_tags, validate_arguments, Diagnostics, ToolSchema, TAG_ALL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub tool_name: String,
    pub records: Vec<Value>,
    pub diagnostics: Diagnostics,
    pub evidence_ids: Vec<u64>,
    /// Set by `evidence_lookup`, which reads memory instead of indexing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lookup: Option<EvidenceRecord>,
    /// A structured failure reported back to the agent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<Error>,
}

impl ToolResult {
    pub fn failed(tool: &str, error: Error) -> Self {
        ToolResult {
            tool_name: tool.to_owned(),
            records: Vec::new(),
            diagnostics: Diagnostics::default(),
            evidence_ids: Vec::new(),
            lookup: None,
            error: Some(error),
        }
    }

    /// The text an agent sees for this result.
    pub fn render(&self) -> String {
        let body = if let Some(err) = &self.error {
            json!({"tool": self.tool_name, "error": {"code": err.code, "message": err.message}})
        } else if let Some(rec) = &self.lookup {
            json!({"tool": self.tool_name, "record": {
                "id": rec.id, "invalidated": rec.invalidated, "provenance": rec.provenance, "payload": rec.payload}})
        } else {
            let records: Vec<Value> = self
                .records
                .iter()
                .zip(&self.evidence_ids)
                .map(|(r, id)| json!({"evidence_id": id, "cite_as": format!("[ev:{id}]"), "record": r}))
                .collect();
            json!({"tool": self.tool_name, "records": records, "diagnostics": self.diagnostics})
        };
        body.to_string()
    }
}

struct Server {
    name: String,
    client: McpClient<Box<dyn ToolTransport>>,
}

pub struct Gateway {
    servers: Vec<Server>,
    tools: BTreeMap<String, (usize, ToolSchema)>,
    /// Handshake failures; the affected servers are skipped.
    pub diagnostics: Vec<String>,
    clock: Arc<dyn Clock>,
}

impl Gateway {
    /// Handshakes with every server. `tag_overrides` replaces the default
    /// domain tags of the named tools.
    pub fn connect(
        servers: Vec<(String, Box<dyn ToolTransport>)>,
        tag_overrides: &BTreeMap<String, Vec<String>>,
        clock: Arc<dyn Clock>,
    ) -> Result<Gateway> {
        let mut gw = Gateway { servers: Vec::new(), tools: BTreeMap::new(), diagnostics: Vec::new(), clock };
        gw.tools.insert(LOOKUP_TOOL.into(), (usize::MAX, EvidenceStore::as_tool_descriptor()));
        for (name, transport) in servers {
            let mut client = McpClient::new(transport);
            let listed = client.initialize().and_then(|_| client.list_tools());
            let schemas = match listed {
                Ok(s) => s,
                Err(e) => {
                    gw.diagnostics.push(format!("{name}: {e}"));
                    continue;
                }
            };
            let index = gw.servers.len();
            for mut schema in schemas {
                if gw.tools.contains_key(&schema.name) {
                    return Err(Error::config(format!("tool '{}' is offered by more than one server", schema.name)));
                }
                schema.domain_tags = match tag_overrides.get(&schema.name) {
                    Some(tags) => tags.clone(),
                    None => {
                        let tags = default_domain_tags(&schema.name);
                        if tags.is_empty() {
                            vec![TAG_ALL.to_owned()]
                        } else {
                            tags
                        }
                    }
                };
                gw.tools.insert(schema.name.clone(), (index, schema));
            }
            gw.servers.push(Server { name, client });
        }
        Ok(gw)
    }

    pub fn list_tools(&self) -> Vec<ToolSchema> {
        self.tools.values().map(|(_, s)| s.clone()).collect()
    }

    /// Tools `caller` is permitted to use.
    pub fn tools_for(&self, caller: SectionId) -> Vec<ToolSchema> {
        self.tools.values().filter(|(_, s)| s.permits(caller)).map(|(_, s)| s.clone()).collect()
    }

    pub fn server_names(&self) -> Vec<&str> {
        self.servers.iter().map(|s| s.name.as_str()).collect()
    }

    /// Invokes a tool on behalf of `caller` and indexes the records.
    pub fn invoke(
        &mut self,
        tool: &str,
        arguments: &Value,
        caller: SectionId,
        stage: &str,
        store: &mut EvidenceStore,
    ) -> Result<ToolResult> {
        let (index, schema) =
            self.tools.get(tool).cloned().ok_or_else(|| Error::new(ErrorCode::ToolNotFound, format!("no tool '{tool}'")))?;
        if !schema.permits(caller) {
            return Err(Error::new(ErrorCode::ToolForbidden, format!("section {caller} may not call '{tool}'")));
        }
        validate_arguments(&schema, arguments)?;
        if tool == LOOKUP_TOOL {
            let id = arguments.get("id").and_then(Value::as_u64).unwrap_or(0);
            return Ok(match store.get(id) {
                Ok(rec) => ToolResult { lookup: Some(rec.clone()), ..ToolResult::failed(tool, Error::not_found("")) }
                    .without_error(),
                Err(e) => ToolResult::failed(tool, e),
            });
        }
        let server = &mut self.servers[index];
        let output = server.client.call_tool(tool, arguments)?;
        let retrieved_at = self.clock.now();
        let mut ids = Vec::with_capacity(output.records.len());
        for record in &output.records {
            let source = record
                .get("source_database")
                .and_then(Value::as_str)
                .filter(|s| !s.trim().is_empty())
                .unwrap_or(&server.name)
                .to_owned();
            let provenance = Provenance {
                invoking_agent: caller.as_str().to_owned(),
                tool_name: tool.to_owned(),
                query: arguments.clone(),
                pipeline_stage: stage.to_owned(),
                source_database: source,
                retrieved_at: retrieved_at.clone(),
            };
            ids.push(store.put(provenance, record.clone())?.id);
        }
        Ok(ToolResult {
            tool_name: tool.to_owned(),
            records: output.records,
            diagnostics: output.diagnostics,
            evidence_ids: ids,
            lookup: None,
            error: None,
        })
    }
}

impl ToolResult {
    fn without_error(mut self) -> Self {
        self.error = None;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::FixedClock;
    use crate::evidence::NullJournal;
    use crate::fixture::{FixtureCorpus, FixtureServer};
    use crate::rpc::Loopback;

    fn corpus(name: &str, rows: Value) -> FixtureCorpus {
        serde_json::from_value(json!({
            "server": name, "version": "1",
            "tool": {"name": name, "description": "", "parameters": [{"name": "gene", "type": "string", "required": true}], "domain_tags": []},
            "select": [{"field": "gene", "param": "gene"}],
            "pipeline": [{"step": "dedupe", "key": ["variant", "phenotype", "study"]}],
            "rows": rows
        }))
        .unwrap()
    }

    fn transport(c: FixtureCorpus) -> Box<dyn ToolTransport> {
        let mut server = FixtureServer::new(c).unwrap();
        Box::new(Loopback(move |f: &str| server.handle(f)))
    }

    fn store() -> EvidenceStore {
        EvidenceStore::new("a", Box::new(NullJournal), Arc::new(FixedClock::default()))
    }

    fn gwas_rows() -> Value {
        json!([
            {"gene": "TP53", "variant": "rs1", "phenotype": "p1", "study": "s1"},
            {"gene": "TP53", "variant": "rs1", "phenotype": "p1", "study": "s1"},
            {"gene": "TP53", "variant": "rs2", "phenotype": "p2", "study": "s1", "source_database": "GWAS Catalog"},
            {"gene": "TP53", "variant": "rs3", "phenotype": "p3", "study": "s2"},
            {"gene": "TP53", "variant": "rs4", "phenotype": "p4", "study": "s2"},
            {"gene": "TP53", "variant": "rs5", "phenotype": "p5", "study": "s3"}
        ])
    }

    #[test]
    fn invoke_indexes_every_record() {
        let mut gw = Gateway::connect(
            vec![("gwas".into(), transport(corpus("gwas_associations", gwas_rows())))],
            &BTreeMap::new(),
            Arc::new(FixedClock::default()),
        )
        .unwrap();
        let mut s = store();
        let r = gw.invoke("gwas_associations", &json!({"gene": "TP53"}), SectionId::Genetic, "research", &mut s).unwrap();
        assert_eq!(r.records.len(), 5);
        assert_eq!(r.diagnostics.deduplicated, 1);
        assert_eq!(r.evidence_ids, [1, 2, 3, 4, 5]);
        assert_eq!(s.len(), 5);
        assert_eq!(s.get(2).unwrap().provenance.source_database, "GWAS Catalog");
        assert_eq!(s.get(1).unwrap().provenance.source_database, "gwas");

        let lookup = gw.invoke("evidence_lookup", &json!({"id": 1}), SectionId::Clinical, "research", &mut s).unwrap();
        assert_eq!(lookup.lookup.as_ref().unwrap(), s.get(1).unwrap());
        assert!(lookup.error.is_none());
        let missing = gw.invoke("evidence_lookup", &json!({"id": 99}), SectionId::Clinical, "research", &mut s).unwrap();
        assert_eq!(missing.error.unwrap().code, ErrorCode::NotFound);
        assert_eq!(s.len(), 5);

        let e = gw.invoke("nonexistent", &json!({}), SectionId::Genetic, "research", &mut s).unwrap_err();
        assert_eq!(e.code, ErrorCode::ToolNotFound);
        let e = gw.invoke("gwas_associations", &json!({"gene": "TP53"}), SectionId::Clinical, "research", &mut s).unwrap_err();
        assert_eq!(e.code, ErrorCode::ToolForbidden);
        let e = gw.invoke("gwas_associations", &json!({"gene": 5}), SectionId::Genetic, "research", &mut s).unwrap_err();
        assert_eq!(e.code, ErrorCode::InvalidArguments);
    }

    #[test]
    fn zero_servers_list_only_lookup() {
        let gw = Gateway::connect(Vec::new(), &BTreeMap::new(), Arc::new(FixedClock::default())).unwrap();
        let names: Vec<String> = gw.list_tools().into_iter().map(|t| t.name).collect();
        assert_eq!(names, ["evidence_lookup"]);
    }

    #[test]
    fn duplicate_tool_is_configuration_error() {
        let err = Gateway::connect(
            vec![
                ("a".into(), transport(corpus("gwas_associations", json!([])))),
                ("b".into(), transport(corpus("gwas_associations", json!([])))),
            ],
            &BTreeMap::new(),
            Arc::new(FixedClock::default()),
        )
        .err()
        .unwrap();
        assert_eq!(err.code, ErrorCode::ConfigurationError);
    }

    #[test]
    fn failed_handshake_is_reported_not_fatal() {
        let dead: Box<dyn ToolTransport> = Box::new(Loopback(|_: &str| Some("not json".to_string())));
        let gw = Gateway::connect(
            vec![("dead".into(), dead), ("gwas".into(), transport(corpus("gwas_associations", json!([]))))],
            &BTreeMap::new(),
            Arc::new(FixedClock::default()),
        )
        .unwrap();
        assert_eq!(gw.diagnostics.len(), 1);
        assert_eq!(gw.list_tools().len(), 2);
    }
}
