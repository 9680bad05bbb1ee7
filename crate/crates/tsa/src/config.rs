//! Configuration file and resolved run settings.
//!
//! ```toml
//! [pipeline]
//! tau = 0.5
//! max_turns = 12
//! max_tool_calls = 24
//! clock = "fixed"                    # or "system"; default fixed when replaying
//! fixed_instant = "2025-01-01T00:00:00Z"
//!
//! [paths]
//! assessments = "assessments"
//! skills = "fixtures/skills"
//! system_prompt = "fixtures/system.md"
//! denylist = "fixtures/denylist.txt"
//!
//! [backend]
//! kind = "replay"                    # replay | record | live | scripted
//! cassette = "fixtures/golden/cassette.jsonl"
//! record_from = "live"               # inner backend when kind = "record"
//!
//! [judge]
//! kind = "heuristic"                 # or "live"
//!
//! [[servers]]
//! name = "gwas_associations"
//! fixture = "fixtures/servers/gwas_associations.json"
//! # command = ["tsa", "fixture-server", "--corpus", "…"]
//! # url = "http://127.0.0.1:7300/gwas_associations"
//!
//! [domain_tags]
//! mouse_phenotypes = ["genetic"]
//!
//! [graph]
//! species_translatability = ["homology", "genetic"]
//!
//! [service]
//! token = "secret"
//! ```
//!
//! Relative paths resolve against the directory holding the file. A
//! `--fixtures` directory supplies `servers/*.json`, `skills/`, `system.md`
//! and `denylist.txt` in that layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsa_core::backend::Budget;
use tsa_core::grounding::DEFAULT_TAU;
use tsa_core::{Error, Result};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub backend: Option<BackendSection>,
    #[serde(default)]
    pub judge: Option<JudgeSection>,
    #[serde(default)]
    pub servers: Vec<ServerSpec>,
    #[serde(default)]
    pub domain_tags: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub graph: Option<BTreeMap<String, Vec<String>>>,
    #[serde(default)]
    pub service: ServiceSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub tau: Option<f64>,
    pub max_turns: Option<u32>,
    pub max_tool_calls: Option<u32>,
    pub clock: Option<String>,
    pub fixed_instant: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub assessments: Option<PathBuf>,
    pub skills: Option<PathBuf>,
    pub system_prompt: Option<PathBuf>,
    pub denylist: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: String,
    pub cassette: Option<PathBuf>,
    pub record_from: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeSection {
    pub kind: String,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSection {
    pub token: Option<String>,
}

/// One tool server: an in-process fixture, a child process speaking
/// line-delimited JSON-RPC, or an HTTP endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ServerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ServerKind {
    Fixture { fixture: PathBuf },
    Stdio { command: Vec<String> },
    Http { url: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Live,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Replay { cassette: PathBuf },
    Record { cassette: PathBuf, from: Source },
    Live,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeSpec {
    Heuristic,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClockSpec {
    Fixed { at: String },
    System,
}

/// Everything a run needs, with absolute paths. Frozen into the plan so a
/// resume sees the same settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub assessments: PathBuf,
    pub skills: PathBuf,
    pub system_prompt: Option<PathBuf>,
    pub denylist: Option<PathBuf>,
    pub servers: Vec<ServerSpec>,
    pub domain_tags: BTreeMap<String, Vec<String>>,
    pub graph: Option<BTreeMap<String, Vec<String>>>,
    pub backend: BackendSpec,
    pub judge: JudgeSpec,
    pub tau: f64,
    pub budget: Budget,
    pub clock: ClockSpec,
}

/// Command-line choices that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub fixtures: Option<PathBuf>,
    pub replay: Option<PathBuf>,
    pub record: Option<PathBuf>,
    pub assessments: Option<PathBuf>,
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    fs::canonicalize(&joined).unwrap_or(joined)
}

fn cwd() -> PathBuf {
    std::env::current_dir().unwrap_or_else(|_| PathBuf::from("/"))
}

pub fn read_config(path: &Path) -> Result<(ConfigFile, PathBuf)> {
    let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let file: ConfigFile = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(|p| absolute(&cwd(), p)).unwrap_or_else(cwd);
    Ok((file, base))
}

/// The servers a fixtures directory provides, one per `servers/*.json`.
pub fn fixture_servers(dir: &Path) -> Result<Vec<ServerSpec>> {
    let servers = dir.join("servers");
    let mut files: Vec<PathBuf> = fs::read_dir(&servers)
        .map_err(|e| Error::config(format!("{}: {e}", servers.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files
        .into_iter()
        .map(|p| ServerSpec {
            name: p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
            kind: ServerKind::Fixture { fixture: p },
        })
        .collect())
}

fn source(text: Option<&str>) -> Result<Source> {
    match text.unwrap_or("live") {
        "live" => Ok(Source::Live),
        "scripted" => Ok(Source::Scripted),
        other => Err(Error::config(format!("unknown record_from '{other}'; expected live or scripted"))),
    }
}

impl Settings {
    pub fn resolve(file: Option<(ConfigFile, PathBuf)>, o: &Overrides) -> Result<Settings> {
        let (file, base) = file.unwrap_or_else(|| (ConfigFile::default(), cwd()));
        let here = cwd();
        let fixtures = o.fixtures.as_ref().map(|f| absolute(&here, f));
        let from_file = |p: &Option<PathBuf>| p.as_ref().map(|p| absolute(&base, p));
        let pick = |name: &str, file_value: Option<PathBuf>| -> Option<PathBuf> {
            fixtures.as_ref().map(|f| f.join(name)).filter(|p| p.exists()).or(file_value)
        };

        let skills = pick("skills", from_file(&file.paths.skills))
            .ok_or_else(|| Error::config("no skills directory: pass --fixtures or set paths.skills"))?;
        let system_prompt = pick("system.md", from_file(&file.paths.system_prompt));
        let denylist = pick("denylist.txt", from_file(&file.paths.denylist));
        let assessments = o
            .assessments
            .as_ref()
            .map(|p| absolute(&here, p))
            .or_else(|| from_file(&file.paths.assessments))
            .unwrap_or_else(|| here.join("assessments"));

        let mut servers: Vec<ServerSpec> = file
            .servers
            .iter()
            .map(|s| ServerSpec {
                name: s.name.clone(),
                kind: match &s.kind {
                    ServerKind::Fixture { fixture } => ServerKind::Fixture { fixture: absolute(&base, fixture) },
                    other => other.clone(),
                },
            })
            .collect();
        if let Some(f) = &fixtures {
            for s in fixture_servers(f)? {
                if !servers.iter().any(|x| x.name == s.name) {
                    servers.push(s);
                }
            }
        }

        let backend = match (&o.replay, &o.record, &file.backend) {
            (Some(_), Some(_), _) => return Err(Error::config("--record and --replay are mutually exclusive")),
            (Some(c), None, _) => BackendSpec::Replay { cassette: absolute(&here, c) },
            (None, Some(c), b) => BackendSpec::Record {
                cassette: absolute(&here, c),
                from: source(b.as_ref().and_then(|b| b.record_from.as_deref()))?,
            },
            (None, None, None) => BackendSpec::Live,
            (None, None, Some(b)) => {
                let cassette = || {
                    from_file(&b.cassette).ok_or_else(|| Error::config(format!("backend '{}' needs a cassette", b.kind)))
                };
                match b.kind.as_str() {
                    "replay" => BackendSpec::Replay { cassette: cassette()? },
                    "record" => BackendSpec::Record { cassette: cassette()?, from: source(b.record_from.as_deref())? },
                    "live" => BackendSpec::Live,
                    "scripted" => BackendSpec::Scripted,
                    other => return Err(Error::config(format!("unknown backend kind '{other}'"))),
                }
            }
        };
        let judge = match file.judge.as_ref().map(|j| j.kind.as_str()).unwrap_or("heuristic") {
            "heuristic" => JudgeSpec::Heuristic,
            "live" => JudgeSpec::Live,
            other => return Err(Error::config(format!("unknown judge kind '{other}'"))),
        };
        let instant = file.pipeline.fixed_instant.clone().unwrap_or_else(|| "2025-01-01T00:00:00Z".into());
        let clock = match file.pipeline.clock.as_deref() {
            Some("fixed") => ClockSpec::Fixed { at: instant },
            Some("system") => ClockSpec::System,
            Some(other) => return Err(Error::config(format!("unknown clock '{other}'"))),
            None if matches!(backend, BackendSpec::Replay { .. } | BackendSpec::Scripted) => ClockSpec::Fixed { at: instant },
            None => ClockSpec::System,
        };
        let tau = file.pipeline.tau.unwrap_or(DEFAULT_TAU);
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::config(format!("tau {tau} is outside [0, 1]")));
        }
        let d = Budget::default();
        let budget = Budget {
            max_turns: file.pipeline.max_turns.unwrap_or(d.max_turns),
            max_tool_calls: file.pipeline.max_tool_calls.unwrap_or(d.max_tool_calls),
        };
        Ok(Settings {
            assessments,
            skills,
            system_prompt,
            denylist,
            servers,
            domain_tags: file.domain_tags,
            graph: file.graph,
            backend,
            judge,
            tau,
            budget,
            clock,
        })
    }
}

/// The bearer token the service checks, if any.
pub fn service_token(file: Option<&ConfigFile>) -> Option<String> {
    std::env::var("TSA_SERVICE_TOKEN").ok().or_else(|| file.and_then(|f| f.service.token.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_dir_fills_paths_and_servers() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
        let o = Overrides { fixtures: Some(dir.clone()), replay: Some(dir.join("golden/cassette.jsonl")), ..Default::default() };
        let s = Settings::resolve(None, &o).unwrap();
        assert!(s.skills.ends_with("fixtures/skills"));
        assert_eq!(s.servers.len(), 8);
        assert!(matches!(s.backend, BackendSpec::Replay { .. }));
        assert!(matches!(s.clock, ClockSpec::Fixed { .. }));
    }

    #[test]
    fn file_values_and_errors() {
        let text = r#"
            [pipeline]
            tau = 0.7
            max_turns = 5
            [paths]
            skills = "sk"
            [backend]
            kind = "scripted"
            [[servers]]
            name = "remote"
            url = "http://127.0.0.1:1/x"
            [[servers]]
            name = "child"
            command = ["tsa", "fixture-server"]
        "#;
        let file: ConfigFile = toml::from_str(text).unwrap();
        let s = Settings::resolve(Some((file, PathBuf::from("/base"))), &Overrides::default()).unwrap();
        assert_eq!(s.tau, 0.7);
        assert_eq!(s.budget.max_turns, 5);
        assert_eq!(s.skills, PathBuf::from("/base/sk"));
        assert_eq!(s.servers[0].kind, ServerKind::Http { url: "http://127.0.0.1:1/x".into() });
        assert!(matches!(s.servers[1].kind, ServerKind::Stdio { .. }));

        let e = Settings::resolve(None, &Overrides::default()).unwrap_err();
        assert_eq!(e.code, tsa_core::ErrorCode::ConfigurationError);
        let bad: std::result::Result<ConfigFile, _> = toml::from_str("[pipeline]\nspeed = 3\n");
        assert!(bad.is_err());
        let file: ConfigFile = toml::from_str("[paths]\nskills = \"s\"\n[pipeline]\ntau = 2.0\n").unwrap();
        assert!(Settings::resolve(Some((file, PathBuf::from("/b"))), &Overrides::default()).is_err());
    }
}
