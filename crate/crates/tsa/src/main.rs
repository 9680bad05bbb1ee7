use std::collections::BTreeMap;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tsa_core::domain::SectionId;
use tsa_core::eval::render_summary;
use tsa_core::orchestrator::RunOutcome;
use tsa_core::refinement::RefinementAction;
use tsa_core::report::ExportFormat;
use tsa_core::state::RunStatus;
use tsa_core::{Error, ErrorCode, Result};

use tsa::config::{read_config, service_token, BackendSpec, Overrides, Settings};
use tsa::runner::{assessment_path, evaluate_all, export_dir, NewAssessment, Session};
use tsa::service::{router, AppState};
use tsa::transport::{fixture_router, load_corpus, serve_stdio};

const EXIT_PIPELINE: u8 = 3;
const EXIT_CONFIG: u8 = 4;

/// Evidence-grounded target safety assessment reports.
#[derive(Debug, Parser)]
#[command(name = "tsa", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "TSA_CONFIG")]
    config: Option<PathBuf>,
    /// Directory with servers/, skills/, system.md and denylist.txt.
    #[arg(long, global = true)]
    fixtures: Option<PathBuf>,
    /// Replay model turns from this cassette.
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
    /// Record model turns into this cassette.
    #[arg(long, global = true)]
    record: Option<PathBuf>,
    /// Where assessment directories live.
    #[arg(long, global = true)]
    assessments: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Plan and run a new assessment.
    Run {
        #[arg(long)]
        target: String,
        #[arg(long)]
        id: Option<String>,
        #[arg(long = "therapeutic-area")]
        therapeutic_area: Option<String>,
        #[arg(long)]
        modality: Option<String>,
        #[arg(long, value_delimiter = ',')]
        species: Option<Vec<String>>,
        #[arg(long)]
        notes: Option<String>,
        /// Runtime directive, `namespace.name=value`; repeatable.
        #[arg(long = "set", value_parser = key_value)]
        set: Vec<(String, String)>,
        /// Apply this reviewer's accepted preferences.
        #[arg(long)]
        actor: Option<String>,
    },
    /// Continue an interrupted assessment.
    Resume { assessment: String },
    /// Score an assessment.
    Evaluate {
        assessment: String,
        #[arg(long)]
        json: bool,
    },
    /// Print the report.
    Export {
        assessment: String,
        #[arg(long, default_value = "md")]
        format: String,
    },
    /// Replace a section body.
    Edit {
        assessment: String,
        section: String,
        /// File with the new body; `-` reads stdin.
        #[arg(long)]
        body: PathBuf,
        #[arg(long, default_value = "reviewer")]
        actor: String,
    },
    /// Regenerate a section with an instruction.
    Reinvoke {
        assessment: String,
        section: String,
        #[arg(long)]
        instruction: String,
        #[arg(long, default_value = "reviewer")]
        actor: String,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Serve fixture corpora as tool servers.
    FixtureServer {
        /// One corpus over stdio.
        #[arg(long, conflicts_with = "dir")]
        corpus: Option<PathBuf>,
        /// Every corpus in a directory over HTTP, at `/<name>`.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long, default_value_t = 7300)]
        port: u16,
    },
}

fn key_value(s: &str) -> core::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
        .ok_or_else(|| format!("'{s}' is not key=value"))
}

fn settings(cli: &Cli) -> Result<Settings> {
    let file = cli.config.as_deref().map(read_config).transpose()?;
    let overrides = Overrides {
        fixtures: cli.fixtures.clone(),
        replay: cli.replay.clone(),
        record: cli.record.clone(),
        assessments: cli.assessments.clone(),
    };
    Settings::resolve(file, &overrides)
}

/// Backend override for reopening an assessment, from `--replay`/`--record`.
fn backend_override(cli: &Cli) -> Result<Option<BackendSpec>> {
    if cli.replay.is_none() && cli.record.is_none() {
        return Ok(None);
    }
    let file = cli.config.as_deref().map(read_config).transpose()?;
    let o = Overrides {
        replay: cli.replay.clone(),
        record: cli.record.clone(),
        fixtures: cli.fixtures.clone(),
        assessments: cli.assessments.clone(),
    };
    // Resolution may fail for unrelated reasons (no skills dir); only the
    // backend is wanted here.
    match Settings::resolve(file, &o) {
        Ok(s) => Ok(Some(s.backend)),
        Err(_) => {
            let here = std::env::current_dir().unwrap_or_default();
            Ok(cli.replay.as_ref().map(|c| BackendSpec::Replay { cassette: here.join(c) }))
        }
    }
}

/// An assessment given as a directory path or as an id.
fn locate(cli: &Cli, assessment: &str) -> Result<PathBuf> {
    let p = Path::new(assessment);
    if p.is_dir() {
        return std::fs::canonicalize(p).map_err(|e| Error::storage(format!("{}: {e}", p.display())));
    }
    let root = match &cli.assessments {
        Some(a) => a.clone(),
        None => settings(cli).map(|s| s.assessments).unwrap_or_else(|_| PathBuf::from("assessments")),
    };
    let path = assessment_path(&root, assessment)?;
    if !path.is_dir() {
        return Err(Error::not_found(format!("no assessment '{assessment}' under {}", root.display())));
    }
    std::fs::canonicalize(&path).map_err(|e| Error::storage(format!("{}: {e}", path.display())))
}

/// `TSA_ABORT_AFTER_SECTION=k` stops after the k-th checkpoint.
fn abort_after() -> Result<Option<usize>> {
    match std::env::var("TSA_ABORT_AFTER_SECTION") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::config(format!("TSA_ABORT_AFTER_SECTION='{v}' is not a count"))),
        Err(_) => Ok(None),
    }
}

fn report_outcome(session: &Session, outcome: RunOutcome) -> ExitCode {
    match outcome {
        RunOutcome::Completed(_) => {
            println!("completed {}", session.id());
            println!("{}", session.dir.path().join("report.md").display());
            ExitCode::SUCCESS
        }
        RunOutcome::Halted { after } => {
            eprintln!("halted after {after}; resume with: tsa resume {}", session.id());
            ExitCode::from(EXIT_PIPELINE)
        }
    }
}

fn read_body(path: &Path) -> Result<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        std::io::Read::read_to_string(&mut std::io::stdin(), &mut s).map_err(|e| Error::storage(e.to_string()))?;
        return Ok(s);
    }
    std::fs::read_to_string(path).map_err(|e| Error::invalid_argument(format!("{}: {e}", path.display())))
}

fn section(raw: &str) -> Result<SectionId> {
    raw.parse().map_err(|_| Error::invalid_argument(format!("no section '{raw}'")))
}

fn refine(cli: &Cli, assessment: &str, action: RefinementAction) -> Result<ExitCode> {
    let path = locate(cli, assessment)?;
    let mut session = Session::open(&path, backend_override(cli)?)?;
    let out = session.apply(&action)?;
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ExitCode::SUCCESS)
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::config(format!("cannot start runtime: {e}")))
}

async fn listen(host: &str, port: u16, app: axum::Router) -> Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port))
        .await
        .map_err(|e| Error::config(format!("cannot bind {host}:{port}: {e}")))?;
    eprintln!("listening on http://{}", listener.local_addr().map(|a| a.to_string()).unwrap_or_default());
    axum::serve(listener, app).await.map_err(|e| Error::storage(format!("server stopped: {e}")))
}

fn execute(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Run { target, id, therapeutic_area, modality, species, notes, set, actor } => {
            let settings = settings(cli)?;
            let req = NewAssessment {
                target: target.clone(),
                therapeutic_area: therapeutic_area.clone(),
                modality: modality.clone(),
                species: species.clone(),
                notes: notes.clone(),
                directives: set.clone(),
                id: id.clone(),
                actor: actor.clone(),
            };
            let mut session = Session::create(&settings, &req)?;
            session.halt_after = abort_after()?;
            eprintln!("assessment {}", session.id());
            let outcome = session.run()?;
            Ok(report_outcome(&session, outcome))
        }
        Command::Resume { assessment } => {
            let path = locate(cli, assessment)?;
            let mut session = Session::open(&path, backend_override(cli)?)?;
            if session.status()? == Some(RunStatus::Completed) {
                println!("already completed {}", session.id());
                return Ok(ExitCode::SUCCESS);
            }
            session.halt_after = abort_after()?;
            let outcome = session.resume()?;
            Ok(report_outcome(&session, outcome))
        }
        Command::Evaluate { assessment, json } => {
            let report = evaluate_all(&locate(cli, assessment)?)?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", render_summary(&report));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Export { assessment, format } => {
            let format: ExportFormat = format.parse()?;
            let text = export_dir(&locate(cli, assessment)?, format)?;
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|e| Error::storage(e.to_string()))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Edit { assessment, section: s, body, actor } => {
            let action = RefinementAction::Edit { section_id: section(s)?, body: read_body(body)?, actor: actor.clone() };
            refine(cli, assessment, action)
        }
        Command::Reinvoke { assessment, section: s, instruction, actor } => {
            let action = RefinementAction::Reinvoke {
                section_id: section(s)?,
                instruction: instruction.clone(),
                actor: actor.clone(),
            };
            refine(cli, assessment, action)
        }
        Command::Serve { port, host } => {
            let settings = settings(cli)?;
            let file = cli.config.as_deref().map(read_config).transpose()?;
            let token = service_token(file.as_ref().map(|(f, _)| f));
            let app = router(AppState::new(settings, token));
            runtime()?.block_on(listen(host, *port, app))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::FixtureServer { corpus, dir, port } => {
            if let Some(c) = corpus {
                let server = load_corpus(c)?;
                let stdin = std::io::stdin();
                serve_stdio(server, BufReader::new(stdin.lock()), std::io::stdout().lock())
                    .map_err(|e| Error::tool_unavailable(e.to_string()))?;
                return Ok(ExitCode::SUCCESS);
            }
            let dir = dir.as_ref().ok_or_else(|| Error::invalid_argument("pass --corpus FILE or --dir DIR"))?;
            let mut servers = BTreeMap::new();
            for spec in tsa::config::fixture_servers(dir)? {
                if let tsa::config::ServerKind::Fixture { fixture } = &spec.kind {
                    servers.insert(spec.name.clone(), load_corpus(fixture)?);
                }
            }
            runtime()?.block_on(listen("127.0.0.1", *port, fixture_router(servers)))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn exit_for(code: ErrorCode) -> u8 {
    match code {
        ErrorCode::ConfigurationError | ErrorCode::SkillNotFound | ErrorCode::InvalidProvenance => EXIT_CONFIG,
        ErrorCode::InvalidArgument | ErrorCode::NotFound => 2,
        _ => EXIT_PIPELINE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(e.code))
        }
    }
}
