//! Regenerates `fixtures/golden/`: runs the fixture pipeline for TP53 with
//! the scripted author, recording every model turn, then one reinvoke of the
//! genetic section.
//!
//! cargo run -p tsa --example record_golden

use std::fs;
use std::path::Path;

use tsa::config::{BackendSpec, ClockSpec, Overrides, Settings, Source};
use tsa::runner::{NewAssessment, Session};
use tsa_core::domain::SectionId;
use tsa_core::orchestrator::RunOutcome;
use tsa_core::refinement::RefinementAction;

pub const REINVOKE: &str = "Please expand knockout phenotype coverage with the allele used.";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let golden = fixtures.join("golden");
    fs::create_dir_all(&golden)?;
    let cassette = golden.join("cassette.jsonl");
    if cassette.exists() {
        fs::remove_file(&cassette)?;
    }
    let work = tempfile::tempdir()?;
    let overrides = Overrides {
        fixtures: Some(fixtures.clone()),
        assessments: Some(work.path().to_path_buf()),
        ..Default::default()
    };
    let mut settings = Settings::resolve(None, &overrides)?;
    settings.backend = BackendSpec::Record { cassette: cassette.clone(), from: Source::Scripted };
    settings.clock = ClockSpec::Fixed { at: tsa_core::clock::FixedClock::DEFAULT_INSTANT.into() };

    let req = NewAssessment { target: "TP53".into(), id: Some("golden".into()), ..Default::default() };
    let mut session = Session::create(&settings, &req)?;
    match session.run()? {
        RunOutcome::Completed(_) => {}
        RunOutcome::Halted { after } => return Err(format!("halted after {after}").into()),
    }
    fs::copy(work.path().join("golden/report.md"), golden.join("report.md"))?;
    session.apply(&RefinementAction::Reinvoke {
        section_id: SectionId::Genetic,
        instruction: REINVOKE.into(),
        actor: "reviewer".into(),
    })?;
    fs::copy(work.path().join("golden/report.md"), golden.join("report-reinvoked.md"))?;
    println!("wrote {}", golden.display());
    Ok(())
}
