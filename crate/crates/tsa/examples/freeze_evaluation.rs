//! Regenerates `fixtures/eval/golden-evaluation.json` from the labelled
//! fixture. Run after a deliberate change to scoring.

#[allow(dead_code)]
#[path = "../tests/support/labelled.rs"]
mod labelled;

use std::collections::BTreeMap;

fn main() {
    let l = labelled::load();
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut out = BTreeMap::new();
    for case in labelled::cases(&l) {
        let dir = labelled::materialize(&l, &case, tmp.path());
        let report = tsa::runner::evaluate_all(&dir).expect("evaluation");
        out.insert(case, report);
    }
    let path = labelled::fixtures().join("eval/golden-evaluation.json");
    let text = serde_json::to_string_pretty(&out).expect("json") + "\n";
    std::fs::write(&path, text).expect("write golden");
    println!("wrote {}", path.display());
}
