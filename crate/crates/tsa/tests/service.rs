//! HTTP API against a bound port, driving the golden replay.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tsa::config::{Overrides, Settings};
use tsa::service::{router, AppState};

struct Server {
    base: String,
    _rt: tokio::runtime::Runtime,
    _tmp: tempfile::TempDir,
    token: Option<String>,
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn serve(token: Option<&str>) -> Server {
    let tmp = tempfile::tempdir().unwrap();
    let o = Overrides {
        fixtures: Some(fixtures()),
        replay: Some(fixtures().join("golden/cassette.jsonl")),
        assessments: Some(tmp.path().to_path_buf()),
        ..Default::default()
    };
    let settings = Settings::resolve(None, &o).unwrap();
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let port = listener.local_addr().unwrap().port();
    let app = router(AppState::new(settings, token.map(str::to_owned)));
    rt.spawn(async move { axum::serve(listener, app).await });
    Server { base: format!("http://127.0.0.1:{port}"), _rt: rt, _tmp: tmp, token: token.map(str::to_owned) }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).timeout_global(Some(Duration::from_secs(30))).build().into()
}

impl Server {
    fn call(&self, method: &str, path: &str, body: Option<Value>, headers: &[(&str, &str)]) -> (u16, String) {
        let url = format!("{}{path}", self.base);
        let auth = self.token.as_ref().map(|t| format!("Bearer {t}"));
        let mut req = ureq::http::Request::builder().method(method).uri(&url);
        if let Some(a) = &auth {
            req = req.header("authorization", a);
        }
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let a = agent();
        let mut resp = match body {
            Some(b) => a.run(req.header("content-type", "application/json").body(b.to_string()).unwrap()),
            None => a.run(req.body(()).unwrap()),
        }
        .unwrap();
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_to_string().unwrap())
    }

    fn json(&self, method: &str, path: &str, body: Option<Value>) -> (u16, Value) {
        let (s, text) = self.call(method, path, body, &[]);
        (s, serde_json::from_str(&text).unwrap_or(Value::String(text)))
    }

    fn completed(&self, id: &str) -> Value {
        let start = Instant::now();
        loop {
            let (s, v) = self.json("GET", &format!("/assessments/{id}"), None);
            assert_eq!(s, 200, "{v}");
            if v["status"] == "completed" && v["busy"] == false {
                return v;
            }
            assert!(v["status"] != "interrupted", "run interrupted: {v}");
            assert!(start.elapsed() < Duration::from_secs(60), "run did not finish: {v}");
            std::thread::sleep(Duration::from_millis(50));
        }
    }

    fn golden(&self) -> &'static str {
        let (s, v) = self.json("POST", "/assessments", Some(json!({"target": "TP53", "id": "golden"})));
        assert_eq!(s, 202, "{v}");
        assert_eq!(v, json!({"assessment_id": "golden", "status": "running"}));
        self.completed("golden");
        "golden"
    }
}

/// Parses an SSE body into (id, event, data) triples.
fn sse(body: &str) -> Vec<(u64, String, Value)> {
    body.split("\n\n")
        .filter_map(|block| {
            let mut id = None;
            let mut event = None;
            let mut data = None;
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("id:") {
                    id = v.trim().parse().ok();
                } else if let Some(v) = line.strip_prefix("event:") {
                    event = Some(v.trim().to_owned());
                } else if let Some(v) = line.strip_prefix("data:") {
                    data = serde_json::from_str(v.trim()).ok();
                }
            }
            Some((id?, event?, data?))
        })
        .collect()
}

#[test]
fn run_then_read_sections_and_export() {
    let srv = serve(None);
    let id = srv.golden();
    let (_, summary) = srv.json("GET", &format!("/assessments/{id}"), None);
    assert_eq!(summary["target"]["identifier"], "TP53");
    assert_eq!(summary["completed"].as_array().unwrap().len(), 8);
    let sections = summary["sections"].as_array().unwrap();
    assert_eq!(sections.len(), 8);
    assert!(sections.iter().all(|s| s["stale"] == false && s["revision"] == 0));

    let (s, list) = srv.json("GET", "/assessments", None);
    assert_eq!(s, 200);
    assert_eq!(list["assessments"].as_array().unwrap().len(), 1);

    let (s, genetic) = srv.json("GET", &format!("/assessments/{id}/sections/genetic"), None);
    assert_eq!(s, 200);
    assert!(genetic["draft"]["body"].as_str().unwrap().contains("[ev:"), "{genetic}");

    let (s, md) = srv.call("GET", &format!("/assessments/{id}/export?format=md"), None, &[]);
    assert_eq!(s, 200);
    assert_eq!(md, std::fs::read_to_string(fixtures().join("golden/report.md")).unwrap());
    let (s, html) = srv.call("GET", &format!("/assessments/{id}/export?format=html"), None, &[]);
    assert_eq!(s, 200);
    assert!(html.contains("<h2"));
    let (s, _) = srv.call("GET", &format!("/assessments/{id}/export?format=pdf"), None, &[]);
    assert_eq!(s, 422);

    let (s, ev) = srv.json("GET", &format!("/assessments/{id}/evidence/1"), None);
    assert_eq!(s, 200);
    assert_eq!(ev["id"], 1);
    let (s, _) = srv.json("GET", &format!("/assessments/{id}/evidence/999"), None);
    assert_eq!(s, 404);

    let (s, eval) = srv.json("GET", &format!("/assessments/{id}/evaluation"), None);
    assert_eq!(s, 200);
    assert_eq!(eval["target"], "TP53");
    assert!(eval["d1"]["consistency"].as_f64().unwrap() > 0.0);

    let (s, secs) = srv.json("GET", "/sections", None);
    assert_eq!(s, 200);
    assert_eq!(secs.as_array().unwrap().len(), 8);

    // A completed assessment resumes to a no-op.
    let (s, v) = srv.json("POST", &format!("/assessments/{id}/resume"), None);
    assert_eq!((s, v["status"].clone()), (200, json!("completed")));
}

#[test]
fn missing_things_are_404() {
    let srv = serve(None);
    let (s, v) = srv.json("GET", "/assessments/nope", None);
    assert_eq!(s, 404);
    assert_eq!(v["code"], "not-found");
    let id = srv.golden();
    let (s, _) = srv.json("GET", &format!("/assessments/{id}/sections/astrology"), None);
    assert_eq!(s, 404);
    let (s, _) = srv.json("GET", "/assessments/..%2F..%2Fetc/sections/genetic", None);
    assert!(s == 404 || s == 422, "traversal answered {s}");
}

#[test]
fn bearer_token_is_enforced() {
    let srv = serve(Some("s3cret"));
    let (s, _) = srv.json("GET", "/sections", None);
    assert_eq!(s, 200);
    let url = format!("{}/sections", srv.base);
    let mut resp = agent().get(&url).call().unwrap();
    assert_eq!(resp.status().as_u16(), 401);
    let v: Value = serde_json::from_str(&resp.body_mut().read_to_string().unwrap()).unwrap();
    assert_eq!(v["code"], "unauthorized");
    let mut resp = agent().get(&url).header("authorization", "Bearer wrong").call().unwrap();
    assert_eq!(resp.status().as_u16(), 401);
    let _ = resp.body_mut().read_to_string();
}

#[test]
fn edits_apply_and_blocking_edits_are_rejected() {
    let srv = serve(None);
    let id = srv.golden();
    let path = format!("/assessments/{id}/sections/clinical");
    let (_, before) = srv.json("GET", &path, None);

    let bad = json!({"body": "Patients developed rashes at 12% incidence [ev:999].", "actor": "alice"});
    let (s, v) = srv.json("PATCH", &path, Some(bad));
    assert_eq!(s, 422, "{v}");
    assert_eq!(v["cause"], "hallucinated-citation");
    let (_, unchanged) = srv.json("GET", &path, None);
    assert_eq!(unchanged, before);

    let body = before["draft"]["body"].as_str().unwrap().to_owned() + "\n\nReviewed by the safety board.";
    let (s, v) = srv.json("PATCH", &path, Some(json!({"body": body, "actor": "alice"})));
    assert_eq!(s, 200, "{v}");
    assert_eq!(v["draft"]["revision"], 1, "{v}");
    assert_eq!(v["draft"]["produced_by"], "human");

    let (s, v) = srv.json(
        "POST",
        &format!("{path}/append"),
        Some(json!({"text": "A follow-up review is planned.", "actor": "alice"})),
    );
    assert_eq!(s, 200, "{v}");
    assert_eq!(v["draft"]["revision"], 2);
}

#[test]
fn reinvoking_genetic_marks_three_sections_stale() {
    let srv = serve(None);
    let id = srv.golden();
    let instruction = "Please expand knockout phenotype coverage with the allele used.";
    let (s, v) = srv.json(
        "POST",
        &format!("/assessments/{id}/sections/genetic/reinvoke"),
        Some(json!({"instruction": instruction, "actor": "alice"})),
    );
    assert_eq!(s, 200, "{v}");
    let (_, summary) = srv.json("GET", &format!("/assessments/{id}"), None);
    let stale: Vec<&str> = summary["sections"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|s| s["stale"] == true)
        .map(|s| s["section_id"].as_str().unwrap())
        .collect();
    assert_eq!(stale.len(), 3, "{stale:?}");
    assert!(!stale.contains(&"genetic"));
    let (_, md) = srv.call("GET", &format!("/assessments/{id}/export?format=md"), None, &[]);
    assert_eq!(md, std::fs::read_to_string(fixtures().join("golden/report-reinvoked.md")).unwrap());
}

#[test]
fn event_stream_is_ordered_and_resumable() {
    let srv = serve(None);
    let id = srv.golden();
    let (s, body) = srv.call("GET", &format!("/assessments/{id}/events?follow=false"), None, &[]);
    assert_eq!(s, 200);
    let events = sse(&body);
    assert!(events.len() > 16, "{} events", events.len());
    let seqs: Vec<u64> = events.iter().map(|e| e.0).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]), "{seqs:?}");
    let kinds: Vec<&str> = events.iter().map(|e| e.1.as_str()).collect();
    assert_eq!(kinds.iter().filter(|k| **k == "section_started").count(), 8);
    assert_eq!(kinds.last(), Some(&"pipeline_completed"));
    assert!(events.iter().all(|(seq, _, data)| data["seq"] == *seq));

    let mid = seqs[seqs.len() / 2];
    let (_, tail) = srv.call(
        "GET",
        &format!("/assessments/{id}/events?follow=false"),
        None,
        &[("last-event-id", &mid.to_string())],
    );
    let tail: Vec<u64> = sse(&tail).into_iter().map(|e| e.0).collect();
    assert_eq!(tail, seqs.iter().copied().filter(|s| *s > mid).collect::<Vec<_>>());
    let (_, q) = srv.call("GET", &format!("/assessments/{id}/events?follow=false&after={mid}"), None, &[]);
    assert_eq!(sse(&q).len(), tail.len());
}

#[test]
fn following_stream_ends_when_the_run_does() {
    let srv = serve(None);
    let (s, _) = srv.json("POST", "/assessments", Some(json!({"target": "TP53", "id": "live"})));
    assert_eq!(s, 202);
    let (s, body) = srv.call("GET", "/assessments/live/events", None, &[]);
    assert_eq!(s, 200);
    let events = sse(&body);
    assert_eq!(events.last().map(|e| e.1.as_str()), Some("pipeline_completed"));
}

#[test]
fn concurrent_writers_get_409_and_lose_nothing() {
    let srv = serve(None);
    let id = srv.golden();
    let path = format!("/assessments/{id}/sections/homology/append");
    let statuses: Vec<u16> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..8)
            .map(|n| {
                let (srv, path) = (&srv, &path);
                s.spawn(move || srv.json("POST", path, Some(json!({"text": format!("Note {n}."), "actor": "alice"}))).0)
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(statuses.iter().all(|s| *s == 200 || *s == 409), "{statuses:?}");
    let applied = statuses.iter().filter(|s| **s == 200).count();
    assert!(applied >= 1);
    let (_, v) = srv.json("GET", &format!("/assessments/{id}/sections/homology"), None);
    assert_eq!(v["draft"]["revision"], applied, "{statuses:?}");
    let (s, v) = srv.json("POST", &format!("/assessments/{id}/resume"), None);
    assert_eq!((s, v["status"].clone()), (200, json!("completed")));
}

#[test]
fn malformed_create_is_rejected() {
    let srv = serve(None);
    let (s, _) = srv.json("POST", "/assessments", Some(json!({"target": "TP53", "colour": "red"})));
    assert_eq!(s, 422);
    let (s, _) = srv.json("POST", "/assessments", Some(json!({"target": ""})));
    assert!(s == 422 || s == 400, "{s}");
}

#[test]
fn preferences_round_trip() {
    let srv = serve(None);
    let (s, v) = srv.json("GET", "/preferences", None);
    assert_eq!(s, 200);
    assert_eq!(v["accepted"], json!({}));
    let delta = json!({"actor": "alice", "key": "quality.max_words", "value": 400, "evidence": [0, 1, 2], "status": "proposed"});
    let (s, v) = srv.json("POST", "/preferences", Some(delta));
    assert_eq!(s, 200, "{v}");
    assert_eq!(v["accepted"]["alice"]["quality.max_words"]["status"], "accepted");
    let (_, again) = srv.json("GET", "/preferences", None);
    assert_eq!(again, v);
    let id = srv.golden();
    let (s, v) = srv.json("GET", &format!("/assessments/{id}/preferences"), None);
    assert_eq!(s, 200);
    assert_eq!(v["proposed"], json!([]));
}
