mod common;

use std::sync::Mutex;

use pipe_core::calibration::service::{router, CalibrationState, CandidatePage, SuggestResponse, SweepResponse, ThresholdsResponse};
use pipe_core::calibration::{Annotation, AnnotationStore, CandidateInfo};
use pipe_core::http::BackgroundServer;
use pipe_core::{LocalBlobStore, PipelineConfig};
use serde_json::{json, Value};

struct Fixture {
    dir: tempfile::TempDir,
    candidates: Vec<CandidateInfo>,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("pipe.toml"), "seed = 4\n").unwrap();
        let blobs = LocalBlobStore::open(dir.path().join("blobs")).unwrap();
        std::fs::write(blobs.root().join("c1.png"), b"\x89PNG fake").unwrap();
        let candidates = common::planted_candidates().into_iter().map(|(c, _)| c).collect();
        Fixture { dir, candidates }
    }

    fn serve(&self, token: Option<&str>) -> BackgroundServer {
        let keys = self.candidates.iter().map(|c| c.key.clone());
        let store = AnnotationStore::open(&self.dir.path().join("annotations.jsonl"), keys).unwrap();
        let state = CalibrationState {
            candidates: self.candidates.clone(),
            store: Mutex::new(store),
            blobs: LocalBlobStore::open(self.dir.path().join("blobs")).unwrap(),
            config_path: Some(self.dir.path().join("pipe.toml")),
            default_epsilon: 0.05,
            token: token.map(String::from),
        };
        BackgroundServer::start(router(state, None), "127.0.0.1:0".parse().unwrap()).unwrap()
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn get(url: &str) -> (u16, Value) {
    let mut r = agent().get(url).call().unwrap();
    let code = r.status().as_u16();
    (code, r.body_mut().read_json().unwrap_or(Value::Null))
}

fn send(method: &str, url: &str, body: &Value) -> (u16, Value) {
    let a = agent();
    let mut r = match method {
        "POST" => a.post(url).send_json(body).unwrap(),
        "PUT" => a.put(url).send_json(body).unwrap(),
        _ => unreachable!(),
    };
    let code = r.status().as_u16();
    (code, r.body_mut().read_json().unwrap_or(Value::Null))
}

fn annotate_all(base: &str) {
    for (c, label) in common::planted_candidates() {
        let body = json!({"pair_id": c.key.pair_id, "candidate_index": 0, "label": label, "annotator_id": "a1"});
        let (code, _) = send("POST", &format!("{base}/api/annotations"), &body);
        assert_eq!(code, 201);
    }
}

#[test]
fn annotations_persist_across_restarts() {
    let fx = Fixture::new();
    {
        let server = fx.serve(None);
        let base = server.base_url();
        for i in 1..=10 {
            let body = json!({"pair_id": format!("p{i:02}"), "candidate_index": 0, "label": "success", "annotator_id": "a1"});
            let (code, ack) = send("POST", &format!("{base}/api/annotations"), &body);
            assert_eq!(code, 201);
            assert_eq!(ack["created_seq"], i);
        }
        let (code, _) = send(
            "POST",
            &format!("{base}/api/annotations"),
            &json!({"pair_id": "nope", "candidate_index": 0, "label": "success", "annotator_id": "a1"}),
        );
        assert_eq!(code, 404);
    }
    let server = fx.serve(None);
    let (_, log) = get(&format!("{}/api/annotations", server.base_url()));
    let log: Vec<Annotation> = serde_json::from_value(log).unwrap();
    assert_eq!(log.len(), 10);
    assert_eq!(log.last().unwrap().created_seq, 10);

    let (_, page) = get(&format!("{}/api/candidates?offset=8&limit=4", server.base_url()));
    let page: CandidatePage = serde_json::from_value(page).unwrap();
    assert_eq!((page.total, page.items.len(), page.annotation_seq), (20, 4, 10));
    assert!(page.items[1].effective_label.is_some());
    assert!(page.items[2].effective_label.is_none());
}

#[test]
fn sweep_over_http_matches_hand_table() {
    let fx = Fixture::new();
    let server = fx.serve(None);
    let base = server.base_url();
    let (code, _) = get(&format!("{base}/api/sweep?filter=consensus"));
    assert_eq!(code, 400, "sweeping with no annotations is an error");
    annotate_all(&base);

    let (code, body) = get(&format!("{base}/api/sweep?filter=consensus&thresholds=0.2,0.15,0.1,0.05,0"));
    assert_eq!(code, 200);
    let sweep: SweepResponse = serde_json::from_value(body).unwrap();
    let got: Vec<(f64, f64, Option<f64>)> = sweep
        .points
        .iter()
        .map(|p| (p.threshold, p.filtered_pct, p.success_pct_retained))
        .collect();
    assert_eq!(got, common::PLANTED_TABLE.to_vec());
    assert_eq!(sweep.annotation_seq, 20);

    let (code, body) = get(&format!("{base}/api/suggest?filter=consensus&epsilon=0.05"));
    assert_eq!(code, 200);
    let s: SuggestResponse = serde_json::from_value(body).unwrap();
    assert!(common::planted_candidates().iter().any(|(c, _)| c.scores.consensus == Some(s.suggestion.threshold)));

    let (code, _) = get(&format!("{base}/api/sweep?filter=bogus"));
    assert_eq!(code, 400);
}

#[test]
fn applying_thresholds_twice_is_idempotent() {
    let fx = Fixture::new();
    let server = fx.serve(None);
    let url = format!("{}/api/thresholds", server.base_url());
    let body = json!({"thresholds": {"consensus": 0.045, "mm_clip": 0.2}});
    let (code, first) = send("PUT", &url, &body);
    assert_eq!(code, 200);
    let after_first = std::fs::read(fx.dir.path().join("pipe.toml")).unwrap();
    let (_, second) = send("PUT", &url, &body);
    let after_second = std::fs::read(fx.dir.path().join("pipe.toml")).unwrap();
    assert_eq!(after_first, after_second);
    let first: ThresholdsResponse = serde_json::from_value(first).unwrap();
    let second: ThresholdsResponse = serde_json::from_value(second).unwrap();
    assert_eq!(first.config, second.config);
    let cfg = PipelineConfig::load(&fx.dir.path().join("pipe.toml")).unwrap();
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.post_removal.consensus_threshold, 0.045);
    assert_eq!(cfg.post_removal.mm_threshold, 0.2);
}

#[test]
fn token_and_images() {
    let fx = Fixture::new();
    let server = fx.serve(Some("tok"));
    let base = server.base_url();
    let (code, _) = get(&format!("{base}/api/candidates"));
    assert_eq!(code, 401);
    let mut r = agent()
        .get(format!("{base}/api/images/c1.png"))
        .header("Authorization", "Bearer tok")
        .call()
        .unwrap();
    assert_eq!(r.status().as_u16(), 200);
    assert_eq!(r.headers().get("content-type").unwrap(), "image/png");
    assert_eq!(r.body_mut().read_to_vec().unwrap(), b"\x89PNG fake");
    let r = agent()
        .get(format!("{base}/api/images/..%2Fpipe.toml"))
        .header("Authorization", "Bearer tok")
        .call()
        .unwrap();
    assert!(r.status().is_client_error());
}

#[test]
fn latest_label_wins_and_ties_fail() {
    let fx = Fixture::new();
    let server = fx.serve(None);
    let base = server.base_url();
    let post = |label: &str, who: &str| {
        send(
            "POST",
            &format!("{base}/api/annotations"),
            &json!({"pair_id": "p01", "candidate_index": 0, "label": label, "annotator_id": who}),
        )
    };
    post("failure", "a1");
    post("success", "a1");
    let label = |page: Value| page["items"][0]["effective_label"].clone();
    assert_eq!(label(get(&format!("{base}/api/candidates?limit=1")).1), json!("success"));
    post("failure", "a2");
    assert_eq!(label(get(&format!("{base}/api/candidates?limit=1")).1), json!("failure"));
}
