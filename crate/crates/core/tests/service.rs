use fableloop::domain::{ElementKind, TileCatalog};
use fableloop::engine::{Engine, LoopConfig};
use fableloop::gateway::{mock::mock_model, Gateway, ModelHandle};
use fableloop::prompts::PromptForge;
use fableloop::service::{router, ManualClock, ServiceConfig, ServiceModels, ServiceState, SessionView};
use serde_json::{json, Value};
use std::sync::Arc;
use std::time::Duration;

fn editor(scores: &[u32]) -> ModelHandle {
    ModelHandle::scripted(
        "editor",
        scores
            .iter()
            .map(|s| format!("Nice use of the tiles.\nOverall Score: {s}%"))
            .collect::<Vec<_>>(),
    )
}

fn writer() -> ModelHandle {
    let n = Arc::new(std::sync::atomic::AtomicUsize::new(0));
    ModelHandle::from_fn("writer", move |_| {
        let k = n.fetch_add(1, std::sync::atomic::Ordering::SeqCst) + 1;
        format!("Story draft number {k}.")
    })
}

struct Server {
    base: String,
    client: reqwest::Client,
    clock: Arc<ManualClock>,
    _persist: tempfile::TempDir,
}

async fn start(editor: ModelHandle, config: LoopConfig) -> Server {
    let persist = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(chrono::DateTime::from_timestamp(1_700_000_000, 0).unwrap()));
    let engine = Engine::new(Arc::new(Gateway::default()), Arc::new(PromptForge::builtin()));
    let state = ServiceState::with_clock(
        engine,
        TileCatalog::builtin(),
        ServiceModels {
            writer: writer(),
            editor,
            guide: mock_model("guide"),
        },
        ServiceConfig {
            loop_config: config,
            persist_dir: Some(persist.path().to_path_buf()),
            ..ServiceConfig::default()
        },
        clock.clone(),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(Arc::new(state))).await.unwrap() });
    Server {
        base: format!("http://{addr}"),
        client: reqwest::Client::new(),
        clock,
        _persist: persist,
    }
}

impl Server {
    async fn post(&self, path: &str, body: Option<Value>) -> (u16, Value) {
        let mut req = self.client.post(format!("{}{}", self.base, path));
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().await.unwrap();
        (resp.status().as_u16(), resp.json().await.unwrap())
    }

    async fn get(&self, path: &str) -> (u16, Value) {
        let resp = self.client.get(format!("{}{}", self.base, path)).send().await.unwrap();
        (resp.status().as_u16(), resp.json().await.unwrap())
    }

    async fn new_session(&self) -> String {
        let (status, v) = self.post("/sessions", None).await;
        assert_eq!(status, 201);
        v["id"].as_str().unwrap().to_string()
    }

    async fn fill(&self, id: &str) {
        let catalog = TileCatalog::builtin();
        for k in ElementKind::PLAYER_SELECTED {
            let (status, _) = self
                .post(
                    &format!("/sessions/{id}/tiles"),
                    Some(json!({"kind": k.key(), "label": catalog.labels(k)[0]})),
                )
                .await;
            assert_eq!(status, 200);
        }
    }

    /// Reads SSE frames until `n` events arrived.
    async fn events(&self, id: &str, last_event_id: Option<u64>, n: usize) -> Vec<(u64, String, Value)> {
        let mut req = self.client.get(format!("{}/sessions/{id}/events", self.base));
        if let Some(l) = last_event_id {
            req = req.header("Last-Event-ID", l.to_string());
        }
        let mut resp = req.send().await.unwrap();
        let mut buf = String::new();
        let mut out = Vec::new();
        while out.len() < n {
            let chunk = tokio::time::timeout(Duration::from_secs(5), resp.chunk())
                .await
                .expect("event stream stalled")
                .unwrap()
                .expect("stream ended");
            buf.push_str(std::str::from_utf8(&chunk).unwrap());
            while let Some(end) = buf.find("\n\n") {
                let frame: String = buf.drain(..end + 2).collect();
                let (mut id, mut kind, mut data) = (0, String::new(), String::new());
                for line in frame.lines() {
                    if let Some(v) = line.strip_prefix("id:") {
                        id = v.trim().parse().unwrap();
                    } else if let Some(v) = line.strip_prefix("event:") {
                        kind = v.trim().to_string();
                    } else if let Some(v) = line.strip_prefix("data:") {
                        data.push_str(v.trim_start());
                    }
                }
                if !kind.is_empty() {
                    out.push((id, kind, serde_json::from_str(&data).unwrap()));
                }
            }
        }
        out
    }
}

#[tokio::test]
async fn steer_mode_session_flow() {
    let srv = start(editor(&[70, 80, 85, 85, 90]), LoopConfig::fixed(5)).await;
    let (status, catalog) = srv.get("/catalog").await;
    assert_eq!(status, 200);
    assert_eq!(catalog["kinds"][0]["kind"], "protagonist");
    assert_eq!(catalog["kinds"][5]["player_selected"], false);

    let id = srv.new_session().await;
    let (_, v) = srv.get(&format!("/sessions/{id}")).await;
    assert_eq!(v["state"], "selecting");
    assert_eq!(v["tiles"].as_object().unwrap().len(), 0);
    srv.fill(&id).await;
    let (_, v) = srv.get(&format!("/sessions/{id}")).await;
    assert_eq!(v["state"], "ready");

    let (status, v) = srv.post(&format!("/sessions/{id}/loop?mode=steer&wait=true"), None).await;
    assert_eq!(status, 200);
    let view: SessionView = serde_json::from_value(v).unwrap();
    assert_eq!(view.state, fableloop::service::SessionState::AwaitingDecision);
    assert_eq!(view.iterations.len(), 1);
    for _ in 0..4 {
        let (status, _) = srv.post(&format!("/sessions/{id}/continue?wait=true"), None).await;
        assert_eq!(status, 200);
    }
    let (status, err) = srv.post(&format!("/sessions/{id}/continue"), None).await;
    assert_eq!(status, 409);
    assert_eq!(err["error"]["code"], "max_loops_reached");

    let events = srv.events(&id, None, 0).await;
    assert!(events.is_empty());
    // 1 ready + 5 x (looping, iteration, awaiting) = 16 events
    let all = srv.events(&id, None, 16).await;
    let iterations: Vec<&Value> = all.iter().filter(|e| e.1 == "iteration").map(|e| &e.2).collect();
    let scores: Vec<f64> = iterations.iter().map(|e| e["score"].as_f64().unwrap()).collect();
    assert_eq!(scores, [70.0, 80.0, 85.0, 85.0, 90.0]);
    let loops: Vec<u64> = iterations.iter().map(|e| e["loop_index"].as_u64().unwrap()).collect();
    assert_eq!(loops, [1, 2, 3, 4, 5]);
    assert!(all.windows(2).all(|w| w[0].0 < w[1].0));

    // Resume after event 8: nothing before it is repeated.
    let resumed = srv.events(&id, Some(8), 8).await;
    assert_eq!(resumed[0].0, 9);
    assert_eq!(resumed.iter().map(|e| e.0).collect::<Vec<_>>(), (9..=16).collect::<Vec<_>>());

    let (status, v) = srv.post(&format!("/sessions/{id}/accept"), None).await;
    assert_eq!(status, 200);
    assert_eq!(v["session"]["accepted"], 5);
    assert_eq!(v["story"]["text"], iterations[4]["story"]);
    let (status, err) = srv.post(&format!("/sessions/{id}/accept"), None).await;
    assert_eq!(status, 409);
    assert_eq!(err["error"]["code"], "wrong_state");
}

#[tokio::test]
async fn accept_default_and_override() {
    let srv = start(editor(&[70, 90, 70, 90]), LoopConfig::fixed(5)).await;
    for (index, expected) in [(None, 2), (Some(1), 1)] {
        let id = srv.new_session().await;
        srv.fill(&id).await;
        srv.post(&format!("/sessions/{id}/loop?wait=true"), None).await;
        srv.post(&format!("/sessions/{id}/continue?wait=true"), None).await;
        let body = index.map(|i: u32| json!({"index": i}));
        let (status, v) = srv.post(&format!("/sessions/{id}/accept"), body).await;
        assert_eq!(status, 200);
        assert_eq!(v["session"]["accepted"], expected);
        assert_eq!(v["story"]["loop_index"], expected);
    }
}

#[tokio::test]
async fn autopilot_runs_full_horizon() {
    let srv = start(editor(&[70, 80, 85, 85, 90]), LoopConfig::fixed(5)).await;
    let id = srv.new_session().await;
    srv.fill(&id).await;
    let (_, v) = srv.post(&format!("/sessions/{id}/loop?mode=auto&wait=true"), None).await;
    assert_eq!(v["state"], "awaiting_decision");
    assert_eq!(v["iterations"].as_array().unwrap().len(), 5);
    assert_eq!(v["recommended"], 5);
    let events = srv.events(&id, None, 8).await;
    assert_eq!(events.iter().filter(|e| e.1 == "iteration").count(), 5);
}

#[tokio::test]
async fn errors_carry_codes() {
    let srv = start(editor(&[70]), LoopConfig::fixed(5)).await;
    let id = srv.new_session().await;
    let tiles = format!("/sessions/{id}/tiles");
    let (s, e) = srv.post(&tiles, Some(json!({"kind": "protagonist", "label": "a dragon"}))).await;
    assert_eq!((s, e["error"]["code"].as_str().unwrap()), (400, "invalid_label"));
    let (s, _) = srv.post(&tiles, Some(json!({"kind": "protagonist", "label": "a cat"}))).await;
    assert_eq!(s, 200);
    let (s, e) = srv.post(&tiles, Some(json!({"kind": "protagonist", "label": "a girl"}))).await;
    assert_eq!((s, e["error"]["code"].as_str().unwrap()), (409, "duplicate_kind"));
    let (s, e) = srv.post(&tiles, Some(json!({"kind": "special_appearance", "label": "Santa Claus"}))).await;
    assert_eq!((s, e["error"]["code"].as_str().unwrap()), (400, "invalid_kind"));
    let (s, e) = srv.post(&format!("/sessions/{id}/loop"), None).await;
    assert_eq!((s, e["error"]["code"].as_str().unwrap()), (409, "wrong_state"));
    let (s, e) = srv.post(&format!("/sessions/{id}/accept"), None).await;
    assert_eq!((s, e["error"]["code"].as_str().unwrap()), (409, "wrong_state"));
    let (s, e) = srv.get("/sessions/nope").await;
    assert_eq!((s, e["error"]["code"].as_str().unwrap()), (404, "not_found"));
    let (s, e) = srv.post(&format!("/sessions/{id}/loop?mode=warp"), None).await;
    assert_eq!((s, e["error"]["code"].as_str().unwrap()), (400, "bad_request"));
}

#[tokio::test]
async fn hints_escalate_after_idle() {
    let srv = start(editor(&[70]), LoopConfig::fixed(5)).await;
    let id = srv.new_session().await;
    let (s, h) = srv.get(&format!("/sessions/{id}/hint")).await;
    assert_eq!(s, 200);
    assert_eq!(h["stage"], "protagonist");
    assert_eq!(h["escalated"], false);
    assert!(!h["hint"].as_str().unwrap().is_empty());
    srv.clock.advance(Duration::from_secs(31));
    let (_, h) = srv.get(&format!("/sessions/{id}/hint")).await;
    assert_eq!(h["escalated"], true);
    srv.fill(&id).await;
    let (s, e) = srv.get(&format!("/sessions/{id}/hint")).await;
    assert_eq!((s, e["error"]["code"].as_str().unwrap()), (409, "wrong_state"));
}

#[tokio::test]
async fn editor_failure_moves_session_to_failed() {
    let srv = start(ModelHandle::scripted("editor", ["???", "still nothing", "no"]), LoopConfig::fixed(5)).await;
    let id = srv.new_session().await;
    srv.fill(&id).await;
    let (_, v) = srv.post(&format!("/sessions/{id}/loop?wait=true"), None).await;
    assert_eq!(v["state"], "failed");
    assert!(v["failure"].as_str().unwrap().contains("unparseable"));
    let events = srv.events(&id, None, 3).await;
    assert_eq!(events[2].1, "failed");
    let (s, _) = srv.post(&format!("/sessions/{id}/accept"), None).await;
    assert_eq!(s, 409);
}

#[tokio::test]
async fn concurrent_sessions_stay_isolated() {
    let srv = Arc::new(start(mock_model("editor"), LoopConfig::fixed(3)).await);
    let catalog = TileCatalog::builtin();
    let mut tasks = Vec::new();
    for n in 0..8usize {
        let srv = srv.clone();
        let catalog = catalog.clone();
        tasks.push(tokio::spawn(async move {
            let id = srv.new_session().await;
            let mut chosen = Vec::new();
            for k in ElementKind::PLAYER_SELECTED {
                let labels = catalog.labels(k);
                let label = labels[n % labels.len()].clone();
                srv.post(&format!("/sessions/{id}/tiles"), Some(json!({"kind": k.key(), "label": label})))
                    .await;
                chosen.push(label);
                tokio::task::yield_now().await;
            }
            let (_, v) = srv.post(&format!("/sessions/{id}/loop?mode=auto&wait=true"), None).await;
            (id, chosen, v)
        }));
    }
    let mut ids = std::collections::BTreeSet::new();
    for t in tasks {
        let (id, chosen, v) = t.await.unwrap();
        assert!(ids.insert(id.clone()));
        assert_eq!(v["id"], id.as_str());
        assert_eq!(v["state"], "awaiting_decision");
        assert_eq!(v["iterations"].as_array().unwrap().len(), 3);
        let tiles = v["tiles"].as_object().unwrap();
        for (k, label) in ElementKind::PLAYER_SELECTED.iter().zip(&chosen) {
            assert_eq!(tiles[k.key()], label.as_str());
        }
        let loops: Vec<u64> = v["iterations"]
            .as_array()
            .unwrap()
            .iter()
            .map(|i| i["loop_index"].as_u64().unwrap())
            .collect();
        assert_eq!(loops, [1, 2, 3]);
    }
}

#[tokio::test]
async fn random_api_sequences_never_accept_without_iterations() {
    use rand::{Rng, SeedableRng};
    let srv = start(mock_model("editor"), LoopConfig::fixed(3)).await;
    let catalog = TileCatalog::builtin();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for _ in 0..25 {
        let id = srv.new_session().await;
        for _ in 0..25 {
            let op = rng.random_range(0..6);
            let (status, v) = match op {
                0 | 1 => {
                    let k = ElementKind::ALL[rng.random_range(0..6)];
                    let labels = catalog.labels(k);
                    let label = labels[rng.random_range(0..labels.len())].clone();
                    srv.post(&format!("/sessions/{id}/tiles"), Some(json!({"kind": k.key(), "label": label})))
                        .await
                }
                2 => srv.post(&format!("/sessions/{id}/loop?wait=true&mode=steer"), None).await,
                3 => srv.post(&format!("/sessions/{id}/continue?wait=true"), None).await,
                4 => srv.post(&format!("/sessions/{id}/accept"), Some(json!({"index": rng.random_range(0..4)}))).await,
                _ => srv.get(&format!("/sessions/{id}/hint")).await,
            };
            assert!(status < 500, "{op}: {v}");
            let (_, snap) = srv.get(&format!("/sessions/{id}")).await;
            if snap["state"] == "accepted" {
                assert!(!snap["iterations"].as_array().unwrap().is_empty());
            }
        }
    }
}
