//! End-to-end HTTP tests against a real listener on an ephemeral port.

use std::path::Path;
use std::time::Duration;

use serde_json::{json, Value};

use crank_core::domain::{CarouselId, EventType, InteractionEvent, ItemId, UserId};
use crank_core::factorization::TrainConfig;
use crank_core::ingestion::{EventLog, SyncPolicy};
use crank_core::pipeline::{run_training, TrainParams};
use crank_server::{build_router, load_state, run_background_tasks, AppState, ServeConfig};

/// Trains a small two-category model: u0/u1 buy dairy, u2/u3 buy bakery.
fn train_fixture(dir: &Path) -> std::path::PathBuf {
    let catalog_path = dir.join("catalog.jsonl");
    let mut catalog = String::new();
    for item in 0..6 {
        let category = if item < 3 { "dairy" } else { "bakery" };
        catalog.push_str(&format!(
            "{{\"item\":\"i{item}\",\"category\":\"{category}\"}}\n"
        ));
    }
    std::fs::write(&catalog_path, catalog).unwrap();

    let events_path = dir.join("history.jsonl");
    let mut log = EventLog::open(&events_path, SyncPolicy::Flush).unwrap();
    let mut ts = 0;
    for round in 0..5 {
        for user in 0..4 {
            let item = if user < 2 { round % 3 } else { 3 + round % 3 };
            let carousel = if user < 2 { "dairy-picks" } else { "bakery-picks" };
            ts += 10;
            log.append(&InteractionEvent {
                ts,
                user: UserId::new(format!("u{user}")).unwrap(),
                carousel: CarouselId::new(carousel).unwrap(),
                item: Some(ItemId::new(format!("i{item}")).unwrap()),
                event: EventType::Atc,
            })
            .unwrap();
        }
        ts += 4000;
    }

    let model_dir = dir.join("model");
    run_training(
        &events_path,
        &catalog_path,
        &model_dir,
        &TrainParams {
            train: TrainConfig {
                dim: 4,
                iterations: 6,
                seed: 5,
                ..TrainConfig::default()
            },
            ..TrainParams::default()
        },
    )
    .unwrap();
    model_dir
}

fn fast_config(model_dir: &Path, data_dir: &Path) -> ServeConfig {
    let mut cfg = ServeConfig::new(model_dir.to_path_buf());
    cfg.data_dir = data_dir.to_path_buf();
    cfg.update_interval = Duration::from_millis(50);
    cfg.snapshot_interval = Duration::from_millis(200);
    cfg
}

/// Serves on an ephemeral port; returns the base URL and the (not yet
/// loaded) state handle.
async fn spawn_router(state: AppState) -> String {
    let router = build_router(state);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, router).await.unwrap();
    });
    format!("http://{addr}")
}

fn install(state: &AppState, cfg: ServeConfig) {
    let (loaded, applier) = load_state(cfg).unwrap();
    let installed = state.install(loaded);
    tokio::spawn(run_background_tasks(installed, applier));
}

fn rank_body() -> Value {
    json!({
        "user": "u0",
        "candidates": [
            {"id": "dairy-picks", "items": ["i0", "i1", "i2"]},
            {"id": "bakery-picks", "items": ["i3", "i4", "i5"]},
            {"id": "mixed", "items": ["i0", "i3"]}
        ],
        "zones": 2
    })
}

#[tokio::test]
async fn readiness_gate_then_rank() {
    let dir = tempfile::tempdir().unwrap();
    let model_dir = train_fixture(dir.path());
    let state = AppState::new();
    let base = spawn_router(state.clone()).await;
    let client = reqwest::Client::new();

    // before artifacts load: health says loading, rank refuses
    let health = client.get(format!("{base}/health")).send().await.unwrap();
    assert_eq!(health.status(), 503);
    let rank = client
        .post(format!("{base}/rank"))
        .json(&rank_body())
        .send()
        .await
        .unwrap();
    assert_eq!(rank.status(), 503);

    install(&state, fast_config(&model_dir, dir.path()));

    let health: Value = client
        .get(format!("{base}/health"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(health["status"], "ok");
    let versions = health["artifacts"]["versions"].as_object().unwrap();
    assert_eq!(versions.len(), 5);
    for name in [
        "user_item.emb",
        "user_cat.emb",
        "eta_uc.jsonl",
        "priors.jsonl",
        "catalog.jsonl",
    ] {
        assert!(versions.contains_key(name), "missing {name} in health");
    }

    let response = client
        .post(format!("{base}/rank"))
        .json(&rank_body())
        .send()
        .await
        .unwrap();
    assert_eq!(response.status(), 200);
    let body: Value = response.json().await.unwrap();
    let ranking: Vec<&str> = body["ranking"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(ranking.len(), 2); // Z = 2 of 3 candidates
    // u0 is a dairy buyer: the dairy carousel wins zone 1
    assert_eq!(ranking[0], "dairy-picks");
    // injective and phi non-increasing down the zones
    assert_ne!(ranking[0], ranking[1]);
    let scores = body["scores"].as_object().unwrap();
    assert_eq!(scores.len(), 3); // every candidate is scored
    let phi_0 = scores[ranking[0]]["phi"].as_f64().unwrap();
    let phi_1 = scores[ranking[1]]["phi"].as_f64().unwrap();
    assert!(phi_0 >= phi_1);
    // phi is exactly the stored convex combination
    for (_, s) in scores {
        let w = 0.7;
        let expected = w * s["alpha"].as_f64().unwrap() + (1.0 - w) * s["gamma"].as_f64().unwrap();
        assert_eq!(s["phi"].as_f64().unwrap(), expected);
    }
    assert!(body["compute_micros"].is_u64());
}

#[tokio::test]
async fn rank_request_validation() {
    let dir = tempfile::tempdir().unwrap();
    let model_dir = train_fixture(dir.path());
    let state = AppState::new();
    let base = spawn_router(state.clone()).await;
    install(&state, fast_config(&model_dir, dir.path()));
    let client = reqwest::Client::new();
    let url = format!("{base}/rank");

    // malformed body
    let res = client
        .post(&url)
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(res.status(), 400);

    // duplicate carousel id
    let res = client
        .post(&url)
        .json(&json!({
            "user": "u0",
            "candidates": [
                {"id": "same", "items": ["i0"]},
                {"id": "same", "items": ["i1"]}
            ]
        }))
        .send()
        .await
        .unwrap();
    assert_eq!(res.status(), 400);

    // empty candidates
    let res = client
        .post(&url)
        .json(&json!({"user": "u0", "candidates": []}))
        .send()
        .await
        .unwrap();
    assert_eq!(res.status(), 400);

    // carousel with duplicate items is rejected at decode time
    let res = client
        .post(&url)
        .json(&json!({
            "user": "u0",
            "candidates": [{"id": "c", "items": ["i0", "i0"]}]
        }))
        .send()
        .await
        .unwrap();
    assert_eq!(res.status(), 400);

    // unknown category for an item: 422 naming the item
    let res = client
        .post(&url)
        .json(&json!({
            "user": "u0",
            "candidates": [{"id": "c", "items": ["never-catalogued"]}]
        }))
        .send()
        .await
        .unwrap();
    assert_eq!(res.status(), 422);
    let body: Value = res.json().await.unwrap();
    assert!(body["error"].as_str().unwrap().contains("never-catalogued"));

    // zones = 0
    let res = client
        .post(&url)
        .json(&json!({
            "user": "u0",
            "candidates": [{"id": "c", "items": ["i0"]}],
            "zones": 0
        }))
        .send()
        .await
        .unwrap();
    assert_eq!(res.status(), 400);
}

#[tokio::test]
async fn events_batch_accepting_and_rejecting() {
    let dir = tempfile::tempdir().unwrap();
    let model_dir = train_fixture(dir.path());
    let state = AppState::new();
    let base = spawn_router(state.clone()).await;
    install(&state, fast_config(&model_dir, dir.path()));
    let client = reqwest::Client::new();
    let url = format!("{base}/events");

    let res: Value = client
        .post(&url)
        .json(&json!([
            {"ts": 100, "user": "u0", "carousel": "dairy-picks", "item": "i0", "event": "click"},
            {"ts": 101, "user": "u0", "carousel": "dairy-picks", "item": "i0", "event": "atc"},
            {"ts": 102, "user": "u1", "carousel": "mixed", "event": "view"}
        ]))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(res["accepted"], 3);

    // partial accept reports rejected indices
    let res: Value = client
        .post(&url)
        .json(&json!([
            {"ts": 103, "user": "u0", "carousel": "mixed", "event": "view"},
            {"ts": 104, "user": "u0", "carousel": "mixed", "item": "i0", "event": "purchase"},
            {"ts": 105, "user": "u0", "carousel": "mixed", "item": "i0", "event": "click"}
        ]))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(res["accepted"], 2);
    assert_eq!(res["rejected"], json!([1]));

    // all invalid: 400 with per-index diagnostics
    let res = client
        .post(&url)
        .json(&json!([
            {"ts": -1, "user": "u0", "carousel": "c", "event": "view"},
            {"user": "u0", "carousel": "c", "event": "view"}
        ]))
        .send()
        .await
        .unwrap();
    assert_eq!(res.status(), 400);
    let body: Value = res.json().await.unwrap();
    assert_eq!(body["accepted"], 0);
    assert_eq!(body["rejected"].as_array().unwrap().len(), 2);

    // empty batch is fine and accepts nothing
    let res: Value = client
        .post(&url)
        .json(&json!([]))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(res["accepted"], 0);
}

#[tokio::test]
async fn feedback_loop_raises_lambda_and_rank() {
    let dir = tempfile::tempdir().unwrap();
    let model_dir = train_fixture(dir.path());
    let state = AppState::new();
    let base = spawn_router(state.clone()).await;
    install(&state, fast_config(&model_dir, dir.path()));
    let client = reqwest::Client::new();

    let before: Value = client
        .post(format!("{base}/rank"))
        .json(&rank_body())
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let lambda_before = before["scores"]["mixed"]["lambda"].as_f64().unwrap();
    let phi_before = before["scores"]["mixed"]["phi"].as_f64().unwrap();
    let alpha_before = before["scores"]["mixed"]["alpha"].as_f64().unwrap();
    assert!(
        alpha_before > 0.0,
        "fixture should give u0 positive affinity mass on the mixed carousel"
    );
    let pos_before = before["ranking"]
        .as_array()
        .unwrap()
        .iter()
        .position(|v| v == "mixed");

    // u0 clicks the mixed carousel
    let now = std::time::SystemTime::now()
        .duration_since(std::time::SystemTime::UNIX_EPOCH)
        .unwrap()
        .as_secs();
    let res: Value = client
        .post(format!("{base}/events"))
        .json(&json!([
            {"ts": now, "user": "u0", "carousel": "mixed", "item": "i0", "event": "click"}
        ]))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(res["accepted"], 1);

    // wait out one update interval so the applier folds the click
    tokio::time::sleep(Duration::from_millis(300)).await;

    let after: Value = client
        .post(format!("{base}/rank"))
        .json(&rank_body())
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let lambda_after = after["scores"]["mixed"]["lambda"].as_f64().unwrap();
    let phi_after = after["scores"]["mixed"]["phi"].as_f64().unwrap();
    assert!(
        lambda_after > lambda_before,
        "lambda did not rise: {lambda_before} -> {lambda_after}"
    );
    assert!(
        phi_after > phi_before,
        "phi did not rise: {phi_before} -> {phi_after}"
    );
    // non-worsening zone for the clicked carousel
    let pos_after = after["ranking"]
        .as_array()
        .unwrap()
        .iter()
        .position(|v| v == "mixed");
    match (pos_before, pos_after) {
        (Some(b), Some(a)) => assert!(a <= b),
        (None, _) => {} // was unranked before; cannot worsen
        (Some(_), None) => panic!("clicked carousel dropped out of the ranking"),
    }

    // debug endpoint shows the folded prior
    let prior: Value = client
        .get(format!("{base}/priors/u0/mixed"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(prior["a"].as_f64().unwrap(), 2.0);
    assert!(prior["lambda"].as_f64().unwrap() > 0.5);
}

#[tokio::test]
async fn identical_candidates_get_equal_lambda_under_concurrent_writes() {
    let dir = tempfile::tempdir().unwrap();
    let model_dir = train_fixture(dir.path());
    let state = AppState::new();
    let base = spawn_router(state.clone()).await;
    install(&state, fast_config(&model_dir, dir.path()));
    let client = reqwest::Client::new();

    // background traffic: keep mutating priors for the same user
    let writer = {
        let base = base.clone();
        let client = client.clone();
        tokio::spawn(async move {
            for i in 0..50u64 {
                let _ = client
                    .post(format!("{base}/events"))
                    .json(&json!([
                        {"ts": 1000 + i, "user": "u0", "carousel": "twin-a", "item": "i0", "event": "click"}
                    ]))
                    .send()
                    .await;
            }
        })
    };

    // twin carousels with identical items, fresh ids each round so neither
    // has prior traffic: the prior snapshot must give both the same lambda
    for round in 0..20 {
        let body: Value = client
            .post(format!("{base}/rank"))
            .json(&json!({
                "user": "u0",
                "candidates": [
                    {"id": format!("fresh-a-{round}"), "items": ["i1", "i4"]},
                    {"id": format!("fresh-b-{round}"), "items": ["i1", "i4"]}
                ]
            }))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        let scores = body["scores"].as_object().unwrap();
        let a = &scores[&format!("fresh-a-{round}")];
        let b = &scores[&format!("fresh-b-{round}")];
        assert_eq!(a["lambda"], b["lambda"]);
        assert_eq!(a["alpha"], b["alpha"]);
        assert_eq!(a["gamma"], b["gamma"]);
        assert_eq!(a["phi"], b["phi"]);
    }
    writer.await.unwrap();
}

#[tokio::test]
async fn restart_replays_event_log() {
    let dir = tempfile::tempdir().unwrap();
    let model_dir = train_fixture(dir.path());

    // first life: ingest a click, let it fold
    {
        let state = AppState::new();
        let base = spawn_router(state.clone()).await;
        install(&state, fast_config(&model_dir, dir.path()));
        let client = reqwest::Client::new();
        let res: Value = client
            .post(format!("{base}/events"))
            .json(&json!([
                {"ts": 50, "user": "u9", "carousel": "k9", "item": "i0", "event": "click"}
            ]))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        assert_eq!(res["accepted"], 1);
    }

    // second life, same data dir: the click must be visible after replay
    let state = AppState::new();
    let base = spawn_router(state.clone()).await;
    install(&state, fast_config(&model_dir, dir.path()));
    let client = reqwest::Client::new();
    let prior: Value = client
        .get(format!("{base}/priors/u9/k9"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(prior["a"].as_f64().unwrap(), 2.0);
    assert_eq!(prior["b"].as_f64().unwrap(), 1.0);
}
