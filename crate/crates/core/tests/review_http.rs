use std::path::Path;

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use spurlogo::apply::PlacementPolicy;
use spurlogo::bank::BankManifest;
use spurlogo::dataset::{decode_all, DatasetManifest};
use spurlogo::miner::{mine, MiningOptions, MiningRun, ReviewDecision};
use spurlogo::review::http::{router, ServerState};
use spurlogo::review::{evidence_image, evidence_samples, ReviewStore};
use spurlogo::synthetic::{write_fixture, Fixture, FixtureSpec};
use tower::ServiceExt;

fn small_spec() -> FixtureSpec {
    FixtureSpec {
        images: 8,
        logos: 30,
        markers: 5,
        distractors: 10,
        ..FixtureSpec::default()
    }
}

fn mined(dir: &Path, spec: &FixtureSpec, n: usize) -> (Fixture, std::path::PathBuf) {
    let fx = write_fixture(dir, spec).unwrap();
    let bank = BankManifest::load(&fx.bank).unwrap();
    let samples = decode_all(&DatasetManifest::load(&fx.dataset).unwrap(), 0.1).unwrap();
    let opts = MiningOptions {
        n,
        ..MiningOptions::default()
    };
    let run = mine(
        &spec.target_spec().unwrap(),
        &samples,
        &bank,
        &spec.scorer(),
        &opts,
        None,
    )
    .unwrap();
    let run_path = dir.join("run.json");
    run.save(&run_path).unwrap();
    (fx, run_path)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    call_with(app, method, uri, body, None).await
}

async fn call_with(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
    token: Option<&str>,
) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn json_call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn decision(logo: &str, d: &str) -> Option<Value> {
    Some(json!({"logo_id": logo, "decision": d}))
}

#[tokio::test]
async fn candidates_are_paged_by_ten_in_rank_order() {
    let dir = tempfile::tempdir().unwrap();
    let (fx, run) = mined(dir.path(), &small_spec(), 12);
    let store = ReviewStore::open(dir.path().join("reviews")).unwrap();
    store
        .create_mining("s", &run, &fx.bank, Some(&fx.dataset), 0, 3)
        .unwrap();
    let app = router(ServerState::new(store));

    let (s, sessions) = json_call(&app, "GET", "/sessions", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(sessions, json!(["s"]));

    let (_, p0) = json_call(&app, "GET", "/sessions/s/candidates?page=0", None).await;
    let (_, p1) = json_call(&app, "GET", "/sessions/s/candidates?page=1", None).await;
    let ranks: Vec<u64> = p0["cards"]
        .as_array()
        .unwrap()
        .iter()
        .chain(p1["cards"].as_array().unwrap())
        .map(|c| c["rank"].as_u64().unwrap())
        .collect();
    assert_eq!(ranks, (1..=12).collect::<Vec<_>>());
    assert_eq!(p0["cards"].as_array().unwrap().len(), 10);
    assert_eq!(p0["total"], 12);
    assert_eq!(p0["cards"][0]["evidence_urls"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn decisions_are_logged_and_survive_reload() {
    let dir = tempfile::tempdir().unwrap();
    let (fx, run) = mined(dir.path(), &small_spec(), 12);
    let root = dir.path().join("reviews");
    ReviewStore::open(&root)
        .unwrap()
        .create_mining("s", &run, &fx.bank, None, 0, 2)
        .unwrap();
    let app = router(ServerState::new(ReviewStore::open(&root).unwrap()));

    let (s, ack) = json_call(&app, "POST", "/sessions/s/decisions", decision("logo000", "accept")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ack["duplicate"], false);
    json_call(&app, "POST", "/sessions/s/decisions", decision("logo000", "reject")).await;
    json_call(&app, "POST", "/sessions/s/decisions", decision("logo000", "accept")).await;
    json_call(&app, "POST", "/sessions/s/decisions", decision("logo001", "reject")).await;

    let (_, history) = json_call(&app, "GET", "/sessions/s/history", None).await;
    let seq: Vec<(String, String)> = history
        .as_array()
        .unwrap()
        .iter()
        .map(|e| {
            (
                e["logo_id"].as_str().unwrap().into(),
                e["decision"].as_str().unwrap().into(),
            )
        })
        .collect();
    assert_eq!(
        seq,
        [
            ("logo000", "accept"),
            ("logo000", "reject"),
            ("logo000", "accept"),
            ("logo001", "reject")
        ]
        .map(|(a, b)| (a.to_string(), b.to_string()))
    );

    let (_, progress) = json_call(&app, "GET", "/sessions/s/progress", None).await;
    assert_eq!(progress["decided"], 2);
    assert_eq!(progress["accepted"], 1);
    assert_eq!(progress["rejected"], 1);
    assert_eq!(progress["pending"], 10);

    // A fresh server over the same directory sees the same state, and a
    // retried submission is acknowledged without a new log entry.
    let app = router(ServerState::new(ReviewStore::open(&root).unwrap()));
    let (_, ack) = json_call(&app, "POST", "/sessions/s/decisions", decision("logo000", "accept")).await;
    assert_eq!(ack["duplicate"], true);
    let (_, history) = json_call(&app, "GET", "/sessions/s/history", None).await;
    assert_eq!(history.as_array().unwrap().len(), 4);

    let (_, decided) = json_call(&app, "GET", "/sessions/s/candidates?filter=decided", None).await;
    assert_eq!(decided["total"], 2);

    let saved = MiningRun::load(&run).unwrap();
    assert_eq!(saved.result("logo000").unwrap().decision, ReviewDecision::Accepted);
    assert_eq!(saved.result("logo001").unwrap().decision, ReviewDecision::Rejected);
}

#[tokio::test]
async fn images_are_served_as_png() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let (fx, run) = mined(dir.path(), &spec, 6);
    let store = ReviewStore::open(dir.path().join("reviews")).unwrap();
    store
        .create_mining("s", &run, &fx.bank, Some(&fx.dataset), 11, 3)
        .unwrap();
    let app = router(ServerState::new(store));

    let (s, logo) = call(&app, "GET", "/sessions/s/logos/logo002", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&logo[..8], b"\x89PNG\r\n\x1a\n");

    let samples = evidence_samples(&DatasetManifest::load(&fx.dataset).unwrap(), 3, 11).unwrap();
    let bank = BankManifest::load(&fx.bank).unwrap();
    let expected = evidence_image(
        &samples[2],
        &bank.load_logo("logo002").unwrap(),
        1,
        &PlacementPolicy::default(),
    )
    .unwrap();
    let (s, got) = call(&app, "GET", "/sessions/s/evidence/logo002/2", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(got, expected);

    let (s, _) = call(&app, "GET", "/sessions/s/evidence/logo002/3", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (fx, run) = mined(dir.path(), &small_spec(), 6);
    let store = ReviewStore::open(dir.path().join("reviews")).unwrap();
    store.create_mining("s", &run, &fx.bank, None, 0, 2).unwrap();
    let app = router(ServerState::new(store));

    let (s, body) = json_call(&app, "GET", "/sessions/nope/progress", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "unknown_session");

    let (s, body) = json_call(&app, "POST", "/sessions/s/decisions", decision("logo999", "accept")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "unknown_logo");

    let (s, _) = call(
        &app,
        "POST",
        "/sessions/s/decisions",
        Some(json!({"logo_id": "logo000", "decision": "maybe"})),
    )
    .await;
    assert!(s.is_client_error());

    // Unlabeled noise sample.
    let (s, body) = json_call(&app, "POST", "/sessions/s/noise-estimate", None).await;
    assert!(s.is_client_error(), "{s} {body}");

    let (s, _) = call(&app, "GET", "/elsewhere", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn bearer_token_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let store = ReviewStore::open(dir.path().join("reviews")).unwrap();
    let app = router(ServerState::new(store).with_token(Some("sesame".into())));

    let (s, body) = call(&app, "GET", "/sessions", None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["error"], "unauthorized");
    let (s, _) = call_with(&app, "GET", "/sessions", None, Some("wrong")).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = call_with(&app, "GET", "/sessions", None, Some("sesame")).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn noise_session_estimates_the_non_logo_rate() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FixtureSpec {
        images: 2,
        logos: 240,
        markers: 0,
        distractors: 0,
        logo_size: 16,
        ..FixtureSpec::default()
    };
    let fx = write_fixture(dir.path(), &spec).unwrap();
    let store = ReviewStore::open(dir.path().join("reviews")).unwrap();
    let session = store.create_noise("noise", &fx.bank, 200, 3).unwrap();
    let ids: Vec<String> = session.meta().candidates.iter().map(|c| c.logo_id.clone()).collect();
    assert_eq!(ids.len(), 200);
    let app = router(ServerState::new(store));

    for (i, id) in ids.iter().enumerate() {
        let verdict = if i % 50 == 7 { "reject" } else { "accept" };
        let (s, _) = call(&app, "POST", "/sessions/noise/decisions", decision(id, verdict)).await;
        assert_eq!(s, StatusCode::OK);
    }
    let (s, est) = json_call(&app, "POST", "/sessions/noise/noise-estimate", None).await;
    assert_eq!(s, StatusCode::OK, "{est}");
    assert_eq!(est["non_logo_count"], 4);
    assert_eq!(est["noise_rate"], 0.02);
    assert_eq!(
        BankManifest::load(&fx.bank).unwrap().header.noise.unwrap().noise_rate,
        0.02
    );
}

#[tokio::test]
async fn partial_noise_labels_are_a_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FixtureSpec {
        images: 2,
        logos: 20,
        markers: 0,
        distractors: 0,
        ..FixtureSpec::default()
    };
    let fx = write_fixture(dir.path(), &spec).unwrap();
    let store = ReviewStore::open(dir.path().join("reviews")).unwrap();
    let session = store.create_noise("noise", &fx.bank, 10, 0).unwrap();
    let first = session.meta().candidates[0].logo_id.clone();
    let app = router(ServerState::new(store));
    call(&app, "POST", "/sessions/noise/decisions", decision(&first, "accept")).await;
    let (s, body) = json_call(&app, "POST", "/sessions/noise/noise-estimate", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["error"], "incomplete_labeling");
}

#[tokio::test]
async fn ui_directory_is_served_without_escaping_it() {
    let dir = tempfile::tempdir().unwrap();
    let ui = dir.path().join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<html>review</html>").unwrap();
    std::fs::write(dir.path().join("secret.txt"), "no").unwrap();
    let store = ReviewStore::open(dir.path().join("reviews")).unwrap();
    let app = router(ServerState::new(store).with_ui_dir(Some(ui)));

    let (s, body) = call(&app, "GET", "/ui/", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"<html>review</html>");
    let (s, _) = call(&app, "GET", "/ui/../secret.txt", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
