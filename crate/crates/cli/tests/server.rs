use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use fse_cli::server::{router, AppState, Health, CACHE_HEADER};
use fse_core::corpus::{LearningStage, SyntheticSpec};
use fse_core::engine::{stages, Engine, Paths, PipelineConfig, SimilarRequest};
use fse_core::rerank::{Ability, RerankedResult, StageMode, StudentProfile};
use tokio::sync::mpsc;
use tower::ServiceExt;

fn engine(dir: &std::path::Path) -> Engine {
    let cfg = PipelineConfig {
        paths: Paths::under(dir),
        ..PipelineConfig::default()
    };
    let spec = SyntheticSpec {
        n_templates: 6,
        per_template: 10,
        n_pairs: 240,
        ..SyntheticSpec::default()
    };
    stages::run_synthetic(&cfg, &spec, false).unwrap();
    Engine::load(cfg).unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: String) -> (StatusCode, Option<String>, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let cache = resp
        .headers()
        .get(CACHE_HEADER)
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, cache, bytes.to_vec())
}

fn request(id: &str, profile: Option<StudentProfile>) -> String {
    serde_json::to_string(&SimilarRequest::by_id(id, profile)).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn endpoints_cache_and_batching() {
    let dir = tempfile::tempdir().unwrap();
    let engine = Arc::new(engine(dir.path()));
    let cfg = engine.config().service.clone();
    let app = router(AppState::start(engine.clone(), &cfg));

    let (status, _, body) = call(&app, "GET", "/healthz", String::new()).await;
    assert_eq!(status, StatusCode::OK);
    let health: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(health.versions, *engine.versions());
    assert_eq!(health.exercises, 60);

    let (s1, c1, b1) = call(&app, "POST", "/similar", request("ex0003", None)).await;
    let (s2, c2, b2) = call(&app, "POST", "/similar", request("ex0003", None)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!((c1.as_deref(), c2.as_deref()), (Some("miss"), Some("hit")));
    assert_eq!(b1, b2);
    let parsed: RerankedResult = serde_json::from_slice(&b1).unwrap();
    assert!(!parsed.ids().contains(&"ex0003"));

    let (status, _, body) = call(&app, "POST", "/similar", "{\"id\": 3".into()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains("malformed"));
    let (status, _, _) = call(&app, "POST", "/similar", request("nope", None)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let dup = r#"{"a": {"id": "ex0001"}, "b": {"id": "ex0001"}}"#;
    let (status, _, body) = call(&app, "POST", "/duplicate", dup.into()).await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["duplicate"], true);

    // 16 concurrent distinct queries against sequential, uncached execution.
    let profile = StudentProfile {
        ability: Ability::Weak,
        stage_mode: StageMode::Synchronous,
        current_stage: LearningStage::new(9, 2),
    };
    let reqs: Vec<SimilarRequest> = (10..26)
        .map(|i| SimilarRequest::by_id(format!("ex{i:04}"), (i % 3 == 0).then_some(profile)))
        .collect();
    let handles: Vec<_> = reqs
        .iter()
        .map(|r| {
            let app = app.clone();
            let body = serde_json::to_string(r).unwrap();
            tokio::spawn(async move { call(&app, "POST", "/similar", body).await })
        })
        .collect();
    for (r, h) in reqs.iter().zip(handles) {
        let (status, _, body) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        let got: RerankedResult = serde_json::from_slice(&body).unwrap();
        assert_eq!(got, engine.query_uncached(r).unwrap());
    }
}

#[tokio::test]
async fn full_queue_answers_429() {
    let dir = tempfile::tempdir().unwrap();
    let engine = Arc::new(engine(dir.path()));
    let (tx, _rx) = mpsc::channel(1);
    let (reply, _) = tokio::sync::oneshot::channel();
    tx.try_send((SimilarRequest::by_id("ex0000", None), reply)).unwrap();
    let app = router(AppState { engine, queue: tx });
    let req = Request::builder()
        .method("POST")
        .uri("/similar")
        .body(Body::from(request("ex0001", None)))
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::TOO_MANY_REQUESTS);
    assert_eq!(resp.headers().get("retry-after").unwrap(), "1");
}
