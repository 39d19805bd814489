//! The proxy backend against stand-in chat endpoints.

mod common;

use std::time::{Duration, Instant};

use axum::routing::post;
use axum::{Json, Router};
use base64::Engine;
use common::*;
use convsplat_cli::service::proxy::ProxyRequest;
use convsplat_cli::service::ServiceOptions;
use serde_json::{json, Value};

async fn endpoint(app: Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}/chat")
}

fn options(url: String, timeout: Duration) -> ServiceOptions {
    ServiceOptions {
        llm_url: Some(url),
        llm_timeout: timeout,
        ..ServiceOptions::default()
    }
}

async fn ask(base: &str, level: Value) -> (u16, Value, Duration) {
    let mut body = json!({"question": "how many mugs?", "backend": "proxy"});
    for (k, v) in level.as_object().unwrap() {
        body[k] = v.clone();
    }
    let start = Instant::now();
    let r = reqwest::Client::new()
        .post(format!("{base}/chat"))
        .json(&body)
        .send()
        .await
        .unwrap();
    let status = r.status().as_u16();
    (status, r.json().await.unwrap(), start.elapsed())
}

#[tokio::test]
async fn echo_endpoint_sees_the_tokens() {
    let echo = Router::new().route(
        "/chat",
        post(|Json(req): Json<ProxyRequest>| async move {
            let bytes = base64::engine::general_purpose::STANDARD.decode(&req.tokens).unwrap();
            let c = convsplat_core::cstf::Container::from_bytes(&bytes).unwrap();
            let grid = convsplat_core::chat::tokens_from_container(&c).unwrap();
            assert_eq!(grid.count, req.token_count);
            assert_eq!(grid.dim, req.token_dim);
            Json(json!({"answer": format!("{} | {} | {}x{}", req.question, req.level, grid.count, grid.dim)}))
        }),
    );
    let url = endpoint(echo).await;
    let (base, _) = serve(Some(loaded(1, false)), options(url, Duration::from_secs(5))).await;
    let (s, v, _) = ask(&base, json!({"level": "scene", "cams": [0, 1]})).await;
    assert_eq!(s, 200, "{v}");
    assert_eq!(v["answer"], "how many mugs? | scene | 32x16");
    assert_eq!(v["backend"], "proxy");
    assert_eq!(v["tokens_used"], 32);
}

#[tokio::test]
async fn slow_endpoint_times_out() {
    let slow = Router::new().route(
        "/chat",
        post(|| async {
            tokio::time::sleep(Duration::from_secs(10)).await;
            Json(json!({"answer": "late"}))
        }),
    );
    let url = endpoint(slow).await;
    let timeout = Duration::from_millis(300);
    let (base, _) = serve(Some(loaded(1, false)), options(url, timeout)).await;
    let (s, v, took) = ask(&base, json!({"level": "view", "cams": [0]})).await;
    assert_eq!(s, 502);
    assert!(v["error"].as_str().unwrap().contains("timed out"), "{v}");
    assert!(took < timeout + Duration::from_secs(1), "{took:?}");
}

#[tokio::test]
async fn malformed_and_failing_endpoints() {
    let bad = Router::new()
        .route("/chat", post(|| async { "certainly! here is my answer" }))
        .route("/wrong", post(|| async { Json(json!({"reply": "no answer field"})) }))
        .route(
            "/down",
            post(|| async { (axum::http::StatusCode::SERVICE_UNAVAILABLE, "busy") }),
        );
    let url = endpoint(bad).await;
    let root = url.trim_end_matches("/chat").to_string();
    for (path, needle) in [("chat", "malformed"), ("wrong", "malformed"), ("down", "503")] {
        let (base, _) = serve(Some(loaded(1, false)), options(format!("{root}/{path}"), Duration::from_secs(5))).await;
        let (s, v, _) = ask(&base, json!({"level": "view", "cams": [1]})).await;
        assert_eq!(s, 502, "{path}");
        assert!(v["error"].as_str().unwrap().contains(needle), "{path}: {v}");
    }
    let (base, _) = serve(
        Some(loaded(1, false)),
        options("http://127.0.0.1:9/chat".into(), Duration::from_secs(2)),
    )
    .await;
    let (s, _, _) = ask(&base, json!({"level": "view", "cams": [0]})).await;
    assert_eq!(s, 502);
}
