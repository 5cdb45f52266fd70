// SPDX-License-Identifier: MIT OR Apache-2.0

use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use mifin_core::model::fixture::tiny_model;
use mifin_core::sae::{Sae, SaeConfig, SaeParams};
use mifin_core::HookPoint;
use mifin_server::{router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

fn test_sae(d_in: usize) -> Sae {
    let cfg = SaeConfig {
        d_in,
        d_hid: 16,
        alpha: 0.1,
        seed: 5,
    };
    Sae::new(SaeParams::init(&cfg).unwrap(), HookPoint::ResidPost(0), None).unwrap()
}

fn app() -> (AppState, Router, String) {
    let bundle = tiny_model();
    let d = bundle.config.d_model;
    let state = AppState::new(Some(bundle));
    let dir = tempfile::tempdir().unwrap();
    test_sae(d).save(dir.path()).unwrap();
    let hash = state.load_sae(dir.path(), None, None).unwrap();
    (state.clone(), router(state), hash)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn json_call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

#[tokio::test]
async fn zero_magnitude_steering_matches_plain_generation() {
    let (_, app, hash) = app();
    let plain = json!({ "text": "Revenue grew", "max_new_tokens": 6 });
    let steered = json!({
        "text": "Revenue grew",
        "max_new_tokens": 6,
        "steering": [{ "sae": hash, "feature": 3, "magnitude": 0.0 }],
    });
    let (s1, a) = json_call(&app, Method::POST, "/api/generate", Some(plain)).await;
    let (s2, b) = json_call(&app, Method::POST, "/api/generate", Some(steered)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a["tokens"], b["tokens"]);
    assert_eq!(a["tokens"].as_array().unwrap().len(), 6);
}

#[tokio::test]
async fn final_lens_top1_is_the_next_greedy_token() {
    let (_, app, _) = app();
    let text = "Interest rates rose";
    let (_, grid) = json_call(&app, Method::POST, "/api/lens", Some(json!({ "text": text, "top_k": 3 }))).await;
    let (_, gen) = json_call(
        &app,
        Method::POST,
        "/api/generate",
        Some(json!({ "text": text, "max_new_tokens": 1 })),
    )
    .await;
    let cells = grid["cells"].as_array().unwrap();
    let last_layer = cells.last().unwrap().as_array().unwrap();
    let top = &last_layer.last().unwrap()[0];
    assert_eq!(top["token"], gen["tokens"][0]);
}

#[tokio::test]
async fn unknown_sae_is_a_404_with_a_code() {
    let (_, app, _) = app();
    let (s, v) = json_call(&app, Method::GET, "/api/features?sae=deadbeef", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], "sae_not_found");
    let body = json!({ "text": "x", "steering": [{ "sae": "deadbeef", "feature": 0, "magnitude": 1.0 }] });
    let (s, v) = json_call(&app, Method::POST, "/api/generate", Some(body)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], "sae_not_found");
}

#[tokio::test]
async fn bad_bodies_and_parameters_are_400() {
    let (_, app, hash) = app();
    let (s, v) = call(&app, Method::POST, "/api/lens", Some(json!({ "nope": 1 }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{}", String::from_utf8_lossy(&v));
    let body = json!({ "text": "x", "steering": [{ "sae": hash, "feature": 999, "magnitude": 1.0 }] });
    let (s, _) = json_call(&app, Method::POST, "/api/generate", Some(body)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json_call(&app, Method::GET, "/api/jobs/12345", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn model_tokenize_and_sae_listing() {
    let (_, app, hash) = app();
    let (s, v) = json_call(&app, Method::GET, "/api/model", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["saes"][0]["hash"], hash);
    let (_, v) = json_call(&app, Method::POST, "/api/tokenize", Some(json!({ "text": "Hello world" }))).await;
    assert_eq!(v["ids"], json!([15496, 995]));
    assert_eq!(v["tokens"], json!(["Hello", " world"]));
    let (_, v) = json_call(&app, Method::GET, "/api/features", None).await;
    assert_eq!(v["features"].as_array().unwrap().len(), 16);
}

#[tokio::test]
async fn patch_jobs_can_be_polled_to_completion() {
    let (_, app, _) = app();
    let body = json!({ "corpus_id": "finance-pairs", "granularity": "layer_head" });
    let (s, v) = json_call(&app, Method::POST, "/api/patch", Some(body)).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    let id = v["job_id"].as_u64().unwrap();
    let mut last = Value::Null;
    for _ in 0..600 {
        let (s, v) = json_call(&app, Method::GET, &format!("/api/jobs/{id}"), None).await;
        assert_eq!(s, StatusCode::OK);
        if v["state"] == "done" || v["state"] == "failed" {
            last = v;
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    assert_eq!(last["state"], "done", "{last}");
    assert!(last["result"].is_object());
}

#[tokio::test]
async fn streamed_generation_emits_one_event_per_token_then_done() {
    let (_, app, _) = app();
    let text = "Bond yields";
    let (_, plain) = json_call(
        &app,
        Method::POST,
        "/api/generate",
        Some(json!({ "text": text, "max_new_tokens": 5 })),
    )
    .await;
    let (s, bytes) = call(
        &app,
        Method::POST,
        "/api/generate",
        Some(json!({ "text": text, "max_new_tokens": 5, "stream": true })),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let events: Vec<Value> = String::from_utf8(bytes)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(events.len(), 6);
    for (i, e) in events[..5].iter().enumerate() {
        assert_eq!(e["index"], i);
        assert_eq!(e["token"], plain["tokens"][i]);
    }
    assert_eq!(events[5]["done"], true);
    assert_eq!(events[5]["tokens"], plain["tokens"]);
}

#[tokio::test]
async fn no_model_is_503() {
    let app = router(AppState::new(None));
    let (s, v) = json_call(&app, Method::POST, "/api/tokenize", Some(json!({ "text": "a" }))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["error"]["code"], "model_not_loaded");
}

#[tokio::test]
async fn bias_scan_round_trips() {
    let (_, app, _) = app();
    let body = json!({ "text": "The applicant is a widow.", "bias_set": [0, 1, 2] });
    let (s, v) = json_call(&app, Method::POST, "/api/bias-scan", Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert!(v["bias_ratio"].is_number(), "{v}");
    assert!(v["status"].is_string(), "{v}");
}
