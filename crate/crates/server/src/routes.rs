// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::convert::Infallible;
use std::path::PathBuf;

use axum::body::Body;
use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mifin_core::fin::{self, BiasScanParams, BiasWeighting, RagParams};
use mifin_core::interp::top_activations;
use mifin_core::lens::{logit_diff_trajectory, logit_lens_grid};
use mifin_core::model::GenerateParams;
use mifin_core::patching::{builtin_pairs, parse_pairs, patch_scan, validate_pairs, Direction, Granularity, PromptPair};
use mifin_core::sae::{steering_vector, SteeringMode};
use mifin_core::Intervention;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio_stream::wrappers::ReceiverStream;

use crate::{ApiError, AppState};

type ApiResult<T> = Result<T, ApiError>;

/// `Json` whose rejections use the API error shape.
struct ApiJson<T>(T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for ApiJson<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Self(v)),
            Err(e) => Err(ApiError::bad_request("invalid_body", rejection_text(&e))),
        }
    }
}

fn rejection_text(e: &JsonRejection) -> String {
    e.body_text()
}

/// Run CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "worker_panicked", e.to_string()))?
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/model", get(model))
        .route("/api/saes", get(list_saes).post(load_sae))
        .route("/api/tokenize", post(tokenize))
        .route("/api/lens", post(lens))
        .route("/api/logit-diff", post(logit_diff))
        .route("/api/patch", post(patch))
        .route("/api/jobs/{id}", get(job))
        .route("/api/features", get(features))
        .route("/api/features/{id}/top", get(feature_top))
        .route("/api/generate", post(generate))
        .route("/api/bias-scan", post(bias_scan))
        .route("/api/rag-answer", post(rag_answer))
        .with_state(state)
}

async fn model(State(s): State<AppState>) -> ApiResult<Json<Value>> {
    let b = s.bundle()?;
    Ok(Json(json!({ "config": b.config, "hash": b.hash(), "saes": s.saes() })))
}

async fn list_saes(State(s): State<AppState>) -> Json<Value> {
    Json(json!({ "saes": s.saes() }))
}

#[derive(Deserialize)]
struct LoadSae {
    dir: PathBuf,
    catalog: Option<PathBuf>,
    store: Option<PathBuf>,
}

async fn load_sae(State(s): State<AppState>, ApiJson(req): ApiJson<LoadSae>) -> ApiResult<Json<Value>> {
    let hash = blocking(move || {
        s.load_sae(&req.dir, req.catalog.as_deref(), req.store.as_deref())
            .map_err(ApiError::from)
    })
    .await?;
    Ok(Json(json!({ "hash": hash })))
}

#[derive(Deserialize)]
struct Text {
    text: String,
}

async fn tokenize(State(s): State<AppState>, ApiJson(req): ApiJson<Text>) -> ApiResult<Json<Value>> {
    let b = s.bundle()?;
    let ids = b.encode(&req.text);
    let tokens = ids
        .iter()
        .map(|&t| b.tokenizer.token_text(t))
        .collect::<mifin_core::Result<Vec<_>>>()?;
    Ok(Json(json!({ "ids": ids, "tokens": tokens })))
}

fn default_top_k() -> usize {
    5
}

fn yes() -> bool {
    true
}

#[derive(Deserialize)]
struct LensReq {
    text: String,
    #[serde(default = "default_top_k")]
    top_k: usize,
    #[serde(default = "yes")]
    apply_final_ln: bool,
}

async fn lens(State(s): State<AppState>, ApiJson(req): ApiJson<LensReq>) -> ApiResult<Json<Value>> {
    let b = s.bundle()?;
    let grid = blocking(move || {
        let ids = b.encode(&req.text);
        Ok(logit_lens_grid(&b, &ids, req.top_k, req.apply_final_ln)?)
    })
    .await?;
    Ok(Json(serde_json::to_value(grid).expect("serializable")))
}

#[derive(Deserialize)]
struct LogitDiffReq {
    text: String,
    token_a: String,
    token_b: String,
}

async fn logit_diff(State(s): State<AppState>, ApiJson(req): ApiJson<LogitDiffReq>) -> ApiResult<Json<Value>> {
    let b = s.bundle()?;
    blocking(move || {
        let ids = b.encode(&req.text);
        let t = logit_diff_trajectory(&b, &ids, &req.token_a, &req.token_b)?;
        Ok(Json(json!({ "token_a": req.token_a, "token_b": req.token_b, "trajectory": t })))
    })
    .await
}

#[derive(Deserialize)]
struct PatchReq {
    pairs: Option<Vec<PromptPair>>,
    corpus_id: Option<String>,
    granularity: Granularity,
    #[serde(default)]
    direction: Direction,
}

async fn patch(State(s): State<AppState>, ApiJson(req): ApiJson<PatchReq>) -> ApiResult<Response> {
    let b = s.bundle()?;
    let set = match (req.pairs, req.corpus_id) {
        (Some(pairs), None) => validate_pairs(&b, &pairs),
        (None, Some(id)) => {
            let text = builtin_pairs(&id)
                .ok_or_else(|| ApiError::not_found("corpus_not_found", format!("no built-in corpus {id:?}")))?;
            parse_pairs(&b, text.as_bytes())?
        }
        _ => {
            return Err(ApiError::bad_request(
                "invalid_body",
                "pass exactly one of `pairs` and `corpus_id`",
            ))
        }
    };
    if set.pairs.is_empty() {
        return Err(ApiError::bad_request("empty_corpus", "no valid prompt pairs"));
    }
    let rejected = set.rejected.clone();
    let (granularity, direction) = (req.granularity, req.direction);
    let id = s.jobs().submit(move || {
        let m = patch_scan(&b, &set.pairs, granularity, direction)?;
        Ok(serde_json::to_value(m).expect("serializable"))
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": id, "rejected": rejected }))).into_response())
}

async fn job(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<Value>> {
    let status = s
        .jobs()
        .get(id)
        .ok_or_else(|| ApiError::not_found("job_not_found", format!("no job {id}")))?;
    Ok(Json(serde_json::to_value(status).expect("serializable")))
}

#[derive(Deserialize)]
struct FeatureQuery {
    sae: Option<String>,
    #[serde(default)]
    query: String,
}

async fn features(State(s): State<AppState>, Query(q): Query<FeatureQuery>) -> ApiResult<Json<Value>> {
    let entry = s.sae_or_default(q.sae.as_deref())?;
    if q.query.trim().is_empty() {
        return Ok(Json(json!({ "sae": entry.sae.hash(), "features": entry.catalog.records })));
    }
    let hits = entry.catalog.search(&q.query)?;
    let features: Vec<Value> = hits
        .iter()
        .map(|h| {
            let mut v = serde_json::to_value(entry.catalog.get(h.feature)).expect("serializable");
            v["overlap"] = json!(h.overlap);
            v["jaccard"] = json!(h.jaccard);
            v
        })
        .collect();
    Ok(Json(json!({ "sae": entry.sae.hash(), "features": features })))
}

fn default_k() -> usize {
    10
}

fn default_window() -> usize {
    8
}

#[derive(Deserialize)]
struct TopQuery {
    sae: Option<String>,
    #[serde(default = "default_k")]
    k: usize,
    #[serde(default = "default_window")]
    window: usize,
}

async fn feature_top(
    State(s): State<AppState>,
    Path(id): Path<usize>,
    Query(q): Query<TopQuery>,
) -> ApiResult<Json<Value>> {
    let b = s.bundle()?;
    let entry = s.sae_or_default(q.sae.as_deref())?;
    let store = entry
        .store
        .clone()
        .ok_or_else(|| ApiError::bad_request("store_missing", "this SAE was registered without a store"))?;
    blocking(move || {
        let top = top_activations(&entry.sae, &store, id, q.k, q.window, Some(&b))?;
        Ok(Json(json!({ "sae": entry.sae.hash(), "feature": id, "top": top })))
    })
    .await
}

#[derive(Deserialize)]
struct SteerSpec {
    sae: Option<String>,
    feature: usize,
    magnitude: f32,
    #[serde(default)]
    mode: SteeringMode,
}

fn default_new_tokens() -> usize {
    32
}

#[derive(Deserialize)]
struct GenerateReq {
    text: String,
    #[serde(default = "default_new_tokens")]
    max_new_tokens: usize,
    #[serde(default)]
    steering: Vec<SteerSpec>,
    #[serde(default)]
    stream: bool,
}

#[derive(Serialize)]
struct TokenEvent {
    index: usize,
    token: u32,
    text: String,
}

async fn generate(State(s): State<AppState>, ApiJson(req): ApiJson<GenerateReq>) -> ApiResult<Response> {
    let b = s.bundle()?;
    let mut interventions: Vec<Intervention> = Vec::with_capacity(req.steering.len());
    for st in &req.steering {
        let entry = s.sae_or_default(st.sae.as_deref())?;
        interventions.push(steering_vector(&entry.sae, st.feature, st.magnitude, st.mode)?);
    }
    let ids = b.encode(&req.text);
    let params = GenerateParams::greedy(req.max_new_tokens).with_interventions(interventions);
    if !req.stream {
        return blocking(move || {
            let g = b.generate(&ids, &params)?;
            let text = b.decode(&g.tokens)?;
            Ok(Json(json!({ "tokens": g.tokens, "text": text, "truncated": g.truncated })).into_response())
        })
        .await;
    }
    // Validate before committing to a streamed 200.
    if ids.is_empty() {
        return Err(mifin_core::MifinError::EmptyInput.into());
    }
    for iv in &params.interventions {
        iv.check(&b.config, ids.len())?;
    }
    let (tx, rx) = tokio::sync::mpsc::channel::<Result<String, Infallible>>(16);
    tokio::task::spawn_blocking(move || {
        let mut index = 0;
        let mut all = Vec::new();
        let result = b.generate_with(&ids, &params, |tok| {
            all.push(tok);
            let text = b.tokenizer.token_text(tok).unwrap_or_default();
            let ev = serde_json::to_string(&TokenEvent { index, token: tok, text }).expect("serializable");
            index += 1;
            tx.blocking_send(Ok(ev + "\n")).is_ok()
        });
        let last = match result {
            Ok(g) => json!({ "done": true, "tokens": all, "text": b.decode(&all).unwrap_or_default(), "truncated": g.truncated }),
            Err(e) => {
                let e = ApiError::from(e);
                json!({ "done": true, "error": { "code": e.code, "message": e.message } })
            }
        };
        let _ = tx.blocking_send(Ok(last.to_string() + "\n"));
    });
    Ok(Response::builder()
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .body(Body::from_stream(ReceiverStream::new(rx)))
        .expect("valid response"))
}

#[derive(Deserialize)]
struct BiasReq {
    text: String,
    bias_set: BTreeSet<usize>,
    sae: Option<String>,
    theta: Option<f64>,
    epsilon: Option<f32>,
    #[serde(default)]
    weighting: BiasWeighting,
}

async fn bias_scan(State(s): State<AppState>, ApiJson(req): ApiJson<BiasReq>) -> ApiResult<Json<Value>> {
    let b = s.bundle()?;
    let entry = s.sae_or_default(req.sae.as_deref())?;
    let defaults = BiasScanParams::default();
    let params = BiasScanParams {
        theta: req.theta.unwrap_or(defaults.theta),
        epsilon: req.epsilon.unwrap_or(defaults.epsilon),
        weighting: req.weighting,
    };
    blocking(move || {
        let r = fin::bias_scan(&b, &entry.sae, &req.bias_set, &req.text, &params)?;
        Ok(Json(serde_json::to_value(r).expect("serializable")))
    })
    .await
}

#[derive(Deserialize)]
struct RagReq {
    question: String,
    index_id: String,
    threshold: Option<f64>,
    k: Option<usize>,
    max_new_tokens: Option<usize>,
    finance_set: Option<BTreeSet<usize>>,
}

async fn rag_answer(State(s): State<AppState>, ApiJson(req): ApiJson<RagReq>) -> ApiResult<Json<Value>> {
    let b = s.bundle()?;
    let idx = s.index(&req.index_id)?;
    let entry = s.sae(&idx.sae)?;
    let defaults = RagParams::default();
    let params = RagParams {
        finance_set: req.finance_set.unwrap_or_else(|| idx.finance_set.clone()),
        threshold: req.threshold.unwrap_or(defaults.threshold),
        k: req.k.unwrap_or(defaults.k),
        max_new_tokens: req.max_new_tokens.unwrap_or(defaults.max_new_tokens),
    };
    blocking(move || {
        let a = fin::answer_with_gate(&b, &entry.sae, &idx.index, &req.question, &params)?;
        Ok(Json(serde_json::to_value(a).expect("serializable")))
    })
    .await
}
