// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON API over a loaded model and its SAEs.
//!
//! `POST /api/run` runs a prompt and caches the trace under a content-hash id;
//! `POST /api/rdfa/expand` expands one node of a recursive attribution tree
//! against a cached trace; `GET /api/feature/{site}/{id}/dashboard` and
//! `GET /api/meta` read the bundle. Every response carries `schema_version`.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{model_id, saes_by_site, tokenizer, Config};
use crate::attribution::{RdfaContext, RdfaNode};
use crate::corpus::{gen_random_repeated, TokenDataset};
use crate::error::{Error, Result};
use crate::metrics::{dashboard_from, DashboardRecord, SparseActivations};
use crate::model::{forward, HookedTrace, Tokenizer, Weights};
use crate::sae::SaeParams;
use crate::SCHEMA_VERSION;

/// Runs kept in the trace cache.
pub const RUN_CACHE: usize = 32;
const DEFAULT_TOP_K: usize = 5;
const DASHBOARD_K: usize = 20;

/// Everything the service reads: immutable after startup.
pub struct Bundle {
    pub weights: Weights,
    pub model_id: String,
    pub tokenizer: Tokenizer,
    pub saes: BTreeMap<String, SaeParams>,
    /// Data the dashboards are computed on.
    pub dashboard_data: TokenDataset,
}

impl Bundle {
    pub fn new(weights: Weights, saes: Vec<SaeParams>, dashboard_data: TokenDataset) -> Result<Self> {
        Ok(Self {
            model_id: model_id(&weights),
            tokenizer: Tokenizer::synthetic(weights.config.vocab),
            saes: saes_by_site(saes, &weights)?,
            weights,
            dashboard_data,
        })
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        let w = cfg.weights()?;
        let saes = cfg.saes.iter().map(|p| crate::sae::load_sae(p)).collect::<Result<Vec<_>>>()?;
        let data = match &cfg.eval_data.as_ref().or(cfg.data.as_ref()) {
            Some(d) => d.load(w.config.vocab)?,
            None => gen_random_repeated(200, w.config.max_seq - w.config.max_seq % 2, w.config.vocab, 0)?,
        };
        let tok = tokenizer(cfg, &w)?;
        let mut b = Self::new(w, saes, data)?;
        b.tokenizer = tok;
        Ok(b)
    }
}

/// Least-recently-used map from run id to trace.
struct RunCache {
    cap: usize,
    order: VecDeque<String>,
    runs: HashMap<String, Arc<HookedTrace>>,
}

impl RunCache {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            order: VecDeque::new(),
            runs: HashMap::new(),
        }
    }

    fn get(&mut self, id: &str) -> Option<Arc<HookedTrace>> {
        let t = self.runs.get(id)?.clone();
        self.touch(id);
        Some(t)
    }

    fn touch(&mut self, id: &str) {
        if let Some(i) = self.order.iter().position(|x| x == id) {
            let k = self.order.remove(i).expect("index in range");
            self.order.push_back(k);
        }
    }

    fn insert(&mut self, id: String, trace: Arc<HookedTrace>) {
        if self.runs.contains_key(&id) {
            self.touch(&id);
            return;
        }
        if self.order.len() == self.cap {
            if let Some(old) = self.order.pop_front() {
                self.runs.remove(&old);
            }
        }
        self.order.push_back(id.clone());
        self.runs.insert(id, trace);
    }
}

pub struct AppState {
    bundle: Bundle,
    runs: Mutex<RunCache>,
    acts: Mutex<HashMap<String, Arc<SparseActivations>>>,
}

impl AppState {
    pub fn new(bundle: Bundle) -> Self {
        Self {
            bundle,
            runs: Mutex::new(RunCache::new(RUN_CACHE)),
            acts: Mutex::new(HashMap::new()),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/run", post(run))
        .route("/api/rdfa/expand", post(expand))
        .route("/api/feature/{site}/{id}/dashboard", get(dashboard))
        .route("/api/meta", get(meta))
        .with_state(state)
}

pub async fn serve(bundle: Bundle, host: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(AppState::new(bundle)))).await
}

/// An error response: status plus `{"schema_version", "error"}`.
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "schema_version": SCHEMA_VERSION, "error": self.1 }))).into_response()
    }
}

fn bad(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn not_found(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, msg.into())
}

fn internal(e: Error) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

/// Parse a JSON body, answering 400 on anything malformed.
fn parse<T: DeserializeOwned>(body: &Bytes) -> std::result::Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| bad(format!("malformed request: {e}")))
}

type ApiResult = std::result::Result<Json<Value>, ApiError>;

fn ok(mut v: Value) -> ApiResult {
    v["schema_version"] = json!(SCHEMA_VERSION);
    Ok(Json(v))
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRequest {
    pub prompt: Option<String>,
    pub tokens: Option<Vec<u32>>,
    pub model: Option<String>,
    /// Sites to decode; all loaded SAEs when absent.
    pub sites: Option<Vec<String>>,
    pub top_k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveFeature {
    pub id: usize,
    pub activation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopLogit {
    pub token: u32,
    pub text: String,
    pub logit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResponse {
    pub schema_version: u32,
    pub run_id: String,
    pub model: String,
    pub tokens: Vec<u32>,
    pub text: Vec<String>,
    /// Per site, per position: active features, largest first.
    pub features: BTreeMap<String, Vec<Vec<ActiveFeature>>>,
    /// Per position: the `top_k` largest logits.
    pub logits: Vec<Vec<TopLogit>>,
}

/// Content hash of `(model id, tokens)`.
pub fn run_id(model: &str, tokens: &[u32]) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0u8]);
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

/// Active features of one activation row, largest first.
pub fn active_features(sae: &SaeParams, row: &[f64]) -> Result<Vec<ActiveFeature>> {
    let mut v: Vec<ActiveFeature> = sae
        .encode(row)?
        .into_iter()
        .enumerate()
        .filter(|(_, a)| *a > 0.0)
        .map(|(id, activation)| ActiveFeature { id, activation })
        .collect();
    v.sort_by(|a, b| b.activation.total_cmp(&a.activation).then(a.id.cmp(&b.id)));
    Ok(v)
}

async fn run(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: RunRequest = parse(&body)?;
    let b = &st.bundle;
    if let Some(m) = &req.model {
        if *m != b.model_id {
            return Err(not_found(format!("unknown model '{m}'; loaded model is '{}'", b.model_id)));
        }
    }
    let tokens = match (&req.prompt, &req.tokens) {
        (Some(p), None) => b.tokenizer.encode(p).map_err(|e| bad(e.to_string()))?,
        (None, Some(t)) => t.clone(),
        _ => return Err(bad("give exactly one of 'prompt' and 'tokens'")),
    };
    let trace = forward(&b.weights, &tokens).map_err(|e| bad(e.to_string()))?;
    let sites = req.sites.clone().unwrap_or_else(|| b.saes.keys().cloned().collect());
    let mut features = BTreeMap::new();
    for s in &sites {
        let sae = b.saes.get(s).ok_or_else(|| not_found(format!("no SAE at site '{s}'")))?;
        let acts = trace.site(sae.site.expect("bundle SAEs are sited")).map_err(internal)?;
        let per_pos = (0..acts.rows())
            .map(|p| active_features(sae, acts.row(p)))
            .collect::<Result<Vec<_>>>()
            .map_err(internal)?;
        features.insert(s.clone(), per_pos);
    }
    let k = req.top_k.unwrap_or(DEFAULT_TOP_K);
    let logits = (0..tokens.len())
        .map(|p| {
            let row = trace.logits_at(p);
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
            idx.into_iter()
                .take(k)
                .map(|i| TopLogit {
                    token: i as u32,
                    text: b.tokenizer.token(i as u32).unwrap_or_default().to_string(),
                    logit: row[i],
                })
                .collect()
        })
        .collect();
    let id = run_id(&b.model_id, &tokens);
    st.runs.lock().expect("run cache lock").insert(id.clone(), Arc::new(trace));
    let text = tokens
        .iter()
        .map(|&t| b.tokenizer.token(t).unwrap_or_default().to_string())
        .collect();
    let resp = RunResponse {
        schema_version: SCHEMA_VERSION,
        run_id: id,
        model: b.model_id.clone(),
        tokens,
        text,
        features,
        logits,
    };
    ok(serde_json::to_value(resp).map_err(|e| internal(e.into()))?)
}

/// Address of an RDFA node: the root feature plus child indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpandRequest {
    pub run_id: String,
    pub layer: usize,
    pub dest: usize,
    pub feature: usize,
    #[serde(default)]
    pub path: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpandResponse {
    pub schema_version: u32,
    pub run_id: String,
    pub node: RdfaNode,
    pub children: Vec<RdfaNode>,
    /// `node.value - sum(children)`; zero up to rounding unless `children` is empty.
    pub remainder: f64,
}

async fn expand(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: ExpandRequest = parse(&body)?;
    let trace = st
        .runs
        .lock()
        .expect("run cache lock")
        .get(&req.run_id)
        .ok_or_else(|| not_found(format!("unknown run '{}'", req.run_id)))?;
    let b = &st.bundle;
    let mut ctx = RdfaContext::new(&b.weights, &trace).map_err(internal)?;
    for sae in b.saes.values() {
        ctx = ctx.with_sae(sae).map_err(internal)?;
    }
    let node = ctx
        .node_at(req.layer, req.dest, req.feature, &req.path)
        .map_err(|e| match e {
            Error::OutOfRange(_) | Error::InvalidArgument(_) => not_found(e.to_string()),
            e => internal(e),
        })?;
    let children = ctx.expand(&node).map_err(internal)?;
    let remainder = if children.is_empty() {
        0.0
    } else {
        node.value - children.iter().map(|c| c.value).sum::<f64>()
    };
    let resp = ExpandResponse {
        schema_version: SCHEMA_VERSION,
        run_id: req.run_id,
        node,
        children,
        remainder,
    };
    ok(serde_json::to_value(resp).map_err(|e| internal(e.into()))?)
}

/// Dashboard as served; identical to the library's [`DashboardRecord`].
pub fn dashboard_record(st: &AppState, site: &str, id: usize) -> std::result::Result<DashboardRecord, ApiError> {
    let b = &st.bundle;
    let sae = b.saes.get(site).ok_or_else(|| not_found(format!("no SAE at site '{site}'")))?;
    if id >= sae.d_sae() {
        return Err(not_found(format!("feature {id} of {}", sae.d_sae())));
    }
    let acts = {
        let cached = st.acts.lock().expect("activation cache lock").get(site).cloned();
        match cached {
            Some(a) => a,
            None => {
                let a = Arc::new(SparseActivations::collect(&b.weights, sae, &b.dashboard_data).map_err(internal)?);
                st.acts.lock().expect("activation cache lock").insert(site.to_string(), a.clone());
                a
            }
        }
    };
    dashboard_from(&b.weights, sae, id, &b.dashboard_data, &acts, DASHBOARD_K).map_err(internal)
}

async fn dashboard(State(st): State<Arc<AppState>>, UrlPath((site, id)): UrlPath<(String, String)>) -> ApiResult {
    let id: usize = id.parse().map_err(|_| bad(format!("feature id '{id}' is not a number")))?;
    let rec = dashboard_record(&st, &site, id)?;
    ok(serde_json::to_value(rec).map_err(|e| internal(e.into()))?)
}

async fn meta(State(st): State<Arc<AppState>>) -> ApiResult {
    let b = &st.bundle;
    let saes: Vec<Value> = b
        .saes
        .iter()
        .map(|(site, s)| json!({ "site": site, "d_in": s.d_in(), "d_sae": s.d_sae() }))
        .collect();
    ok(json!({
        "model": { "id": b.model_id, "config": b.weights.config },
        "saes": saes,
        "run_cache": RUN_CACHE,
        "dashboard_sequences": b.dashboard_data.len(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_induction_model, Site};
    use axum::body::{to_bytes, Body};
    use axum::http::Request;
    use tower::ServiceExt;

    const V: usize = 26;
    const T: usize = 16;

    fn state() -> Arc<AppState> {
        let w = build_induction_model(V, T, 10.0).unwrap();
        let d = 4 * w.config.d_head;
        let sae = SaeParams::init(d, 32, 1).with_site(Site::z(1));
        let data = gen_random_repeated(10, T, V, 0).unwrap();
        Arc::new(AppState::new(Bundle::new(w, vec![sae], data).unwrap()))
    }

    async fn call(st: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
            .unwrap();
        let resp = router(st.clone()).oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
        (status, serde_json::from_slice(&bytes).unwrap())
    }

    async fn raw(st: &Arc<AppState>, uri: &str, body: &str) -> StatusCode {
        let req = Request::builder()
            .method("POST")
            .uri(uri)
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap();
        router(st.clone()).oneshot(req).await.unwrap().status()
    }

    #[tokio::test]
    async fn meta_lists_saes() {
        let st = state();
        let (s, v) = call(&st, "GET", "/api/meta", None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["saes"][0]["site"], "blocks.1.attn.hook_z");
        assert_eq!(v["model"]["id"], st.bundle.model_id);
    }

    #[tokio::test]
    async fn single_token_run_matches_library() {
        let st = state();
        let (s, v) = call(&st, "POST", "/api/run", Some(json!({ "prompt": "C" }))).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["tokens"], json!([2]));
        let resp: RunResponse = serde_json::from_value(v).unwrap();
        let site = "blocks.1.attn.hook_z";
        let sae = &st.bundle.saes[site];
        let tr = forward(&st.bundle.weights, &[2]).unwrap();
        let want = active_features(sae, tr.site(Site::z(1)).unwrap().row(0)).unwrap();
        assert_eq!(resp.features[site], vec![want.clone()]);
        assert!(want.windows(2).all(|w| w[0].activation >= w[1].activation));
        assert!(want.iter().all(|f| f.activation > 0.0));
        assert_eq!(resp.run_id, run_id(&st.bundle.model_id, &[2]));
        assert_eq!(resp.logits[0].len(), DEFAULT_TOP_K);
    }

    #[tokio::test]
    async fn expand_is_stable_and_sums() {
        let st = state();
        let tokens: Vec<u32> = vec![1, 2, 3, 4, 1, 2, 3, 4];
        let (_, v) = call(&st, "POST", "/api/run", Some(json!({ "tokens": tokens }))).await;
        let run = v["run_id"].as_str().unwrap().to_string();
        let feats = &v["features"]["blocks.1.attn.hook_z"][6];
        let f = feats[0]["id"].as_u64().unwrap();
        let req = json!({ "run_id": run, "layer": 1, "dest": 6, "feature": f, "path": [] });
        let (s1, a) = call(&st, "POST", "/api/rdfa/expand", Some(req.clone())).await;
        let (_, b) = call(&st, "POST", "/api/rdfa/expand", Some(req)).await;
        assert_eq!(s1, StatusCode::OK);
        assert_eq!(a, b);
        let resp: ExpandResponse = serde_json::from_value(a).unwrap();
        let sum: f64 = resp.children.iter().map(|c| c.value).sum();
        assert!((sum - resp.node.value).abs() <= 1e-9 * resp.node.value.abs().max(1.0));
        assert!((resp.node.value - feats[0]["activation"].as_f64().unwrap()).abs() < 1e-9);

        // Descend to a leaf: the bias child of the root.
        let leaf = resp.children.len() - 1;
        let req = json!({ "run_id": run, "layer": 1, "dest": 6, "feature": f, "path": [leaf] });
        let (s, v) = call(&st, "POST", "/api/rdfa/expand", Some(req)).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["children"], json!([]));
    }

    #[tokio::test]
    async fn error_statuses() {
        let st = state();
        assert_eq!(raw(&st, "/api/run", "{not json").await, StatusCode::BAD_REQUEST);
        assert_eq!(raw(&st, "/api/run", r#"{"prompt": "A", "tokens": [0]}"#).await, StatusCode::BAD_REQUEST);
        assert_eq!(raw(&st, "/api/run", r#"{"tokens": [99]}"#).await, StatusCode::BAD_REQUEST);
        assert_eq!(raw(&st, "/api/run", r#"{"prompt": "A", "sites": ["blocks.0.attn.hook_z"]}"#).await, StatusCode::NOT_FOUND);
        let (s, v) = call(
            &st,
            "POST",
            "/api/rdfa/expand",
            Some(json!({ "run_id": "nope", "layer": 1, "dest": 0, "feature": 0 })),
        )
        .await;
        assert_eq!((s, &v["schema_version"]), (StatusCode::NOT_FOUND, &json!(1)));
        let (s, _) = call(&st, "GET", "/api/feature/blocks.1.attn.hook_z/999/dashboard", None).await;
        assert_eq!(s, StatusCode::NOT_FOUND);
        let (s, _) = call(&st, "GET", "/api/feature/blocks.0.attn.hook_z/1/dashboard", None).await;
        assert_eq!(s, StatusCode::NOT_FOUND);
        let (s, _) = call(&st, "GET", "/api/feature/blocks.1.attn.hook_z/x/dashboard", None).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
    }

    #[tokio::test]
    async fn dashboard_matches_library() {
        let st = state();
        let (s, v) = call(&st, "GET", "/api/feature/blocks.1.attn.hook_z/3/dashboard", None).await;
        assert_eq!(s, StatusCode::OK);
        let got: DashboardRecord = serde_json::from_value(v).unwrap();
        let b = &st.bundle;
        let want = crate::metrics::export_dashboard(
            &b.weights,
            &b.saes["blocks.1.attn.hook_z"],
            3,
            &b.dashboard_data,
            DASHBOARD_K,
        )
        .unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn lru_evicts_oldest() {
        let tr = Arc::new(forward(&build_induction_model(V, T, 10.0).unwrap(), &[0]).unwrap());
        let mut c = RunCache::new(2);
        c.insert("a".into(), tr.clone());
        c.insert("b".into(), tr.clone());
        assert!(c.get("a").is_some());
        c.insert("c".into(), tr);
        assert!(c.get("b").is_none());
        assert!(c.get("a").is_some() && c.get("c").is_some());
    }
}
