//! A local chat-completions endpoint whose behavior is picked by the
//! request's `model` field.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

pub const REPLY: &str = "CRI: 81\nCRA: 72.5\nCCS: 66\nSCS: 90\nAES: 75\nOA: 77";
pub const PARTIAL_REPLY: &str = "CRI: 81\nCRA: 72.5\nCCS: 66\nSCS: 90\nAES: 75";

type Hits = Arc<Mutex<HashMap<String, u32>>>;

pub struct StubJudge {
    pub base_url: String,
    hits: Hits,
    _rt: tokio::runtime::Runtime,
}

impl StubJudge {
    /// Models: `fixed` always answers [`REPLY`]; `flaky` returns 503 twice
    /// then answers; `partial` answers without an OA score; `down` always
    /// returns 500; `denied` returns 401.
    pub fn start() -> Self {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
        let hits: Hits = Arc::default();
        let app = Router::new().route("/v1/chat/completions", post(handle)).with_state(hits.clone());
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
        let addr = listener.local_addr().unwrap();
        rt.spawn(async move { axum::serve(listener, app).await.unwrap() });
        Self { base_url: format!("http://{addr}/v1"), hits, _rt: rt }
    }

    pub fn hits(&self, model: &str) -> u32 {
        self.hits.lock().unwrap().get(model).copied().unwrap_or(0)
    }
}

fn completion(text: &str) -> Json<Value> {
    Json(json!({ "choices": [{ "index": 0, "message": { "role": "assistant", "content": text } }] }))
}

async fn handle(State(hits): State<Hits>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let model = body["model"].as_str().unwrap_or_default().to_string();
    let n = {
        let mut h = hits.lock().unwrap();
        let e = h.entry(model.clone()).or_default();
        *e += 1;
        *e
    };
    let has_image = body["messages"][0]["content"]
        .as_array()
        .is_some_and(|c| c.iter().any(|p| p["image_url"]["url"].as_str().is_some_and(|u| u.starts_with("data:image/png;base64,"))));
    if !has_image {
        return (StatusCode::BAD_REQUEST, Json(json!({ "error": "no image" })));
    }
    match model.as_str() {
        "fixed" => (StatusCode::OK, completion(REPLY)),
        "flaky" if n <= 2 => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "error": "busy" }))),
        "flaky" => (StatusCode::OK, completion(REPLY)),
        "partial" => (StatusCode::OK, completion(PARTIAL_REPLY)),
        "denied" => (StatusCode::UNAUTHORIZED, Json(json!({ "error": "bad token" }))),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": "down" }))),
    }
}
