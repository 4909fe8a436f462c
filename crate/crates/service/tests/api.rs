use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use pmuse_core::api::Engine;
use pmuse_core::model::ModelConfig;
use pmuse_core::text_embed::{hash_embed, EmbeddingProvider, EmbeddingStore};
use pmuse_core::train::{Checkpoint, TrainConfig};
use pmuse_service::{resolve_addr, router, ServiceState, DEFAULT_ADDR};
use serde_json::{json, Value};
use tower::ServiceExt;

fn model_config(mode_len: usize) -> ModelConfig {
    ModelConfig { width: 16, self_layers: 1, self_heads: 2, text_dim: 8, max_len: mode_len, ..ModelConfig::default() }
}

fn app_with(provider: EmbeddingProvider, train: TrainConfig) -> Router {
    let len = train.mode.len();
    let ckpt = Checkpoint::init(model_config(len), train, &provider).unwrap();
    router(Arc::new(ServiceState::new(Engine::new(ckpt, provider).unwrap())))
}

fn app() -> Router {
    app_with(EmbeddingProvider::hash(8), TrainConfig::default())
}

async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn recommend_body() -> Value {
    json!({
        "palettes": {"image": ["#102030", null], "graphic": ["#ffffff"], "text": [null, "#000000"]},
        "phrases": [{"text": "summer sale"}, {"text": "beach", "kind": "label"}],
        "k": 4
    })
}

#[tokio::test]
async fn health_and_model() {
    let app = app();
    let (s, v) = send(&app, "GET", "/v1/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({"status": "ok"}));

    send(&app, "POST", "/v1/recommend", Some(recommend_body())).await;
    let (s, v) = send(&app, "GET", "/v1/model", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["config"]["width"], 16);
    assert_eq!(v["embedding_provider"], "hash");
    assert_eq!(v["requests"]["recommend"], 1);
    assert_eq!(v["requests"]["generate"], 0);
    assert!(v["parameters"].as_u64().unwrap() > 0);
}

#[tokio::test]
async fn recommend_fills_every_null_slot() {
    let (s, v) = send(&app(), "POST", "/v1/recommend", Some(recommend_body())).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let recs = v["recommendations"].as_array().unwrap();
    let slots: Vec<_> = recs.iter().map(|r| (r["block"].as_str().unwrap(), r["slot"].as_u64().unwrap())).collect();
    assert_eq!(slots, vec![("image", 1), ("text", 0)]);
    for r in recs {
        let cands = r["candidates"].as_array().unwrap();
        assert_eq!(cands.len(), 4);
        let probs: Vec<f64> = cands.iter().map(|c| c["probability"].as_f64().unwrap()).collect();
        assert!(probs.windows(2).all(|w| w[0] >= w[1]));
        for c in cands {
            let code = pmuse_core::color::ColorCode::new(c["code"].as_u64().unwrap() as u32).unwrap();
            let hex = pmuse_core::color::hex_to_code(c["hex"].as_str().unwrap()).unwrap();
            // Bins outside the sRGB gamut carry the nearest displayable hex.
            if pmuse_core::color::representative_rgb(code).is_some() {
                assert_eq!(hex, code);
            }
        }
    }
}

#[tokio::test]
async fn bad_requests_name_the_field() {
    let app = app();
    let cases = [
        ("/v1/recommend", json!({"palettes": {"image": ["#000000"]}}), "palettes"),
        ("/v1/recommend", json!({"palettes": {"graphic": [null, "red"]}}), "palettes.graphic[1]"),
        ("/v1/recommend", json!({"palettes": {"image": [null, null, null, null, null, null]}}), "palettes.image"),
        ("/v1/recommend", json!({"palettes": {"image": [null]}, "k": 0}), "k"),
        ("/v1/recommend", json!({"palettes": {"image": [null]}, "colour": 1}), "colour"),
        ("/v1/recommend", json!({"palettes": {"image": [null]}, "phrases": [{"text": "a", "kind": "title"}]}), "phrases[0].kind"),
        ("/v1/generate", json!({"phrases": []}), "phrases"),
        ("/v1/generate", json!({"phrases": [{"text": "a"}], "length": 0}), "length"),
        ("/v1/generate", json!({"phrases": [{"vector": [0.1, 0.2]}]}), "phrases[0].vector"),
        ("/v1/generate", json!({"phrases": [{}]}), "phrases[0]"),
    ];
    for (uri, body, path) in cases {
        let (s, v) = send(&app, "POST", uri, Some(body.clone())).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{body} -> {v}");
        assert_eq!(v["path"], path, "{body} -> {v}");
        assert!(v["error"].as_str().unwrap().len() > path.len(), "{v}");
    }
    let (s, _) = send(&app, "GET", "/v1/recommend", None).await;
    assert_eq!(s, StatusCode::METHOD_NOT_ALLOWED);
}

#[tokio::test]
async fn unknown_phrase_in_store_is_422() {
    let mut store = EmbeddingStore::new("clip-test", 8);
    store.insert("forest", hash_embed("forest", 8, 1).unwrap()).unwrap();
    let app = app_with(EmbeddingProvider::Store(Arc::new(store)), TrainConfig::default());
    let ok = json!({"phrases": [{"text": "forest"}]});
    assert_eq!(send(&app, "POST", "/v1/generate", Some(ok)).await.0, StatusCode::OK);
    let (s, v) = send(&app, "POST", "/v1/generate", Some(json!({"phrases": [{"text": "forest"}, {"text": "ocean"}]}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["path"], "phrases[1].text");
}

#[tokio::test]
async fn generated_palettes_are_distinct_and_ordered() {
    let app = app_with(EmbeddingProvider::hash(8), TrainConfig { mode: pmuse_core::corpus::SequenceMode::Pat, ..TrainConfig::default() });
    for word in ["grass", "sunset", "ocean breeze", "night"] {
        let (s, v) = send(&app, "POST", "/v1/generate", Some(json!({"phrases": [{"text": word}]}))).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        let codes: Vec<u64> = v["codes"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).collect();
        assert_eq!(codes.len(), 5);
        let mut d = codes.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 5);
        assert!(codes.windows(2).all(|w| w[0] / 256 <= w[1] / 256));
        assert_eq!(v["colors"].as_array().unwrap().len(), 5);
    }
    let (s, v) = send(&app, "POST", "/v1/recommend", Some(recommend_body())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["path"], "palettes");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_match_serial_ones() {
    let app = app();
    let bodies: Vec<Value> = (0..16)
        .map(|i| {
            if i % 2 == 0 {
                json!({"phrases": [{"text": format!("theme {i}")}], "length": 1 + i % 5})
            } else {
                let mut b = recommend_body();
                b["phrases"][0]["text"] = json!(format!("phrase {i}"));
                b
            }
        })
        .collect();
    let uri = |i: usize| if i.is_multiple_of(2) { "/v1/generate" } else { "/v1/recommend" };
    let mut serial = Vec::new();
    for (i, b) in bodies.iter().enumerate() {
        serial.push(send(&app, "POST", uri(i), Some(b.clone())).await);
    }
    let handles: Vec<_> = bodies
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let (app, b) = (app.clone(), b.clone());
            tokio::spawn(async move { send(&app, "POST", uri(i), Some(b)).await })
        })
        .collect();
    for (h, expected) in handles.into_iter().zip(serial) {
        assert_eq!(h.await.unwrap(), expected);
    }
}

#[test]
fn address_resolution() {
    // Only this test touches the variable.
    std::env::remove_var(pmuse_service::ADDR_ENV);
    assert_eq!(resolve_addr(None), DEFAULT_ADDR);
    assert_eq!(resolve_addr(Some("0.0.0.0:9000")), "0.0.0.0:9000");
    std::env::set_var(pmuse_service::ADDR_ENV, "127.0.0.1:7000");
    assert_eq!(resolve_addr(Some("0.0.0.0:9000")), "127.0.0.1:7000");
    std::env::remove_var(pmuse_service::ADDR_ENV);
}
