use std::sync::Arc;

use pmuse_client::api::{Engine, GenerateRequest, PalettesBody, PhraseBody, RecommendRequest};
use pmuse_client::{Client, ClientError};
use pmuse_core::model::ModelConfig;
use pmuse_core::text_embed::EmbeddingProvider;
use pmuse_core::train::{Checkpoint, TrainConfig};
use pmuse_service::{serve, ServiceState};

fn engine() -> Engine {
    let provider = EmbeddingProvider::hash(8);
    let cfg = ModelConfig { width: 16, self_layers: 1, self_heads: 2, text_dim: 8, ..ModelConfig::default() };
    Engine::new(Checkpoint::init(cfg, TrainConfig::default(), &provider).unwrap(), provider).unwrap()
}

async fn start() -> Client {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, Arc::new(ServiceState::new(engine()))));
    Client::new(format!("http://{addr}/"))
}

#[tokio::test]
async fn client_matches_in_process_engine() {
    let client = start().await;
    assert!(!client.base().ends_with('/'));
    assert_eq!(client.health().await.unwrap().status, "ok");

    let local = engine();
    let rec = RecommendRequest {
        palettes: PalettesBody {
            image: vec![Some("#aa3311".into()), None],
            graphic: vec![],
            text: vec![None, Some("#f0f0f0".into())],
        },
        phrases: vec![PhraseBody::text("autumn market")],
        k: 3,
    };
    let remote = client.recommend(&rec).await.unwrap();
    let expected = local.recommend(&rec).unwrap();
    assert_eq!(serde_json::to_value(&remote).unwrap(), serde_json::to_value(&expected).unwrap());

    let gen = GenerateRequest { phrases: vec![PhraseBody::text("forest")], length: 4, post_process: true };
    let remote = client.generate(&gen).await.unwrap();
    assert_eq!(remote.codes.len(), 4);
    assert_eq!(serde_json::to_value(&remote).unwrap(), serde_json::to_value(local.generate(&gen).unwrap()).unwrap());

    let summary = client.model().await.unwrap();
    assert_eq!(summary.requests.recommend, 1);
    assert_eq!(summary.requests.generate, 1);
}

#[tokio::test]
async fn api_errors_carry_status_and_path() {
    let client = start().await;
    let bad = GenerateRequest { phrases: vec![PhraseBody::text("x")], length: 9, post_process: true };
    match client.generate(&bad).await {
        Err(ClientError::Api { status, body }) => {
            assert_eq!(status.as_u16(), 400);
            assert_eq!(body.path.as_deref(), Some("length"));
        }
        other => panic!("expected an API error, got {other:?}"),
    }
}

#[tokio::test]
async fn unreachable_server_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let err = Client::new(format!("http://{addr}")).health().await.unwrap_err();
    assert!(matches!(err, ClientError::Transport(_)));
    assert!(err.status().is_none());
}
