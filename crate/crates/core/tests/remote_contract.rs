//! HTTP clients against an in-process stub server.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use iotsh_core::classify::{remote_classify, Classifier, HttpClassifier};
use iotsh_core::embed::{Embedder, HttpEmbedder, StubEmbedder, StubTokenFallback};
use iotsh_core::generate::{Generator, HttpGenerator};
use iotsh_core::http::RetryPolicy;
use iotsh_core::Error;
use serde_json::{json, Value};

#[derive(Clone, Default)]
struct Counters {
    embed_calls: Arc<AtomicUsize>,
    flaky_calls: Arc<AtomicUsize>,
}

fn fast() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        initial_backoff: Duration::from_millis(5),
    }
}

async fn embed(State(c): State<Counters>, Json(body): Json<Value>) -> Json<Value> {
    c.embed_calls.fetch_add(1, Ordering::SeqCst);
    let vectors: Vec<Value> = body["texts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| {
            let n = t.as_str().unwrap().len() as f64;
            json!([n, 1.0, 0.0, 0.0])
        })
        .collect();
    Json(json!({ "vectors": vectors }))
}

async fn chat(Json(body): Json<Value>) -> Json<Value> {
    let prompt = body["prompt"].as_str().unwrap().to_owned();
    if body["model"] == "counted" {
        Json(json!({ "text": prompt, "usage": { "tokens": 42 } }))
    } else {
        Json(json!({ "text": prompt }))
    }
}

async fn flaky_chat(State(c): State<Counters>) -> Result<Json<Value>, StatusCode> {
    if c.flaky_calls.fetch_add(1, Ordering::SeqCst) < 2 {
        Err(StatusCode::SERVICE_UNAVAILABLE)
    } else {
        Ok(Json(json!({ "text": "recovered" })))
    }
}

async fn classify(Json(body): Json<Value>) -> Json<Value> {
    let n = body["texts"].as_array().unwrap().len();
    let labels: Vec<&str> = (0..n)
        .map(|i| if i % 2 == 0 { "DDoS_UDP" } else { "Normal" })
        .collect();
    let probs: Vec<Value> = (0..n)
        .map(|i| {
            if i % 2 == 0 {
                json!([0.1, 0.9])
            } else {
                json!([0.8, 0.2])
            }
        })
        .collect();
    Json(json!({ "classes": ["Normal", "DDoS_UDP"], "labels": labels, "probs": probs }))
}

async fn classify_without_probs(Json(_): Json<Value>) -> Json<Value> {
    Json(json!({ "classes": ["Normal"], "labels": ["Normal"] }))
}

fn serve(router: Router) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

fn stub() -> (String, Counters) {
    let counters = Counters::default();
    let router = Router::new()
        .route("/v1/embed", post(embed))
        .route("/v1/chat", post(chat))
        .route("/v1/classify", post(classify))
        .with_state(counters.clone());
    (serve(router), counters)
}

#[test]
fn embed_batches_and_checks_dimension() {
    let (url, counters) = stub();
    let client = HttpEmbedder::with_retry(url.clone(), 4, fast());
    let texts: Vec<String> = (0..65).map(|i| "x".repeat(i + 1)).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let vectors = Embedder::<f64>::embed(&client, &refs).unwrap();
    assert_eq!(vectors.len(), 65);
    assert_eq!(vectors[64].values()[0], 65.0);
    assert_eq!(counters.embed_calls.load(Ordering::SeqCst), 2);

    let wrong = HttpEmbedder::with_retry(url, 8, fast());
    match Embedder::<f64>::embed(&wrong, &["a"]) {
        Err(Error::DimensionMismatch {
            expected: 8,
            actual: 4,
        }) => {}
        other => panic!("expected dimension mismatch, got {other:?}"),
    }
}

#[test]
fn missing_token_endpoint_is_a_capability_error() {
    let (url, _) = stub();
    let client = HttpEmbedder::with_retry(url, 4, fast());
    assert!(matches!(
        Embedder::<f64>::embed_tokens(&client, "hello world"),
        Err(Error::Capability(_))
    ));
}

#[test]
fn token_embeddings_fall_back_to_the_stub() {
    let (url, _) = stub();
    let client = HttpEmbedder::with_retry(url, 4, fast());
    let scorer = StubTokenFallback::new(&client as &dyn Embedder<f64>);
    let got = scorer.embed_tokens("hello world").unwrap();
    let want = Embedder::<f64>::embed_tokens(&StubEmbedder::default(), "hello world").unwrap();
    assert_eq!(got, want);
    assert_eq!(Embedder::<f64>::dim(&scorer), 4);
}

#[test]
fn chat_usage_and_fallback() {
    let (url, _) = stub();
    let counted = HttpGenerator::with_retry(url.clone(), "counted", fast());
    let g = counted.generate("ping").unwrap();
    assert_eq!((g.text.as_str(), g.usage_tokens), ("ping", Some(42)));
    let plain = HttpGenerator::with_retry(url, "plain", fast());
    assert_eq!(plain.generate("ping").unwrap().usage_tokens, None);
}

#[test]
fn server_errors_are_retried() {
    let counters = Counters::default();
    let url = serve(
        Router::new()
            .route("/v1/chat", post(flaky_chat))
            .with_state(counters.clone()),
    );
    let g = HttpGenerator::with_retry(url, "m", fast())
        .generate("p")
        .unwrap();
    assert_eq!(g.text, "recovered");
    assert_eq!(counters.flaky_calls.load(Ordering::SeqCst), 3);
}

#[test]
fn unreachable_endpoint_is_retryable() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let err = HttpGenerator::with_retry(url, "m", fast())
        .generate("p")
        .unwrap_err();
    assert!(matches!(err, Error::Transport { attempts: 3, .. }));
    assert!(err.is_retryable());
}

#[test]
fn classify_mirrors_payload_in_order() {
    let (url, _) = stub();
    let client = HttpClassifier::with_retry(url, fast());
    let preds = remote_classify::<f64>(&client, &["first", "second", "third"]).unwrap();
    let labels: Vec<&str> = preds.iter().map(|p| p.label.as_str()).collect();
    assert_eq!(labels, vec!["DDoS_UDP", "Normal", "DDoS_UDP"]);
    assert_eq!(preds[1].probs, vec![0.8, 0.2]);
    let batch = Classifier::<f64>::classify(&client, &["x"]).unwrap();
    assert_eq!(batch.classes, vec!["Normal", "DDoS_UDP"]);
}

#[test]
fn classify_contract_violations() {
    let (url, _) = stub();
    let client = HttpClassifier::with_retry(url.clone(), fast());
    assert!(matches!(
        remote_classify::<f64>(&client, &[]),
        Err(Error::Precondition(_))
    ));

    let pinned =
        HttpClassifier::with_retry(url, fast()).expecting(vec!["Normal".into(), "XSS".into()]);
    assert!(matches!(
        remote_classify::<f64>(&pinned, &["x"]),
        Err(Error::Integrity(_))
    ));

    let broken = serve(Router::new().route("/v1/classify", post(classify_without_probs)));
    let client = HttpClassifier::with_retry(broken, fast());
    assert!(matches!(
        remote_classify::<f64>(&client, &["x"]),
        Err(Error::Integrity(_))
    ));
}
