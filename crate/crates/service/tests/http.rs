use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use iotsh_core::classify::{predict_nb, train_nb, validate_response, ClassifyResponse};
use iotsh_core::flow::{apply_policy, textualize, FeaturePolicy, FlowTable};
use iotsh_service::app::Components;
use iotsh_service::config::Config;
use iotsh_service::server::{router, ServerState};

fn manuals() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/manuals")
}

fn qa() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/qa20.jsonl")
}

fn flows() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/flows.csv")
}

fn flow_texts() -> Vec<(String, String)> {
    let table = FlowTable::load(flows(), "Attack_type").unwrap();
    let table = apply_policy(&table, &FeaturePolicy::edge_iiot_default()).table;
    textualize(&table)
        .unwrap()
        .into_iter()
        .map(|r| (r.text, r.label))
        .collect()
}

struct Harness {
    _dir: tempfile::TempDir,
    app: Router,
    state: Arc<ServerState>,
}

fn harness(with_model: bool) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let mut config = Config {
        data_dir: dir.path().join("data"),
        store_path: dir.path().join("data/store.jsonl"),
        ..Config::default()
    };
    if with_model {
        let table = FlowTable::load(flows(), "Attack_type").unwrap();
        let rows =
            textualize(&apply_policy(&table, &FeaturePolicy::edge_iiot_default()).table).unwrap();
        let model = train_nb::<f64>(&rows).unwrap();
        let path = dir.path().join("nb.json");
        std::fs::write(&path, serde_json::to_string(&model).unwrap()).unwrap();
        config.baseline_model_path = Some(path);
    }
    let state = Arc::new(ServerState::new(Components::build(config).unwrap()).unwrap());
    Harness {
        _dir: dir,
        app: router(state.clone()),
        state,
    }
}

impl Harness {
    async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let body = match body {
            Some(v) => Body::from(v.to_string()),
            None => Body::empty(),
        };
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(body)
            .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX)
            .await
            .unwrap();
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes)
                .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, value)
    }

    async fn raw(&self, method: &str, uri: &str, body: &str) -> (StatusCode, Value) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(Body::from(body.to_owned()))
            .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX)
            .await
            .unwrap();
        (
            status,
            serde_json::from_slice(&bytes).unwrap_or(Value::Null),
        )
    }

    async fn chunks(&self) -> u64 {
        let (status, v) = self.call("GET", "/v1/health", None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(v["status"], "ok");
        v["chunks"].as_u64().unwrap()
    }

    async fn ingest(&self) -> Value {
        let (status, v) = self
            .call("POST", "/v1/documents", Some(json!({ "dir": manuals() })))
            .await;
        assert_eq!(status, StatusCode::OK, "{v}");
        v
    }
}

#[tokio::test]
async fn ingestion_is_idempotent() {
    let h = harness(false);
    assert_eq!(h.chunks().await, 0);
    let first = h.ingest().await;
    assert_eq!(first["added"], 20);
    assert_eq!(first["skipped"], 0);
    let second = h.ingest().await;
    assert_eq!(second["added"], 0);
    assert_eq!(second["skipped"], 20);
    assert_eq!(h.chunks().await, 20);
}

#[tokio::test]
async fn malformed_bodies_are_rejected_without_mutation() {
    let h = harness(true);
    h.ingest().await;

    let cases = [
        ("/v1/documents", json!({ "dir": "/no/such/dir" }), "dir"),
        ("/v1/documents", json!({ "directory": "x" }), "directory"),
        (
            "/v1/query",
            json!({ "question": "  ", "mode": "wc" }),
            "question",
        ),
        ("/v1/query", json!({ "mode": "wc" }), "question"),
        (
            "/v1/query",
            json!({ "question": "reset", "mode": "wc", "k": 0 }),
            "k",
        ),
        ("/v1/classify", json!({ "texts": [] }), "texts"),
        (
            "/v1/evaluate",
            json!({ "qa_path": qa(), "modes": [] }),
            "modes",
        ),
        (
            "/v1/evaluate",
            json!({ "qa_path": "/no/such.jsonl", "modes": ["wc"] }),
            "qa_path",
        ),
    ];
    for (uri, body, field) in cases {
        let (status, v) = h.call("POST", uri, Some(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri} {body}: {v}");
        assert_eq!(v["field"], field, "{uri} {body}: {v}");
        assert!(v["error"].is_string());
    }
    let (status, v) = h.raw("POST", "/v1/query", "{not json").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("malformed"));
    let (status, _) = h
        .call(
            "POST",
            "/v1/query",
            Some(json!({ "question": "q", "mode": "xc" })),
        )
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    assert_eq!(h.chunks().await, 20);
    let (_, alerts) = h.call("GET", "/v1/alerts", None).await;
    assert_eq!(alerts["alerts"], json!([]));
    let (_, metrics) = h.call("GET", "/v1/metrics", None).await;
    assert_eq!(metrics["groups"], json!([]));
}

#[tokio::test]
async fn query_returns_a_record_and_feeds_metrics() {
    let h = harness(false);
    h.ingest().await;
    let body = json!({
        "question": "how do I pair thermostat with gateway using thermostat mode key",
        "mode": "wc",
        "k": 3,
    });
    let (status, record) = h.call("POST", "/v1/query", Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{record}");
    assert_eq!(record["retrieved"].as_array().unwrap().len(), 3);
    assert_eq!(record["retrieved"][0]["source"], "01_thermostat.txt");
    assert!(record["answer"]
        .as_str()
        .unwrap()
        .starts_with("To pair the thermostat"));
    assert_eq!(record["request"]["k"], 3);

    let (status, record) = h
        .call(
            "POST",
            "/v1/query",
            Some(json!({ "question": "what is zigbee", "mode": "nc" })),
        )
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(record["retrieved"], json!([]));

    let (_, metrics) = h.call("GET", "/v1/metrics", None).await;
    let groups = metrics["groups"].as_array().unwrap();
    assert_eq!(groups.len(), 2, "{metrics}");
    let log = std::fs::read_to_string(h.state.records.path()).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[tokio::test]
async fn classify_follows_the_contract_and_raises_alerts() {
    let h = harness(true);
    let rows = flow_texts();
    let normal = rows.iter().find(|r| r.1 == "Normal").unwrap();
    let xss = rows.iter().find(|r| r.1 == "XSS").unwrap();
    let texts = vec![xss.0.clone(), normal.0.clone()];

    let (status, v) = h
        .call("POST", "/v1/classify", Some(json!({ "texts": texts })))
        .await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let resp: ClassifyResponse = serde_json::from_value(v).unwrap();
    let checked = validate_response::<f64>(resp.clone(), 2, None).unwrap();
    assert_eq!(resp.labels, vec!["XSS", "Normal"]);

    let model: iotsh_core::NbModel = serde_json::from_str(
        &std::fs::read_to_string(
            h.state
                .components
                .config
                .baseline_model_path
                .as_ref()
                .unwrap(),
        )
        .unwrap(),
    )
    .unwrap();
    for (text, got) in texts.iter().zip(&checked.predictions) {
        let direct = predict_nb(&model, text).unwrap();
        assert_eq!(direct.label, got.label);
        for (a, b) in direct.probs.iter().zip(&got.probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    let (_, feed) = h.call("GET", "/v1/alerts?since=0", None).await;
    let alerts = feed["alerts"].as_array().unwrap();
    assert_eq!(alerts.len(), 1, "{feed}");
    assert_eq!(alerts[0]["predicted_class"], "XSS");
    assert_eq!(alerts[0]["row_text"], xss.0.as_str());
    assert!(alerts[0]["confidence"].as_f64().unwrap() >= 0.5);
    let cursor = feed["cursor"].as_u64().unwrap();

    let (_, feed) = h
        .call("GET", &format!("/v1/alerts?since={cursor}"), None)
        .await;
    assert_eq!(feed["alerts"], json!([]));
    assert_eq!(feed["cursor"], cursor);
    let (status, v) = h.call("GET", "/v1/alerts?since=soon", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "since");
}

#[tokio::test]
async fn alerts_never_fall_below_threshold_or_name_normal() {
    let h = harness(true);
    let texts: Vec<String> = flow_texts().into_iter().map(|r| r.0).collect();
    let (status, _) = h
        .call("POST", "/v1/classify", Some(json!({ "texts": texts })))
        .await;
    assert_eq!(status, StatusCode::OK);
    let (_, feed) = h.call("GET", "/v1/alerts", None).await;
    let alerts = feed["alerts"].as_array().unwrap();
    assert!(!alerts.is_empty());
    let mut last = 0;
    for a in alerts {
        assert_ne!(a["predicted_class"], "Normal");
        assert!(a["confidence"].as_f64().unwrap() >= 0.5);
        let id = a["id"].as_u64().unwrap();
        assert!(id > last);
        last = id;
    }
}

#[tokio::test]
async fn classify_without_a_classifier_is_a_conflict() {
    let h = harness(false);
    let (status, v) = h
        .call("POST", "/v1/classify", Some(json!({ "texts": ["a: 1"] })))
        .await;
    assert_eq!(status, StatusCode::CONFLICT, "{v}");
}

#[tokio::test]
async fn evaluation_reports_are_saved_and_served() {
    let h = harness(false);
    h.ingest().await;
    let (status, v) = h
        .call(
            "POST",
            "/v1/evaluate",
            Some(json!({ "qa_path": qa(), "modes": ["nc", "wc"] })),
        )
        .await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let id = v["id"].as_str().unwrap().to_owned();

    let (status, report) = h.call("GET", &format!("/v1/reports/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["pairs"], 20);
    assert_eq!(report["metrics"].as_array().unwrap().len(), 10);
    for m in report["metrics"].as_array().unwrap() {
        if m["mode"] == "wc" {
            assert_eq!(m["bleu"].as_f64().unwrap(), 100.0, "{m}");
        }
    }

    let (status, _) = h.call("GET", "/v1/reports/eval-999", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, v) = h.call("GET", "/v1/reports/..%2Fstore", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "id");
}

#[tokio::test]
async fn concurrent_queries_and_ingest() {
    let h = harness(false);
    h.ingest().await;
    let mut tasks = Vec::new();
    for i in 0..8 {
        let app = h.app.clone();
        tasks.push(tokio::spawn(async move {
            let body = if i % 4 == 0 {
                json!({ "dir": manuals() }).to_string()
            } else {
                json!({ "question": "how is a smart plug added to a zigbee network", "mode": "wc" })
                    .to_string()
            };
            let uri = if i % 4 == 0 {
                "/v1/documents"
            } else {
                "/v1/query"
            };
            let req = Request::builder()
                .method("POST")
                .uri(uri)
                .header("content-type", "application/json")
                .body(Body::from(body))
                .unwrap();
            app.oneshot(req).await.unwrap().status()
        }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    assert_eq!(h.chunks().await, 20);
}

#[tokio::test]
async fn shutdown_flushes_the_store() {
    let h = harness(false);
    h.ingest().await;
    let path = h.state.components.config.store_path.clone();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    iotsh_service::server::serve(h.state.clone(), listener, async {})
        .await
        .unwrap();
    let reloaded = iotsh_core::Store::load(&path).unwrap();
    assert_eq!(reloaded.len(), 20);
}
