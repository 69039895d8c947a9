use std::collections::HashMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use iotsh_core::classify::ClassifyResponse;
use iotsh_core::ingest::{collect_chunks, IngestReport};
use iotsh_core::jsonl::Sink;
use iotsh_core::rag::{Mode, QueryRequest, RagPipeline, UseCase};
use iotsh_core::resource::aggregate;
use iotsh_core::store::StoredEntry;
use iotsh_core::{Error, RagRecord, Store};

use crate::alerts::AlertLog;
use crate::app::{evaluate_qa, Components};
use crate::reports;

pub struct ServerState {
    pub components: Components,
    pub store: RwLock<Store>,
    pub records: Sink,
    pub alerts: AlertLog,
    answered: Mutex<Vec<RagRecord>>,
}

impl ServerState {
    pub fn new(components: Components) -> iotsh_core::Result<Self> {
        let store = components.open_store()?;
        let records = components.record_log()?;
        let alerts = AlertLog::open(
            &components.config.data_dir.join("alerts.jsonl"),
            components.config.alert_threshold,
        )?;
        Ok(ServerState {
            components,
            store: RwLock::new(store),
            records,
            alerts,
            answered: Mutex::new(Vec::new()),
        })
    }

    fn reports_dir(&self) -> PathBuf {
        self.components.reports_dir()
    }

    fn remember(&self, records: impl IntoIterator<Item = RagRecord>) {
        self.answered
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .extend(records);
    }

    /// Writes the store to its file.
    pub fn flush(&self) -> iotsh_core::Result<()> {
        self.store
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .persist()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn field(field: &str, message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
            field: Some(field.to_owned()),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            message: message.into(),
            field: None,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Precondition(_)
            | Error::Parameter { .. }
            | Error::Degenerate(_)
            | Error::Schema(_)
            | Error::Parse { .. } => StatusCode::BAD_REQUEST,
            Error::Undefined(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Config(_) => StatusCode::CONFLICT,
            Error::Transport { .. } | Error::Integrity(_) => StatusCode::BAD_GATEWAY,
            Error::Capability(_) => StatusCode::NOT_IMPLEMENTED,
            Error::Io { .. } | Error::DimensionMismatch { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let field = match &e {
            Error::Parameter { name, .. } => Some((*name).to_owned()),
            _ => None,
        };
        ApiError {
            status,
            message: e.to_string(),
            field,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(f) = self.field {
            body["field"] = json!(f);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Field named in a serde error message, if any.
fn offending_field(message: &str) -> Option<String> {
    let start = message.find("field `")? + "field `".len();
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_owned())
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| {
        let message = format!("malformed request body: {e}");
        ApiError {
            status: StatusCode::BAD_REQUEST,
            field: offending_field(&e.to_string()),
            message,
        }
    })
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: format!("worker failed: {e}"),
        field: None,
    })?
}

async fn health(State(s): State<Arc<ServerState>>) -> Json<Value> {
    let store = s.store.read().unwrap_or_else(|p| p.into_inner());
    Json(json!({ "status": "ok", "chunks": store.len(), "dim": store.dim() }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentsBody {
    dir: PathBuf,
}

async fn documents(State(s): State<Arc<ServerState>>, body: Bytes) -> ApiResult<IngestReport> {
    let body: DocumentsBody = parse_body(&body)?;
    if !body.dir.is_dir() {
        return Err(ApiError::field(
            "dir",
            format!("{} is not a directory", body.dir.display()),
        ));
    }
    blocking(move || {
        let c = &s.components;
        let (chunks, documents, failures) = collect_chunks(&body.dir, &c.splitter()?)?;
        let total = chunks.len();
        let mut seen = std::collections::HashSet::new();
        let fresh: Vec<_> = {
            let store = s.store.read().unwrap_or_else(|p| p.into_inner());
            chunks
                .into_iter()
                .filter(|ch| !store.contains(&ch.id) && seen.insert(ch.id.clone()))
                .collect()
        };
        let added = if fresh.is_empty() {
            0
        } else {
            let texts: Vec<&str> = fresh.iter().map(|ch| ch.text.as_str()).collect();
            let vectors = c.embedder.embed(&texts)?;
            let batch = fresh
                .into_iter()
                .zip(vectors)
                .map(|(chunk, vector)| StoredEntry { chunk, vector })
                .collect();
            s.store
                .write()
                .unwrap_or_else(|p| p.into_inner())
                .upsert(batch)?
        };
        Ok(Json(IngestReport {
            documents,
            chunks: total,
            added,
            skipped: total - added,
            failures,
        }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryBody {
    question: String,
    mode: Mode,
    #[serde(default)]
    k: Option<usize>,
    #[serde(default)]
    use_case: Option<UseCase>,
}

async fn query(State(s): State<Arc<ServerState>>, body: Bytes) -> ApiResult<RagRecord> {
    let body: QueryBody = parse_body(&body)?;
    if body.question.trim().is_empty() {
        return Err(ApiError::field("question", "question must not be empty"));
    }
    let mut request = QueryRequest::new(body.question, body.mode)
        .with_k(body.k.unwrap_or(s.components.config.default_k));
    request.use_case = body.use_case;
    if request.k == 0 {
        return Err(ApiError::field("k", "k must be at least 1"));
    }
    blocking(move || {
        let record = {
            let store = s.store.read().unwrap_or_else(|p| p.into_inner());
            let c = &s.components;
            RagPipeline::new(c.embedder.as_ref(), &store, c.generator.as_ref())
                .with_log(&s.records)
                .answer(request)?
        };
        s.remember([record.clone()]);
        Ok(Json(record))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifyBody {
    texts: Vec<String>,
}

async fn classify(State(s): State<Arc<ServerState>>, body: Bytes) -> ApiResult<ClassifyResponse> {
    let body: ClassifyBody = parse_body(&body)?;
    if body.texts.is_empty() {
        return Err(ApiError::field("texts", "at least one text is required"));
    }
    blocking(move || {
        let texts: Vec<&str> = body.texts.iter().map(String::as_str).collect();
        let batch = s.components.classifier()?.classify(&texts)?;
        s.alerts.record(&texts, &batch)?;
        Ok(Json(ClassifyResponse::from(&batch)))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluateBody {
    qa_path: PathBuf,
    modes: Vec<Mode>,
    #[serde(default)]
    k: Option<usize>,
}

#[derive(Serialize)]
struct ReportRef {
    id: String,
}

async fn evaluate(State(s): State<Arc<ServerState>>, body: Bytes) -> ApiResult<ReportRef> {
    let body: EvaluateBody = parse_body(&body)?;
    if body.modes.is_empty() {
        return Err(ApiError::field("modes", "at least one mode is required"));
    }
    if !body.qa_path.is_file() {
        return Err(ApiError::field(
            "qa_path",
            format!("{} is not a file", body.qa_path.display()),
        ));
    }
    let k = body.k.unwrap_or(s.components.config.default_k);
    if k == 0 {
        return Err(ApiError::field("k", "k must be at least 1"));
    }
    blocking(move || {
        let out = {
            let store = s.store.read().unwrap_or_else(|p| p.into_inner());
            evaluate_qa(
                &s.components,
                &store,
                &body.qa_path,
                &body.modes,
                k,
                Some(&s.records),
            )?
        };
        let value = serde_json::to_value(&out).expect("report serializes");
        let id = reports::save(&s.reports_dir(), "eval", &value)?;
        Ok(Json(ReportRef { id }))
    })
    .await
}

async fn report(
    State(s): State<Arc<ServerState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Value> {
    if !reports::valid_id(&id) {
        return Err(ApiError::field(
            "id",
            "report ids contain only letters, digits, '-' and '_'",
        ));
    }
    match reports::load(&s.reports_dir(), &id)? {
        Some(v) => Ok(Json(v)),
        None => Err(ApiError::not_found(format!("no report {id}"))),
    }
}

async fn alerts(
    State(s): State<Arc<ServerState>>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<Value> {
    let cursor = match params.get("since") {
        None => 0,
        Some(raw) => raw
            .parse::<u64>()
            .map_err(|_| ApiError::field("since", format!("{raw:?} is not a cursor")))?,
    };
    let (alerts, cursor) = s.alerts.since(cursor);
    Ok(Json(json!({ "alerts": alerts, "cursor": cursor })))
}

async fn metrics(State(s): State<Arc<ServerState>>) -> Json<Value> {
    let records = s.answered.lock().unwrap_or_else(|p| p.into_inner());
    Json(aggregate(&records).to_json())
}

pub fn router(state: Arc<ServerState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/documents", post(documents))
        .route("/v1/query", post(query))
        .route("/v1/classify", post(classify))
        .route("/v1/evaluate", post(evaluate))
        .route("/v1/reports/{id}", get(report))
        .route("/v1/alerts", get(alerts))
        .route("/v1/metrics", get(metrics))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then writes the store back.
pub async fn serve(
    state: Arc<ServerState>,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    state.flush().map_err(std::io::Error::other)?;
    log::info!("store flushed; shutting down");
    Ok(())
}
