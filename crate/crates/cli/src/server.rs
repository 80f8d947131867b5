use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nl2sql_core::embedding::EmbeddingProvider;
use nl2sql_core::executor::{execute_sql, ExecutionOutcome, Row};
use nl2sql_core::generator::SqlGenerator;
use nl2sql_core::orchestrator::{
    answer_question, Catalog, InferenceTrace, Pipeline, PipelineOptions,
};
use nl2sql_core::retriever::{retrieve_columns, RetrievalResult};
use nl2sql_core::schema::{DatabaseSchema, QuestionRecord};
use nl2sql_core::Head;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use tokio::net::TcpListener;
use tokio::sync::Semaphore;

/// Upper bound on `max_iterations` accepted from clients.
pub const MAX_ITERATIONS_LIMIT: usize = 10;
pub const REQUEST_QUESTION_ID: &str = "request";

pub struct AppState {
    pub catalog: Catalog,
    pub provider: Box<dyn EmbeddingProvider>,
    pub head: Option<Head>,
    pub generator: Box<dyn SqlGenerator>,
    pub options: PipelineOptions,
    pub row_cap: usize,
    workers: Semaphore,
}

impl AppState {
    pub fn new(
        catalog: Catalog,
        provider: Box<dyn EmbeddingProvider>,
        head: Option<Head>,
        generator: Box<dyn SqlGenerator>,
        options: PipelineOptions,
        row_cap: usize,
    ) -> Self {
        Self {
            workers: Semaphore::new(options.parallelism.max(1)),
            catalog,
            provider,
            head,
            generator,
            options,
            row_cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.into(),
                fields: Vec::new(),
            },
        }
    }

    fn unknown_db(db_id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown database {db_id}"))
    }

    fn invalid(fields: Vec<FieldError>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                error: "invalid request".into(),
                fields,
            },
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| {
        let mut err = ApiError::new(StatusCode::BAD_REQUEST, "malformed request body");
        err.body.fields.push(FieldError {
            field: field_of(&e.to_string()).unwrap_or("body").to_string(),
            message: e.to_string(),
        });
        err
    })
}

/// Field named in a serde message such as "missing field `question`".
fn field_of(message: &str) -> Option<&str> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(&message[start..start + len])
}

fn require_text(fields: &mut Vec<FieldError>, name: &str, value: &str) {
    if value.trim().is_empty() {
        fields.push(FieldError {
            field: name.into(),
            message: "must not be empty".into(),
        });
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    pub db_id: String,
    pub question: String,
    #[serde(default)]
    pub evidence: Option<String>,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AskRequest {
    pub db_id: String,
    pub question: String,
    #[serde(default)]
    pub evidence: Option<String>,
    #[serde(default)]
    pub max_iterations: Option<usize>,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecuteRequest {
    pub db_id: String,
    pub sql: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseSummary {
    pub db_id: String,
    pub tables: usize,
    pub columns: usize,
    pub foreign_keys: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskResponse {
    #[serde(flatten)]
    pub trace: InferenceTrace,
    /// Result of the final attempt, capped at the row limit.
    #[serde(default)]
    pub columns: Option<Vec<String>>,
    #[serde(default)]
    pub rows: Option<Vec<Row>>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecuteResponse {
    #[serde(flatten)]
    pub outcome: ExecutionOutcome,
    pub row_count: usize,
    pub truncated: bool,
}

/// Truncates the rows of `o` to `cap`, returning the original row count.
fn cap_rows(o: &mut ExecutionOutcome, cap: usize) -> usize {
    match o.rows.as_mut() {
        Some(rows) => {
            let n = rows.len();
            rows.truncate(cap);
            n
        }
        None => 0,
    }
}

fn question(db_id: &str, text: &str, evidence: Option<String>) -> QuestionRecord {
    let mut q = QuestionRecord::new(REQUEST_QUESTION_ID, db_id, text);
    q.evidence = evidence.filter(|e| !e.trim().is_empty());
    q
}

async fn blocking<T: Send + 'static>(
    state: &Arc<AppState>,
    f: impl FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let _permit = state.workers.acquire().await.map_err(ApiError::internal)?;
    let state = state.clone();
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(ApiError::internal)?
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "databases": state.catalog.len() }))
}

async fn databases(State(state): State<Arc<AppState>>) -> Json<Vec<DatabaseSummary>> {
    Json(
        state
            .catalog
            .values()
            .map(|b| DatabaseSummary {
                db_id: b.schema.db_id.clone(),
                tables: b.schema.tables().len(),
                columns: b.schema.columns.len(),
                foreign_keys: b.schema.foreign_key_edges.len(),
            })
            .collect(),
    )
}

async fn schema(
    State(state): State<Arc<AppState>>,
    Path(db_id): Path<String>,
) -> ApiResult<DatabaseSchema> {
    state
        .catalog
        .get(&db_id)
        .map(|b| Json(b.schema.clone()))
        .ok_or_else(|| ApiError::unknown_db(&db_id))
}

async fn retrieve(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<RetrievalResult<f64>> {
    let req: RetrieveRequest = parse_body(&body)?;
    let mut fields = Vec::new();
    require_text(&mut fields, "question", &req.question);
    if req.k == Some(0) {
        fields.push(FieldError {
            field: "k".into(),
            message: "must be at least 1".into(),
        });
    }
    if !fields.is_empty() {
        return Err(ApiError::invalid(fields));
    }
    if !state.catalog.contains_key(&req.db_id) {
        return Err(ApiError::unknown_db(&req.db_id));
    }
    blocking(&state, move |s| {
        let bundle = &s.catalog[&req.db_id];
        let q = question(&req.db_id, &req.question, req.evidence);
        let k = req.k.unwrap_or(s.options.k);
        retrieve_columns(&q, &bundle.index, s.provider.as_ref(), s.head.as_ref(), k)
            .map_err(ApiError::internal)
    })
    .await
    .map(Json)
}

async fn ask(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<AskResponse> {
    let req: AskRequest = parse_body(&body)?;
    let mut fields = Vec::new();
    require_text(&mut fields, "question", &req.question);
    if req.k == Some(0) {
        fields.push(FieldError {
            field: "k".into(),
            message: "must be at least 1".into(),
        });
    }
    if req.max_iterations.is_some_and(|m| m > MAX_ITERATIONS_LIMIT) {
        fields.push(FieldError {
            field: "max_iterations".into(),
            message: format!("must be at most {MAX_ITERATIONS_LIMIT}"),
        });
    }
    if !fields.is_empty() {
        return Err(ApiError::invalid(fields));
    }
    if !state.catalog.contains_key(&req.db_id) {
        return Err(ApiError::unknown_db(&req.db_id));
    }
    blocking(&state, move |s| {
        let bundle = &s.catalog[&req.db_id];
        let q = question(&req.db_id, &req.question, req.evidence);
        let pipeline = Pipeline {
            provider: s.provider.as_ref(),
            head: s.head.as_ref(),
            generator: s.generator.as_ref(),
            options: PipelineOptions {
                k: req.k.unwrap_or(s.options.k),
                max_iterations: req.max_iterations.unwrap_or(s.options.max_iterations),
                ..s.options
            },
        };
        let mut trace = answer_question(&q, bundle, &pipeline).map_err(ApiError::internal)?;
        let mut truncated = false;
        for a in &mut trace.attempts {
            truncated |= cap_rows(&mut a.outcome, s.row_cap) > s.row_cap;
        }
        let last = trace.last().outcome.clone();
        Ok(AskResponse {
            columns: last.columns,
            rows: last.rows,
            truncated,
            trace,
        })
    })
    .await
    .map(Json)
}

async fn execute(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<ExecuteResponse> {
    let req: ExecuteRequest = parse_body(&body)?;
    let mut fields = Vec::new();
    require_text(&mut fields, "sql", &req.sql);
    if !fields.is_empty() {
        return Err(ApiError::invalid(fields));
    }
    if !state.catalog.contains_key(&req.db_id) {
        return Err(ApiError::unknown_db(&req.db_id));
    }
    blocking(&state, move |s| {
        let handle = &s.catalog[&req.db_id].handle;
        let mut outcome = execute_sql(handle, &req.sql, &s.options.limits);
        let row_count = cap_rows(&mut outcome, s.row_cap);
        Ok(ExecuteResponse {
            outcome,
            row_count,
            truncated: row_count > s.row_cap,
        })
    })
    .await
    .map(Json)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/databases", get(databases))
        .route("/schema/:db_id", get(schema))
        .route("/retrieve", post(retrieve))
        .route("/ask", post(ask))
        .route("/execute", post(execute))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_names_come_from_serde_messages() {
        let e = serde_json::from_str::<AskRequest>(r#"{"db_id": "x"}"#).unwrap_err();
        assert_eq!(field_of(&e.to_string()), Some("question"));
        assert_eq!(field_of("expected value"), None);
    }
}
