use nl2sql_cli::catalog::Workspace;
use nl2sql_cli::config::ServiceConfig;
use nl2sql_cli::server::{serve, AppState, AskResponse, ErrorBody, ExecuteResponse};
use nl2sql_core::embedding::EmbeddingProviderConfig;
use nl2sql_core::generator::KeyedScriptedGenerator;
use nl2sql_core::retriever::RetrievalResult;
use nl2sql_core::schema::{DatabaseSchema, QuestionRecord};
use nl2sql_core::synthetic::{generate, SyntheticConfig};
use reqwest::StatusCode;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::sync::Arc;

struct Fixture {
    _dir: tempfile::TempDir,
    questions: Vec<QuestionRecord>,
    db_path: std::path::PathBuf,
}

fn fixture() -> (Fixture, ServiceConfig) {
    let dir = tempfile::tempdir().unwrap();
    let db_dir = dir.path().join("dbs");
    let corpus = generate(
        &db_dir,
        &SyntheticConfig {
            databases: 2,
            questions_per_db: 6,
            seed: 5,
            ..SyntheticConfig::default()
        },
    )
    .unwrap();
    let index_dir = dir.path().join("idx");
    std::fs::create_dir_all(&index_dir).unwrap();
    let cfg = ServiceConfig {
        listen: "127.0.0.1:0".into(),
        db_dir,
        index_dir,
        embedding: EmbeddingProviderConfig::deterministic(64),
        row_cap: 3,
        ..ServiceConfig::default()
    };
    let mut seen = std::collections::BTreeSet::new();
    let questions = corpus
        .questions
        .into_iter()
        .filter(|q| seen.insert(q.question.clone()))
        .collect();
    let db_path = corpus.handles[0].path.clone();
    (
        Fixture {
            _dir: dir,
            questions,
            db_path,
        },
        cfg,
    )
}

/// First attempt fails, the second returns the gold query.
fn scripts(questions: &[QuestionRecord]) -> BTreeMap<String, Vec<String>> {
    questions
        .iter()
        .map(|q| {
            (
                q.question.clone(),
                vec!["SELEC 1".to_string(), q.gold_sql.clone().unwrap()],
            )
        })
        .collect()
}

async fn start(cfg: &ServiceConfig, questions: &[QuestionRecord]) -> String {
    let ws = Workspace::open(cfg.clone()).unwrap();
    let catalog = ws.catalog(None).unwrap();
    let generator = Box::new(KeyedScriptedGenerator::new(scripts(questions)).unwrap());
    let state = Arc::new(AppState::new(
        catalog,
        ws.provider,
        ws.head,
        generator,
        cfg.pipeline_options(),
        cfg.row_cap,
    ));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, state));
    format!("http://{addr}")
}

async fn post(base: &str, path: &str, body: Value) -> (StatusCode, Value) {
    let r = reqwest::Client::new()
        .post(format!("{base}{path}"))
        .json(&body)
        .send()
        .await
        .unwrap();
    let status = r.status();
    (status, r.json().await.unwrap())
}

async fn get(base: &str, path: &str) -> (StatusCode, Value) {
    let r = reqwest::get(format!("{base}{path}")).await.unwrap();
    let status = r.status();
    (status, r.json().await.unwrap())
}

/// Strips timings so traces from separate runs compare equal.
fn without_timing(mut v: Value) -> Value {
    if let Some(attempts) = v.get_mut("attempts").and_then(Value::as_array_mut) {
        for a in attempts {
            a["outcome"]["elapsed_ms"] = json!(0);
        }
    }
    v
}

#[tokio::test(flavor = "multi_thread")]
async fn health_databases_and_schema() {
    let (fx, cfg) = fixture();
    let base = start(&cfg, &fx.questions).await;
    let (s, v) = get(&base, "/health").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["databases"], 2);

    let (s, v) = get(&base, "/databases").await;
    assert_eq!(s, StatusCode::OK);
    let ids: Vec<&str> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["db_id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, ["synth_00", "synth_01"]);
    assert_eq!(v[0]["tables"], 5);

    let (s, v) = get(&base, "/schema/synth_00").await;
    assert_eq!(s, StatusCode::OK);
    let schema: DatabaseSchema = serde_json::from_value(v).unwrap();
    assert_eq!(schema.db_id, "synth_00");
    assert!(!schema.foreign_key_edges.is_empty());

    let (s, v) = get(&base, "/schema/unknown").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let err: ErrorBody = serde_json::from_value(v).unwrap();
    assert!(err.error.contains("unknown"));
}

#[tokio::test(flavor = "multi_thread")]
async fn retrieve_ranks_columns() {
    let (fx, cfg) = fixture();
    let base = start(&cfg, &fx.questions).await;
    let q = &fx.questions[0];
    let (s, v) = post(
        &base,
        "/retrieve",
        json!({"db_id": q.db_id, "question": q.question, "evidence": q.evidence, "k": 7}),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let r: RetrievalResult<f64> = serde_json::from_value(v).unwrap();
    assert_eq!(r.ranked_columns.len(), 7);
    assert!(r
        .ranked_columns
        .windows(2)
        .all(|w| w[0].score >= w[1].score));

    let (s, v) = post(&base, "/retrieve", json!({"db_id": q.db_id})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["fields"][0]["field"], "question");
    let (s, v) = post(
        &base,
        "/retrieve",
        json!({"db_id": q.db_id, "question": "x", "k": 0}),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["fields"][0]["field"], "k");
    let (s, _) = post(
        &base,
        "/retrieve",
        json!({"db_id": "nope", "question": "x"}),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn ask_returns_full_trace() {
    let (fx, cfg) = fixture();
    let base = start(&cfg, &fx.questions).await;
    let q = &fx.questions[0];
    let (s, v) = post(
        &base,
        "/ask",
        json!({"db_id": q.db_id, "question": q.question, "evidence": q.evidence}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let r: AskResponse = serde_json::from_value(v).unwrap();
    assert_eq!(r.trace.attempts.len(), 2);
    assert_eq!(r.trace.iterations_used, 1);
    assert!(r.trace.executable);
    assert_eq!(&r.trace.final_sql, q.gold_sql.as_ref().unwrap());
    assert_eq!(
        r.trace.attempts[0].outcome.error_category.unwrap().as_str(),
        "syntax_error"
    );
    assert_eq!(r.trace.retrieval.ranked_columns.len(), cfg.k);
    assert!(r.rows.unwrap().len() <= cfg.row_cap);

    let (s, v) = post(
        &base,
        "/ask",
        json!({"db_id": q.db_id, "question": "   ", "max_iterations": 99}),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let fields: Vec<&str> = v["fields"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["field"].as_str().unwrap())
        .collect();
    assert_eq!(fields, ["question", "max_iterations"]);
    let (s, _) = post(&base, "/ask", json!({"db_id": "nope", "question": "x"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let bad = reqwest::Client::new()
        .post(format!("{base}/ask"))
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(bad.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_asks_match_sequential_ones() {
    let (fx, cfg) = fixture();
    let sequential = start(&cfg, &fx.questions).await;
    let concurrent = start(&cfg, &fx.questions).await;
    let body = |q: &QuestionRecord| json!({"db_id": q.db_id, "question": q.question, "evidence": q.evidence});
    let mut expected = Vec::new();
    for q in &fx.questions {
        let (s, v) = post(&sequential, "/ask", body(q)).await;
        assert_eq!(s, StatusCode::OK);
        expected.push(without_timing(v));
    }
    let handles: Vec<_> = fx
        .questions
        .iter()
        .map(|q| {
            let base = concurrent.clone();
            let b = body(q);
            tokio::spawn(async move { post(&base, "/ask", b).await })
        })
        .collect();
    for (h, want) in handles.into_iter().zip(expected) {
        let (s, v) = h.await.unwrap();
        assert_eq!(s, StatusCode::OK);
        assert_eq!(without_timing(v), want);
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn execute_is_read_only_and_capped() {
    let (fx, cfg) = fixture();
    let base = start(&cfg, &fx.questions).await;
    let digest = || Sha256::digest(std::fs::read(&fx.db_path).unwrap());
    let before = digest();

    let (s, v) = post(
        &base,
        "/execute",
        json!({"db_id": "synth_00", "sql": "SELEC 1"}),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let r: ExecuteResponse = serde_json::from_value(v).unwrap();
    assert!(!r.outcome.is_success());
    assert_eq!(r.outcome.error_category.unwrap().as_str(), "syntax_error");

    let (_, v) = post(
        &base,
        "/execute",
        json!({"db_id": "synth_00", "sql": "SELECT name FROM sqlite_master"}),
    )
    .await;
    let r: ExecuteResponse = serde_json::from_value(v).unwrap();
    assert!(r.outcome.is_success());
    assert_eq!(r.outcome.rows.as_ref().unwrap().len(), cfg.row_cap);
    assert!(r.row_count > cfg.row_cap);
    assert!(r.truncated);

    for sql in [
        "DELETE FROM sqlite_master",
        "DROP TABLE IF EXISTS x",
        "CREATE TABLE x(a)",
        "PRAGMA user_version = 3",
    ] {
        let (s, v) = post(&base, "/execute", json!({"db_id": "synth_00", "sql": sql})).await;
        assert_eq!(s, StatusCode::OK);
        assert_ne!(v["status"], "success", "{sql}");
    }
    assert_eq!(digest(), before);

    let (s, v) = post(&base, "/execute", json!({"db_id": "synth_00"})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["fields"][0]["field"], "sql");
    let (s, _) = post(
        &base,
        "/execute",
        json!({"db_id": "nope", "sql": "SELECT 1"}),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
