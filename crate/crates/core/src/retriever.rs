//! Question-to-column retrieval, gold column extraction, and linking metrics.

use crate::embedding::{embed_one, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::hnsupcon::ProjectionHead;
use crate::index::{index_fingerprint, SchemaIndex, ScoredColumn};
use crate::scalar::Scalar;
use crate::schema::{column_lookup, ColumnRef, DatabaseHandle, DatabaseSchema, QuestionRecord};
use rusqlite::hooks::{AuthAction, AuthContext, Authorization};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::{Arc, Mutex};

pub const DEFAULT_K: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult<T = f64> {
    pub question_id: String,
    pub ranked_columns: Vec<ScoredColumn<T>>,
    pub k: usize,
}

impl<T> RetrievalResult<T> {
    pub fn columns(&self) -> Vec<ColumnRef> {
        self.ranked_columns
            .iter()
            .map(|s| s.column.clone())
            .collect()
    }

    /// The first `k` ranked columns, as if retrieved with a smaller `k`.
    pub fn truncated(&self, k: usize) -> Self
    where
        T: Clone,
    {
        Self {
            question_id: self.question_id.clone(),
            ranked_columns: self.ranked_columns.iter().take(k).cloned().collect(),
            k,
        }
    }
}

pub fn retrieve_columns<T: Scalar>(
    q: &QuestionRecord,
    index: &SchemaIndex<T>,
    provider: &dyn EmbeddingProvider,
    head: Option<&ProjectionHead<T>>,
    k: usize,
) -> Result<RetrievalResult<T>> {
    if index.db_id() != q.db_id {
        return Err(Error::Validation(format!(
            "question {} targets database {}, index is for {}",
            q.question_id,
            q.db_id,
            index.db_id()
        )));
    }
    let expected = index_fingerprint(provider, head);
    if expected != index.fingerprint() {
        log::warn!(
            "index for {} was built with {}, retrieving with {}",
            index.db_id(),
            index.fingerprint(),
            expected
        );
    }
    let text = crate::schema::render_query_text(q)?;
    let mut v = embed_one::<T>(provider, &text)?;
    if let Some(h) = head {
        v = h.apply(&v)?;
    }
    Ok(RetrievalResult {
        question_id: q.question_id.clone(),
        ranked_columns: index.top_k(&v, k)?,
        k,
    })
}

/// Columns read by `sql`, in schema order, as reported by SQLite's
/// authorizer while the statement is compiled. Aliases, `*` expansion and
/// subqueries are resolved by the engine itself.
pub fn extract_gold_columns(
    db: &DatabaseHandle,
    schema: &DatabaseSchema,
    sql: &str,
) -> Result<Vec<ColumnRef>> {
    let conn = db.open_read_only()?;
    let reads: Arc<Mutex<Vec<(String, String)>>> = Arc::default();
    let sink = reads.clone();
    conn.authorizer(Some(move |ctx: AuthContext<'_>| {
        match ctx.action {
            AuthAction::Read {
                table_name,
                column_name,
            } => sink.lock().expect("read log").push((
                table_name.to_ascii_lowercase(),
                column_name.to_ascii_lowercase(),
            )),
            AuthAction::Attach { .. } | AuthAction::Detach { .. } => return Authorization::Deny,
            _ => {}
        }
        Authorization::Allow
    }));
    conn.prepare(sql)
        .map_err(|e| Error::Validation(format!("gold SQL does not compile: {e}")))?;
    let lookup = column_lookup(schema);
    let positions: BTreeSet<usize> = reads
        .lock()
        .expect("read log")
        .iter()
        .filter_map(|key| lookup.get(key).copied())
        .collect();
    Ok(positions
        .into_iter()
        .map(|i| schema.columns[i].column_ref())
        .collect())
}

/// Gold columns for every question with gold SQL. Entries in `overrides`
/// replace extraction; questions yielding no columns are left out with a
/// warning.
pub fn resolve_gold_columns(
    questions: &[QuestionRecord],
    schemas: &BTreeMap<String, DatabaseSchema>,
    dbs: &BTreeMap<String, DatabaseHandle>,
    overrides: &BTreeMap<String, Vec<ColumnRef>>,
) -> BTreeMap<String, Vec<ColumnRef>> {
    let mut out = BTreeMap::new();
    for q in questions {
        if let Some(cols) = overrides.get(&q.question_id) {
            out.insert(q.question_id.clone(), cols.clone());
            continue;
        }
        let (Some(sql), Some(schema), Some(db)) =
            (&q.gold_sql, schemas.get(&q.db_id), dbs.get(&q.db_id))
        else {
            continue;
        };
        match extract_gold_columns(db, schema, sql) {
            Ok(cols) if !cols.is_empty() => {
                out.insert(q.question_id.clone(), cols);
            }
            Ok(_) => log::warn!("question {}: gold SQL reads no columns", q.question_id),
            Err(e) => log::warn!("question {}: {e}", q.question_id),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionLinking {
    pub question_id: String,
    pub gold: usize,
    pub retrieved: usize,
    pub hits: usize,
    pub complete: bool,
}

impl QuestionLinking {
    pub fn tpr(&self) -> f64 {
        self.hits as f64 / self.gold as f64
    }

    pub fn fpr(&self) -> f64 {
        if self.retrieved == 0 {
            0.0
        } else {
            (self.retrieved - self.hits) as f64 / self.retrieved as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    /// Pooled over all (question, column) pairs.
    pub tpr: f64,
    pub fpr: f64,
    pub slr: f64,
    pub macro_tpr: f64,
    pub macro_fpr: f64,
    pub per_question: Vec<QuestionLinking>,
}

impl RetrievalMetrics {
    pub fn from_breakdown(per_question: Vec<QuestionLinking>) -> Self {
        let n = per_question.len().max(1) as f64;
        let gold: usize = per_question.iter().map(|p| p.gold).sum();
        let retrieved: usize = per_question.iter().map(|p| p.retrieved).sum();
        let hits: usize = per_question.iter().map(|p| p.hits).sum();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            tpr: ratio(hits, gold),
            fpr: ratio(retrieved - hits, retrieved),
            slr: per_question.iter().filter(|p| p.complete).count() as f64 / n,
            macro_tpr: per_question.iter().map(QuestionLinking::tpr).sum::<f64>() / n,
            macro_fpr: per_question.iter().map(QuestionLinking::fpr).sum::<f64>() / n,
            per_question,
        }
    }
}

fn column_key(c: &ColumnRef) -> (String, String) {
    (c.table.to_ascii_lowercase(), c.column.to_ascii_lowercase())
}

pub fn linking_for(
    question_id: &str,
    retrieved: &[ColumnRef],
    gold: &[ColumnRef],
) -> Result<QuestionLinking> {
    let gold: HashSet<_> = gold.iter().map(column_key).collect();
    if gold.is_empty() {
        return Err(Error::Validation(format!(
            "question {question_id} has an empty gold column set"
        )));
    }
    let retrieved: HashSet<_> = retrieved.iter().map(column_key).collect();
    let hits = retrieved.intersection(&gold).count();
    Ok(QuestionLinking {
        question_id: question_id.to_string(),
        gold: gold.len(),
        retrieved: retrieved.len(),
        hits,
        complete: hits == gold.len(),
    })
}

pub fn compute_retrieval_metrics<T>(
    results: &[RetrievalResult<T>],
    gold: &BTreeMap<String, Vec<ColumnRef>>,
) -> Result<RetrievalMetrics> {
    let per_question = results
        .iter()
        .map(|r| {
            let g = gold.get(&r.question_id).ok_or_else(|| {
                Error::Validation(format!("no gold columns for question {}", r.question_id))
            })?;
            linking_for(&r.question_id, &r.columns(), g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalMetrics::from_breakdown(per_question))
}
