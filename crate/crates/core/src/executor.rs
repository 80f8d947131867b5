//! Sandboxed, read-only execution of candidate SQL and result comparison.

use crate::error::{Error, Result};
use crate::schema::DatabaseHandle;
use rayon::prelude::*;
use rusqlite::hooks::{AuthAction, AuthContext, Authorization};
use rusqlite::types::ValueRef;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};
use std::sync::Arc;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionStatus {
    Success,
    Failure,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    SyntaxError,
    NoSuchColumn,
    NoSuchTable,
    Other,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 4] = [
        ErrorCategory::SyntaxError,
        ErrorCategory::NoSuchColumn,
        ErrorCategory::NoSuchTable,
        ErrorCategory::Other,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCategory::SyntaxError => "syntax_error",
            ErrorCategory::NoSuchColumn => "no_such_column",
            ErrorCategory::NoSuchTable => "no_such_table",
            ErrorCategory::Other => "other",
        }
    }
}

/// Maps an engine message onto the four-way error taxonomy. Column and
/// table rules win over the syntax rule.
pub fn classify_error(message: &str) -> ErrorCategory {
    let m = message.to_lowercase();
    if m.contains("no such column") {
        ErrorCategory::NoSuchColumn
    } else if m.contains("no such table") {
        ErrorCategory::NoSuchTable
    } else if m.contains("syntax error") {
        ErrorCategory::SyntaxError
    } else {
        ErrorCategory::Other
    }
}

/// One result cell. Integral reals are folded into integers on construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Cell {
    pub fn canonical(self) -> Cell {
        match self {
            Cell::Real(r) if r.fract() == 0.0 && r.abs() < 9.0e15 => Cell::Integer(r as i64),
            other => other,
        }
    }

    fn from_sql(v: ValueRef<'_>) -> Cell {
        match v {
            ValueRef::Null => Cell::Null,
            ValueRef::Integer(i) => Cell::Integer(i),
            ValueRef::Real(r) => Cell::Real(r),
            ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
        }
        .canonical()
    }

    fn rank(&self) -> u8 {
        match self {
            Cell::Null => 0,
            Cell::Integer(_) | Cell::Real(_) => 1,
            Cell::Text(_) => 2,
            Cell::Blob(_) => 3,
        }
    }

    fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Integer(i) => Some(*i as f64),
            Cell::Real(r) => Some(*r),
            _ => None,
        }
    }

    /// Total order used for sorting rows.
    fn total_cmp(&self, other: &Cell) -> Ordering {
        match (self, other) {
            (Cell::Integer(a), Cell::Integer(b)) => a.cmp(b),
            (Cell::Text(a), Cell::Text(b)) => a.cmp(b),
            (Cell::Blob(a), Cell::Blob(b)) => a.cmp(b),
            _ => match (self.as_f64(), other.as_f64()) {
                (Some(a), Some(b)) => a.total_cmp(&b),
                _ => self.rank().cmp(&other.rank()),
            },
        }
    }

    fn approx_eq(&self, other: &Cell, tol: f64) -> bool {
        match (self.as_f64(), other.as_f64()) {
            (Some(a), Some(b)) => (a - b).abs() <= tol,
            _ => self == other,
        }
    }
}

impl PartialEq for Cell {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Cell::Null, Cell::Null) => true,
            (Cell::Integer(a), Cell::Integer(b)) => a == b,
            (Cell::Real(a), Cell::Real(b)) => a.to_bits() == b.to_bits(),
            (Cell::Text(a), Cell::Text(b)) => a == b,
            (Cell::Blob(a), Cell::Blob(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Cell {}

impl Hash for Cell {
    fn hash<H: Hasher>(&self, state: &mut H) {
        std::mem::discriminant(self).hash(state);
        match self {
            Cell::Null => {}
            Cell::Integer(i) => i.hash(state),
            Cell::Real(r) => r.to_bits().hash(state),
            Cell::Text(t) => t.hash(state),
            Cell::Blob(b) => b.hash(state),
        }
    }
}

pub type Row = Vec<Cell>;

/// Result rows with canonicalized cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultSet {
    pub rows: Vec<Row>,
}

impl ResultSet {
    pub fn new(rows: Vec<Row>) -> Self {
        Self {
            rows: rows
                .into_iter()
                .map(|r| r.into_iter().map(Cell::canonical).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonOptions {
    /// Compare distinct rows only.
    pub set_semantics: bool,
    /// Absolute tolerance for numeric cells; exact when absent.
    pub float_tol: Option<f64>,
}

/// Order-insensitive multiset comparison; column order within a row matters.
pub fn results_match(a: &ResultSet, b: &ResultSet) -> bool {
    results_match_with(a, b, ComparisonOptions::default())
}

pub fn results_match_with(a: &ResultSet, b: &ResultSet, opts: ComparisonOptions) -> bool {
    if let Some(tol) = opts.float_tol {
        let (ra, rb) = (
            sorted_rows(a, opts.set_semantics),
            sorted_rows(b, opts.set_semantics),
        );
        return ra.len() == rb.len()
            && ra.iter().zip(&rb).all(|(x, y)| {
                x.len() == y.len() && x.iter().zip(y.iter()).all(|(c, d)| c.approx_eq(d, tol))
            });
    }
    if !opts.set_semantics && a.rows.len() != b.rows.len() {
        return false;
    }
    row_counts(a, opts.set_semantics) == row_counts(b, opts.set_semantics)
}

fn sorted_rows(rs: &ResultSet, dedup: bool) -> Vec<&Row> {
    let mut rows: Vec<&Row> = rs.rows.iter().collect();
    rows.sort_by(|x, y| cmp_rows(x, y));
    if dedup {
        rows.dedup_by(|x, y| cmp_rows(x, y) == Ordering::Equal);
    }
    rows
}

fn row_counts(rs: &ResultSet, dedup: bool) -> HashMap<&Row, usize> {
    let mut m: HashMap<&Row, usize> = HashMap::new();
    for r in &rs.rows {
        *m.entry(r).or_default() += 1;
    }
    if dedup {
        m.values_mut().for_each(|v| *v = 1);
    }
    m
}

fn cmp_rows(a: &Row, b: &Row) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub status: ExecutionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Row>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_category: Option<ErrorCategory>,
    pub elapsed_ms: f64,
}

impl ExecutionOutcome {
    pub fn is_success(&self) -> bool {
        self.status == ExecutionStatus::Success
    }

    pub fn failure(message: impl Into<String>, elapsed: Duration) -> Self {
        let message = message.into();
        Self {
            status: ExecutionStatus::Failure,
            columns: None,
            rows: None,
            error_category: Some(classify_error(&message)),
            error_message: Some(message),
            elapsed_ms: elapsed.as_secs_f64() * 1e3,
        }
    }

    fn timeout(limit: Duration, elapsed: Duration) -> Self {
        Self {
            status: ExecutionStatus::Timeout,
            columns: None,
            rows: None,
            error_message: Some(format!(
                "query exceeded the {:.3}s time limit",
                limit.as_secs_f64()
            )),
            error_category: Some(ErrorCategory::Other),
            elapsed_ms: elapsed.as_secs_f64() * 1e3,
        }
    }

    pub fn result_set(&self) -> Option<ResultSet> {
        self.rows.as_ref().map(|r| ResultSet::new(r.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecutionLimits {
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    /// Result sets longer than this fail with category `other`.
    pub max_rows: usize,
}

impl Default for ExecutionLimits {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            max_rows: 1_000_000,
        }
    }
}

impl ExecutionLimits {
    pub fn with_timeout(timeout: Duration) -> Self {
        Self {
            timeout,
            ..Self::default()
        }
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

fn sandbox_authorizer(ctx: AuthContext<'_>) -> Authorization {
    match ctx.action {
        AuthAction::Attach { .. } | AuthAction::Detach { .. } => Authorization::Deny,
        _ => Authorization::Allow,
    }
}

/// Runs one statement against a fresh read-only connection. Every failure,
/// including an unreadable database, is reported in the outcome.
pub fn execute_sql(db: &DatabaseHandle, sql: &str, limits: &ExecutionLimits) -> ExecutionOutcome {
    let start = Instant::now();
    let sql = sql.trim();
    if sql.is_empty() {
        return ExecutionOutcome::failure("empty SQL statement", start.elapsed());
    }
    let conn = match db.open_read_only() {
        Ok(c) => c,
        Err(e) => return ExecutionOutcome::failure(e.to_string(), start.elapsed()),
    };
    conn.authorizer(Some(sandbox_authorizer));
    let deadline = start + limits.timeout;
    let timed_out = Arc::new(AtomicBool::new(false));
    let flag = timed_out.clone();
    conn.progress_handler(
        1_000,
        Some(move || {
            if Instant::now() >= deadline {
                flag.store(true, AtomicOrdering::Relaxed);
                true
            } else {
                false
            }
        }),
    );

    let run = || -> std::result::Result<(Vec<String>, Vec<Row>), String> {
        let mut stmt = conn.prepare(sql).map_err(|e| e.to_string())?;
        if !stmt.readonly() {
            return Err("write statements are not permitted".into());
        }
        let columns: Vec<String> = stmt.column_names().into_iter().map(String::from).collect();
        let n = columns.len();
        let mut rows_out = Vec::new();
        let mut rows = stmt.query([]).map_err(|e| e.to_string())?;
        while let Some(row) = rows.next().map_err(|e| e.to_string())? {
            if rows_out.len() >= limits.max_rows {
                return Err(format!("result exceeds the {} row limit", limits.max_rows));
            }
            let mut r = Vec::with_capacity(n);
            for i in 0..n {
                r.push(Cell::from_sql(row.get_ref(i).map_err(|e| e.to_string())?));
            }
            rows_out.push(r);
            if Instant::now() >= deadline {
                timed_out.store(true, AtomicOrdering::Relaxed);
                return Err("interrupted".into());
            }
        }
        Ok((columns, rows_out))
    };
    let result = run();
    let elapsed = start.elapsed();
    if timed_out.load(AtomicOrdering::Relaxed) {
        return ExecutionOutcome::timeout(limits.timeout, elapsed);
    }
    match result {
        Ok((columns, rows)) => ExecutionOutcome {
            status: ExecutionStatus::Success,
            columns: Some(columns),
            rows: Some(rows),
            error_message: None,
            error_category: None,
            elapsed_ms: elapsed.as_secs_f64() * 1e3,
        },
        Err(msg) => ExecutionOutcome::failure(msg, elapsed),
    }
}

/// Per-question EX bits plus the aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionAccuracy {
    pub ex: f64,
    pub correct: usize,
    pub total: usize,
    pub per_question: BTreeMap<String, bool>,
    /// Questions whose gold SQL failed to execute; excluded from EX.
    pub excluded: Vec<String>,
}

/// `1` iff `pred` executes and its result matches the gold result.
pub fn prediction_correct(
    db: &DatabaseHandle,
    pred: &str,
    gold: &ResultSet,
    limits: &ExecutionLimits,
    opts: ComparisonOptions,
) -> bool {
    let out = execute_sql(db, pred, limits);
    out.result_set()
        .is_some_and(|rs| results_match_with(&rs, gold, opts))
}

/// Fraction of questions whose predicted SQL reproduces the gold result set.
pub fn execution_accuracy(
    preds: &BTreeMap<String, String>,
    golds: &BTreeMap<String, String>,
    dbs: &BTreeMap<String, DatabaseHandle>,
    limits: &ExecutionLimits,
    opts: ComparisonOptions,
) -> Result<ExecutionAccuracy> {
    if preds.len() != golds.len() || preds.keys().any(|k| !golds.contains_key(k)) {
        let missing: Vec<&String> = golds
            .keys()
            .filter(|k| !preds.contains_key(*k))
            .chain(preds.keys().filter(|k| !golds.contains_key(*k)))
            .collect();
        return Err(Error::Validation(format!(
            "prediction and gold ids differ: {}",
            missing
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    let results: Vec<(String, Option<bool>)> = golds
        .par_iter()
        .map(|(id, gold_sql)| {
            let Some(db) = dbs.get(id) else {
                return Err(Error::Validation(format!("no database for question {id}")));
            };
            let gold = execute_sql(db, gold_sql, limits);
            let Some(gold_rs) = gold.result_set() else {
                log::warn!(
                    "gold SQL for {id} failed ({}), excluded",
                    gold.error_message.unwrap_or_default()
                );
                return Ok((id.clone(), None));
            };
            Ok((
                id.clone(),
                Some(prediction_correct(db, &preds[id], &gold_rs, limits, opts)),
            ))
        })
        .collect::<Result<_>>()?;
    let mut per_question = BTreeMap::new();
    let mut excluded = Vec::new();
    for (id, bit) in results {
        match bit {
            Some(b) => {
                per_question.insert(id, b);
            }
            None => excluded.push(id),
        }
    }
    let correct = per_question.values().filter(|&&b| b).count();
    let total = per_question.len();
    Ok(ExecutionAccuracy {
        ex: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        correct,
        total,
        per_question,
        excluded,
    })
}
