//! Corpus-level reports, ablations, and retrieval sweeps.

use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::executor::{execute_sql, ComparisonOptions, ErrorCategory, ExecutionLimits, ResultSet};
use crate::generator::SqlGenerator;
use crate::hnsupcon::ProjectionHead;
use crate::index::build_index;
use crate::orchestrator::{
    attempt_correct, failure_category, gold_results, gold_results_for, run_batch, Attempt, Catalog,
    InferenceTrace, Pipeline, PipelineOptions,
};
use crate::retriever::{
    compute_retrieval_metrics, retrieve_columns, RetrievalMetrics, RetrievalResult,
};
use crate::scalar::Scalar;
use crate::schema::{ColumnRef, DatabaseHandle, DatabaseSchema, QuestionRecord};
use crate::train::{build_training_examples, train_projection, TrainerConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketAccuracy {
    pub ex: f64,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub before: usize,
    pub after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub questions: usize,
    pub ex_overall: f64,
    pub correct: usize,
    pub graded: usize,
    pub ex_by_difficulty: BTreeMap<String, BucketAccuracy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_metrics: Option<RetrievalMetrics>,
    pub error_distribution: BTreeMap<ErrorCategory, ErrorCounts>,
    /// EX when allowing `b` corrections, for `b = 0..=max_iterations`.
    pub iteration_gains: Vec<f64>,
    pub per_question: BTreeMap<String, bool>,
    /// Questions without usable gold results.
    pub excluded: Vec<String>,
}

/// Builds a report from a trace archive. `golds` holds the gold result set of
/// each question (`None` excludes it); `gold_columns`, when given, adds
/// retrieval metrics over traces whose question has gold columns.
pub fn evaluate_traces(
    traces: &[InferenceTrace],
    corpus: &[QuestionRecord],
    golds: &BTreeMap<String, Option<ResultSet>>,
    gold_columns: Option<&BTreeMap<String, Vec<ColumnRef>>>,
    max_iterations: usize,
    opts: ComparisonOptions,
) -> Result<EvaluationReport> {
    let by_id: BTreeMap<&str, &QuestionRecord> =
        corpus.iter().map(|q| (q.question_id.as_str(), q)).collect();
    let unknown: Vec<&str> = traces
        .iter()
        .map(|t| t.question_id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Validation(format!(
            "traces for unknown questions: {}",
            unknown.join(", ")
        )));
    }
    let mut per_question = BTreeMap::new();
    let mut excluded = Vec::new();
    let mut buckets: BTreeMap<String, BucketAccuracy> = BTreeMap::new();
    let mut gains = vec![0usize; max_iterations + 1];
    let mut error_distribution: BTreeMap<ErrorCategory, ErrorCounts> = ErrorCategory::ALL
        .iter()
        .map(|&c| (c, ErrorCounts::default()))
        .collect();
    for t in traces {
        if let Some(c) = failure_category(t.first()) {
            error_distribution.entry(c).or_default().before += 1;
        }
        if let Some(c) = failure_category(t.last()) {
            error_distribution.entry(c).or_default().after += 1;
        }
        let Some(Some(gold)) = golds.get(&t.question_id) else {
            excluded.push(t.question_id.clone());
            continue;
        };
        let ok = attempt_correct(t.last(), gold, opts);
        per_question.insert(t.question_id.clone(), ok);
        let label = by_id[t.question_id.as_str()]
            .difficulty
            .map_or("unlabeled", |d| d.as_str())
            .to_string();
        let b = buckets.entry(label).or_default();
        b.total += 1;
        b.correct += ok as usize;
        for (budget, g) in gains.iter_mut().enumerate() {
            *g += attempt_correct(t.attempt_at_budget(budget), gold, opts) as usize;
        }
    }
    for b in buckets.values_mut() {
        b.ex = b.correct as f64 / b.total as f64;
    }
    let graded = per_question.len();
    let correct = per_question.values().filter(|&&b| b).count();
    let ratio = |n: usize| {
        if graded == 0 {
            0.0
        } else {
            n as f64 / graded as f64
        }
    };
    let retrieval_metrics = match gold_columns {
        Some(gc) => {
            let results: Vec<RetrievalResult<f64>> = traces
                .iter()
                .filter(|t| gc.get(&t.question_id).is_some_and(|g| !g.is_empty()))
                .map(|t| t.retrieval.clone())
                .collect();
            (!results.is_empty())
                .then(|| compute_retrieval_metrics(&results, gc))
                .transpose()?
        }
        None => None,
    };
    Ok(EvaluationReport {
        questions: traces.len(),
        ex_overall: ratio(correct),
        correct,
        graded,
        ex_by_difficulty: buckets,
        retrieval_metrics,
        error_distribution,
        iteration_gains: gains.into_iter().map(ratio).collect(),
        per_question,
        excluded,
    })
}

/// Report for a plain predictions map (question id → SQL), each treated as a
/// single attempt.
pub fn evaluate_predictions(
    preds: &BTreeMap<String, String>,
    corpus: &[QuestionRecord],
    dbs: &BTreeMap<String, DatabaseHandle>,
    limits: &ExecutionLimits,
    opts: ComparisonOptions,
) -> Result<EvaluationReport> {
    let ids: BTreeSet<&str> = corpus.iter().map(|q| q.question_id.as_str()).collect();
    let pred_ids: BTreeSet<&str> = preds.keys().map(String::as_str).collect();
    if ids != pred_ids {
        let diff: Vec<&str> = ids.symmetric_difference(&pred_ids).copied().collect();
        return Err(Error::Validation(format!(
            "prediction and corpus ids differ: {}",
            diff.join(", ")
        )));
    }
    let traces: Vec<InferenceTrace> = corpus
        .par_iter()
        .map(|q| {
            let sql = preds[&q.question_id].clone();
            let outcome = match dbs.get(&q.db_id) {
                Some(db) => execute_sql(db, &sql, limits),
                None => crate::executor::ExecutionOutcome::failure(
                    format!("unknown database {}", q.db_id),
                    std::time::Duration::ZERO,
                ),
            };
            InferenceTrace {
                question_id: q.question_id.clone(),
                db_id: q.db_id.clone(),
                retrieval: RetrievalResult {
                    question_id: q.question_id.clone(),
                    ranked_columns: vec![],
                    k: 0,
                },
                executable: outcome.is_success(),
                final_sql: sql.clone(),
                iterations_used: 0,
                attempts: vec![Attempt {
                    prompt: String::new(),
                    sql,
                    outcome,
                }],
                generation_error: None,
            }
        })
        .collect();
    let golds = gold_results_for(
        corpus,
        &|db| dbs.get(db),
        limits,
        rayon::current_num_threads(),
    );
    evaluate_traces(&traces, corpus, &golds, None, 0, opts)
}

pub fn render_report(r: &EvaluationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "questions\t{}", r.questions);
    let _ = writeln!(out, "graded\t{}", r.graded);
    let _ = writeln!(out, "ex\t{:.4}\t({}/{})", r.ex_overall, r.correct, r.graded);
    for (label, b) in &r.ex_by_difficulty {
        let _ = writeln!(out, "ex[{label}]\t{:.4}\t({}/{})", b.ex, b.correct, b.total);
    }
    if let Some(m) = &r.retrieval_metrics {
        let _ = writeln!(
            out,
            "tpr\t{:.4}\nfpr\t{:.4}\nslr\t{:.4}",
            m.tpr, m.fpr, m.slr
        );
        let _ = writeln!(
            out,
            "macro_tpr\t{:.4}\nmacro_fpr\t{:.4}",
            m.macro_tpr, m.macro_fpr
        );
    }
    out.push_str(&iteration_series(r));
    out.push_str(&error_series(r));
    out
}

/// `budget<TAB>ex` lines.
pub fn iteration_series(r: &EvaluationReport) -> String {
    let mut out = String::from("budget\tex\n");
    for (b, ex) in r.iteration_gains.iter().enumerate() {
        let _ = writeln!(out, "{b}\t{ex:.4}");
    }
    out
}

/// `category<TAB>before<TAB>after` lines.
pub fn error_series(r: &EvaluationReport) -> String {
    let mut out = String::from("category\tbefore\tafter\n");
    for (c, n) in &r.error_distribution {
        let _ = writeln!(out, "{}\t{}\t{}", c.as_str(), n.before, n.after);
    }
    out
}

pub struct AblationVariant<'a> {
    pub name: String,
    pub generator: Box<dyn Fn() -> Result<Box<dyn SqlGenerator>> + 'a>,
    pub full_schema: bool,
    pub max_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub ex: f64,
    pub executable: usize,
    pub questions: usize,
    pub errors: usize,
}

/// Runs the pipeline once per variant with a fresh generator each time.
pub fn run_ablation<T: Scalar>(
    corpus: &[QuestionRecord],
    catalog: &Catalog<T>,
    provider: &dyn EmbeddingProvider,
    head: Option<&ProjectionHead<T>>,
    base: PipelineOptions,
    variants: &[AblationVariant<'_>],
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|v| {
            let generator = (v.generator)()?;
            let pipeline = Pipeline {
                provider,
                head,
                generator: generator.as_ref(),
                options: PipelineOptions {
                    full_schema: v.full_schema,
                    max_iterations: v.max_iterations,
                    ..base
                },
            };
            let out = run_batch(corpus, catalog, &pipeline);
            Ok(AblationRow {
                name: v.name.clone(),
                ex: out.summary.ex.unwrap_or(0.0),
                executable: out.summary.executable,
                questions: out.summary.questions,
                errors: out.errors.len(),
            })
        })
        .collect()
}

/// Retrieves every question with gold columns against an index built with
/// `head`, returning the results and the linking metrics.
pub fn measure_retrieval<T: Scalar>(
    questions: &[QuestionRecord],
    schemas: &BTreeMap<String, DatabaseSchema>,
    gold: &BTreeMap<String, Vec<ColumnRef>>,
    provider: &dyn EmbeddingProvider,
    head: Option<&ProjectionHead<T>>,
    k: usize,
) -> Result<(Vec<RetrievalResult<T>>, RetrievalMetrics)> {
    let wanted: Vec<&QuestionRecord> = questions
        .iter()
        .filter(|q| gold.contains_key(&q.question_id))
        .collect();
    let dbs: BTreeSet<&str> = wanted.iter().map(|q| q.db_id.as_str()).collect();
    let indexes = dbs
        .into_par_iter()
        .map(|db| {
            let schema = schemas
                .get(db)
                .ok_or_else(|| Error::Validation(format!("no schema for database {db}")))?;
            Ok((db, build_index(schema, provider, head)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let results = wanted
        .par_iter()
        .map(|q| retrieve_columns(q, &indexes[q.db_id.as_str()], provider, head, k))
        .collect::<Result<Vec<_>>>()?;
    let metrics = compute_retrieval_metrics(&results, gold)?;
    Ok((results, metrics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub tpr: f64,
    pub fpr: f64,
    pub slr: f64,
}

impl SweepRow {
    fn new(setting: impl Into<String>, m: &RetrievalMetrics) -> Self {
        Self {
            setting: setting.into(),
            tpr: m.tpr,
            fpr: m.fpr,
            slr: m.slr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub parameter: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn render(&self) -> String {
        let mut out = format!("{}\ttpr\tfpr\tslr\n", self.parameter);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{:.4}\t{:.4}\t{:.4}",
                r.setting, r.tpr, r.fpr, r.slr
            );
        }
        out
    }
}

pub const SWEEP_KS: [usize; 4] = [10, 15, 20, 25];
pub const SWEEP_MARGINS: [f64; 3] = [0.0, 0.1, 0.2];
pub const SWEEP_NEGATIVES: [usize; 6] = [3, 4, 5, 6, 7, 8];

/// Metrics for each `k`, from rankings retrieved at the largest `k`.
pub fn k_sweep<T: Clone>(
    results: &[RetrievalResult<T>],
    gold: &BTreeMap<String, Vec<ColumnRef>>,
    ks: &[usize],
) -> Result<SweepTable> {
    let rows = ks
        .iter()
        .map(|&k| {
            let cut: Vec<_> = results.iter().map(|r| r.truncated(k)).collect();
            Ok(SweepRow::new(
                k.to_string(),
                &compute_retrieval_metrics(&cut, gold)?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(SweepTable {
        parameter: "k".into(),
        rows,
    })
}

/// `(train, held_out)`: every question whose position mod 10 is 7, 8 or 9
/// is held out.
pub fn held_out_split(questions: &[QuestionRecord]) -> (Vec<QuestionRecord>, Vec<QuestionRecord>) {
    let (test, train): (Vec<_>, Vec<_>) =
        questions.iter().enumerate().partition(|(i, _)| i % 10 >= 7);
    let strip = |v: Vec<(usize, &QuestionRecord)>| v.into_iter().map(|(_, q)| q.clone()).collect();
    (strip(train), strip(test))
}

/// Seeded per-database sample: `ceil(fraction · n)` questions of each
/// database (at least one), kept in corpus order.
pub fn subsample_per_database(
    questions: &[QuestionRecord],
    fraction: f64,
    seed: u64,
) -> Result<Vec<QuestionRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!(
            "subsample fraction must be in (0, 1], got {fraction}"
        )));
    }
    let mut by_db: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, q) in questions.iter().enumerate() {
        by_db.entry(q.db_id.as_str()).or_default().push(i);
    }
    let mut keep = BTreeSet::new();
    for (db, mut idx) in by_db {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::embedding::fnv1a(db.as_bytes()));
        idx.shuffle(&mut rng);
        let n = ((fraction * idx.len() as f64).ceil() as usize).max(1);
        keep.extend(idx.into_iter().take(n));
    }
    Ok(keep.into_iter().map(|i| questions[i].clone()).collect())
}

/// Train/evaluate split plus everything a sweep needs.
pub struct SweepData<'a> {
    pub train: &'a [QuestionRecord],
    pub eval: &'a [QuestionRecord],
    pub schemas: &'a BTreeMap<String, DatabaseSchema>,
    pub gold: &'a BTreeMap<String, Vec<ColumnRef>>,
    pub provider: &'a dyn EmbeddingProvider,
    pub k: usize,
}

impl SweepData<'_> {
    /// Trains a head with `cfg` and measures held-out retrieval with it.
    pub fn train_and_measure(
        &self,
        cfg: &TrainerConfig,
    ) -> Result<(ProjectionHead<f64>, RetrievalMetrics)> {
        let examples = build_training_examples(
            self.train,
            self.schemas,
            self.gold,
            self.provider,
            cfg.negatives,
        )?;
        let head = train_projection::<f64>(&examples, self.provider, cfg)?.head;
        let (_, m) = measure_retrieval(
            self.eval,
            self.schemas,
            self.gold,
            self.provider,
            Some(&head),
            self.k,
        )?;
        Ok((head, m))
    }

    pub fn margin_sweep(&self, base: &TrainerConfig, margins: &[f64]) -> Result<SweepTable> {
        let rows = margins
            .iter()
            .map(|&margin| {
                let (_, m) = self.train_and_measure(&TrainerConfig { margin, ..*base })?;
                Ok(SweepRow::new(format!("{margin}"), &m))
            })
            .collect::<Result<_>>()?;
        Ok(SweepTable {
            parameter: "margin".into(),
            rows,
        })
    }

    pub fn negatives_sweep(&self, base: &TrainerConfig, limits: &[usize]) -> Result<SweepTable> {
        let rows = limits
            .iter()
            .map(|&negatives| {
                let (_, m) = self.train_and_measure(&TrainerConfig { negatives, ..*base })?;
                Ok(SweepRow::new(negatives.to_string(), &m))
            })
            .collect::<Result<_>>()?;
        Ok(SweepTable {
            parameter: "negatives".into(),
            rows,
        })
    }

    /// k sweep over held-out questions with `head`.
    pub fn k_sweep(&self, head: Option<&ProjectionHead<f64>>, ks: &[usize]) -> Result<SweepTable> {
        let max_k = ks.iter().copied().max().unwrap_or(self.k);
        let (results, _) = measure_retrieval(
            self.eval,
            self.schemas,
            self.gold,
            self.provider,
            head,
            max_k,
        )?;
        k_sweep(&results, self.gold, ks)
    }
}

/// EX of the final answers at every budget, computed by running the pipeline
/// separately for each `max_iterations` in `0..=max`; `make_generator` must
/// return a fresh deterministic generator per run.
pub fn ex_by_budget<T: Scalar>(
    corpus: &[QuestionRecord],
    catalog: &Catalog<T>,
    provider: &dyn EmbeddingProvider,
    head: Option<&ProjectionHead<T>>,
    base: PipelineOptions,
    max: usize,
    make_generator: &dyn Fn() -> Result<Box<dyn SqlGenerator>>,
) -> Result<Vec<f64>> {
    let golds = gold_results(corpus, catalog, &base.limits, base.parallelism);
    (0..=max)
        .map(|m| {
            let generator = make_generator()?;
            let pipeline = Pipeline {
                provider,
                head,
                generator: generator.as_ref(),
                options: PipelineOptions {
                    max_iterations: m,
                    ..base
                },
            };
            let out = run_batch(corpus, catalog, &pipeline);
            let report = evaluate_traces(
                &out.traces,
                corpus,
                &golds,
                None,
                m,
                ComparisonOptions::default(),
            )?;
            Ok(report.ex_overall)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashingEmbedder;
    use crate::executor::{Cell, ExecutionOutcome, ExecutionStatus};
    use crate::generator::KeyedScriptedGenerator;
    use crate::index::ScoredColumn;
    use crate::orchestrator::DatabaseBundle;
    use crate::schema::Difficulty;
    use std::time::Duration;

    fn success(v: i64) -> ExecutionOutcome {
        ExecutionOutcome {
            status: ExecutionStatus::Success,
            columns: Some(vec!["x".into()]),
            rows: Some(vec![vec![Cell::Integer(v)]]),
            error_message: None,
            error_category: None,
            elapsed_ms: 0.0,
        }
    }

    fn trace(id: &str, outcomes: Vec<ExecutionOutcome>) -> InferenceTrace {
        let attempts: Vec<Attempt> = outcomes
            .into_iter()
            .map(|o| Attempt {
                prompt: "p".into(),
                sql: "s".into(),
                outcome: o,
            })
            .collect();
        InferenceTrace {
            question_id: id.into(),
            db_id: "d".into(),
            retrieval: RetrievalResult {
                question_id: id.into(),
                ranked_columns: vec![ScoredColumn {
                    column: ColumnRef::new("d", "t", "a"),
                    score: 1.0,
                }],
                k: 1,
            },
            final_sql: "s".into(),
            executable: attempts.last().unwrap().outcome.is_success(),
            iterations_used: attempts.len() - 1,
            attempts,
            generation_error: None,
        }
    }

    fn fail(msg: &str) -> ExecutionOutcome {
        ExecutionOutcome::failure(msg, Duration::ZERO)
    }

    /// Ten labeled questions with hand-counted outcomes.
    #[test]
    fn difficulty_buckets_and_gains_match_hand_counts() {
        let labels = [
            Difficulty::Simple,
            Difficulty::Simple,
            Difficulty::Simple,
            Difficulty::Simple,
            Difficulty::Moderate,
            Difficulty::Moderate,
            Difficulty::Moderate,
            Difficulty::Challenging,
            Difficulty::Challenging,
            Difficulty::Challenging,
        ];
        let corpus: Vec<QuestionRecord> = labels
            .iter()
            .enumerate()
            .map(|(i, &d)| QuestionRecord {
                difficulty: Some(d),
                ..QuestionRecord::new(i.to_string(), "d", "q")
            })
            .collect();
        let golds: BTreeMap<String, Option<ResultSet>> = (0..10)
            .map(|i| {
                (
                    i.to_string(),
                    Some(ResultSet::new(vec![vec![Cell::Integer(1)]])),
                )
            })
            .collect();
        let traces = vec![
            trace("0", vec![success(1)]),
            trace("1", vec![success(1)]),
            trace("2", vec![fail("near \"x\": syntax error"), success(1)]),
            trace("3", vec![success(2)]),
            trace("4", vec![success(1)]),
            trace(
                "5",
                vec![
                    fail("no such column: a"),
                    fail("no such column: b"),
                    success(1),
                ],
            ),
            trace(
                "6",
                vec![
                    fail("no such table: t"),
                    fail("no such table: t"),
                    fail("x"),
                    fail("y"),
                ],
            ),
            trace("7", vec![success(1)]),
            trace("8", vec![fail("near \"x\": syntax error"), success(2)]),
            trace(
                "9",
                vec![fail("no such column: q"), fail("near \"(\": syntax error")],
            ),
        ];
        let gc = BTreeMap::from([("0".to_string(), vec![ColumnRef::new("d", "t", "a")])]);
        let r = evaluate_traces(
            &traces,
            &corpus,
            &golds,
            Some(&gc),
            3,
            ComparisonOptions::default(),
        )
        .unwrap();
        assert_eq!((r.correct, r.graded), (6, 10));
        assert_eq!(r.ex_by_difficulty["simple"].correct, 3);
        assert_eq!(r.ex_by_difficulty["simple"].ex, 0.75);
        assert_eq!(r.ex_by_difficulty["moderate"].correct, 2);
        assert_eq!(r.ex_by_difficulty["challenging"].correct, 1);
        assert_eq!(r.iteration_gains, vec![0.4, 0.5, 0.6, 0.6]);
        let before: Vec<usize> = ErrorCategory::ALL
            .iter()
            .map(|c| r.error_distribution[c].before)
            .collect();
        let after: Vec<usize> = ErrorCategory::ALL
            .iter()
            .map(|c| r.error_distribution[c].after)
            .collect();
        assert_eq!(before, [2, 2, 1, 0]);
        assert_eq!(after, [1, 0, 0, 1]);
        assert_eq!(r.retrieval_metrics.as_ref().unwrap().slr, 1.0);
        assert_eq!(render_report(&r), render_report(&r));

        let stray = vec![trace("zz", vec![success(1)])];
        assert!(matches!(
            evaluate_traces(
                &stray,
                &corpus,
                &golds,
                None,
                0,
                ComparisonOptions::default()
            ),
            Err(Error::Validation(_))
        ));
    }

    fn fixture(dir: &std::path::Path) -> (Catalog, HashingEmbedder) {
        let path = dir.join("d.sqlite");
        let conn = rusqlite::Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE t(a INTEGER, b TEXT); INSERT INTO t VALUES (1,'x'),(2,'y');",
        )
        .unwrap();
        let p = HashingEmbedder::new(32);
        let b = DatabaseBundle::open(DatabaseHandle::new("d", path), None, &p, None).unwrap();
        (Catalog::from([("d".to_string(), b)]), p)
    }

    #[test]
    fn predictions_file_report() {
        let dir = tempfile::tempdir().unwrap();
        let (catalog, _) = fixture(dir.path());
        let dbs: BTreeMap<String, DatabaseHandle> = catalog
            .iter()
            .map(|(k, v)| (k.clone(), v.handle.clone()))
            .collect();
        let corpus = vec![
            QuestionRecord::new("1", "d", "a?").with_gold("SELECT a FROM t"),
            QuestionRecord::new("2", "d", "b?").with_gold("SELECT b FROM t"),
        ];
        let preds = BTreeMap::from([
            (
                "1".to_string(),
                "SELECT a FROM t ORDER BY a DESC".to_string(),
            ),
            ("2".to_string(), "SELECT bb FROM t".to_string()),
        ]);
        let r = evaluate_predictions(
            &preds,
            &corpus,
            &dbs,
            &ExecutionLimits::default(),
            ComparisonOptions::default(),
        )
        .unwrap();
        assert_eq!(r.ex_overall, 0.5);
        assert_eq!(r.error_distribution[&ErrorCategory::NoSuchColumn].before, 1);
        let short = BTreeMap::from([("1".to_string(), "SELECT 1".to_string())]);
        assert!(evaluate_predictions(
            &short,
            &corpus,
            &dbs,
            &ExecutionLimits::default(),
            ComparisonOptions::default()
        )
        .is_err());
    }

    #[test]
    fn ablation_and_budget_runs() {
        let dir = tempfile::tempdir().unwrap();
        let (catalog, p) = fixture(dir.path());
        let corpus = vec![
            QuestionRecord::new("1", "d", "qa").with_gold("SELECT a FROM t"),
            QuestionRecord::new("2", "d", "qb").with_gold("SELECT b FROM t"),
        ];
        let scripts = |strong: bool| {
            let second = if strong {
                "SELECT b FROM t"
            } else {
                "SELECT a FROM t"
            };
            BTreeMap::from([
                (
                    "qa".to_string(),
                    vec!["SELEC".to_string(), "SELECT a FROM t".to_string()],
                ),
                ("qb".to_string(), vec![second.to_string()]),
            ])
        };
        let keyed = |strong: bool| -> Box<dyn Fn() -> Result<Box<dyn SqlGenerator>>> {
            Box::new(move || {
                Ok(Box::new(KeyedScriptedGenerator::new(scripts(strong))?)
                    as Box<dyn SqlGenerator>)
            })
        };
        let variants = vec![
            AblationVariant {
                name: "weak".into(),
                generator: keyed(false),
                full_schema: false,
                max_iterations: 3,
            },
            AblationVariant {
                name: "strong".into(),
                generator: keyed(true),
                full_schema: false,
                max_iterations: 3,
            },
            AblationVariant {
                name: "strong-no-correction".into(),
                generator: keyed(true),
                full_schema: false,
                max_iterations: 0,
            },
            AblationVariant {
                name: "strong-full-schema".into(),
                generator: keyed(true),
                full_schema: true,
                max_iterations: 3,
            },
        ];
        let rows = run_ablation(
            &corpus,
            &catalog,
            &p,
            None,
            PipelineOptions::default(),
            &variants,
        )
        .unwrap();
        assert_eq!(rows[0].ex, 0.5);
        assert_eq!(rows[1].ex, 1.0);
        assert_eq!(rows[2].ex, 0.5);
        assert_eq!(rows[3].questions, 2);
        let gains = ex_by_budget(
            &corpus,
            &catalog,
            &p,
            None,
            PipelineOptions::default(),
            2,
            &|| Ok(Box::new(KeyedScriptedGenerator::new(scripts(true))?) as Box<dyn SqlGenerator>),
        )
        .unwrap();
        assert_eq!(gains, vec![0.5, 1.0, 1.0]);
    }

    #[test]
    fn subsample_is_seeded_and_per_database() {
        let qs: Vec<QuestionRecord> = (0..25)
            .map(|i| QuestionRecord::new(format!("q{i}"), if i < 20 { "a" } else { "b" }, "x"))
            .collect();
        let s = subsample_per_database(&qs, 0.1, 9).unwrap();
        assert_eq!(s.iter().filter(|q| q.db_id == "a").count(), 2);
        assert_eq!(s.iter().filter(|q| q.db_id == "b").count(), 1);
        assert_eq!(s, subsample_per_database(&qs, 0.1, 9).unwrap());
        let pos: Vec<usize> = s
            .iter()
            .map(|q| q.question_id[1..].parse().unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(subsample_per_database(&qs, 0.0, 9).is_err());
        assert_eq!(subsample_per_database(&qs, 1.0, 1).unwrap(), qs);
    }
}
