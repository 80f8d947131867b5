//! Retrieve, prompt, generate, execute, and retry with error feedback.

use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::executor::{
    execute_sql, results_match_with, ComparisonOptions, ErrorCategory, ExecutionLimits,
    ExecutionOutcome, ResultSet,
};
use crate::generator::SqlGenerator;
use crate::hnsupcon::ProjectionHead;
use crate::index::{build_index, SchemaIndex, ScoredColumn};
use crate::prompt::{build_rft_prompt, build_sft_prompt, GenerationContext};
use crate::retriever::{retrieve_columns, RetrievalResult, DEFAULT_K};
use crate::scalar::Scalar;
use crate::schema::{
    introspect_schema, DatabaseHandle, DatabaseSchema, DescriptionOverlay, QuestionRecord,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Duration;

pub const DEFAULT_MAX_ITERATIONS: usize = 3;

/// Everything the pipeline needs about one database.
#[derive(Debug, Clone)]
pub struct DatabaseBundle<T = f64> {
    pub handle: DatabaseHandle,
    pub schema: DatabaseSchema,
    pub index: SchemaIndex<T>,
}

impl<T: Scalar> DatabaseBundle<T> {
    pub fn open(
        handle: DatabaseHandle,
        overlay: Option<&DescriptionOverlay>,
        provider: &dyn EmbeddingProvider,
        head: Option<&ProjectionHead<T>>,
    ) -> Result<Self> {
        let schema = introspect_schema(&handle, overlay)?;
        let index = build_index(&schema, provider, head)?;
        Ok(Self {
            handle,
            schema,
            index,
        })
    }
}

pub type Catalog<T = f64> = BTreeMap<String, DatabaseBundle<T>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub k: usize,
    pub max_iterations: usize,
    pub limits: ExecutionLimits,
    /// Put every column of the database in the prompt instead of the top `k`.
    pub full_schema: bool,
    pub parallelism: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            limits: ExecutionLimits::default(),
            full_schema: false,
            parallelism: std::thread::available_parallelism().map_or(4, |n| n.get()),
        }
    }
}

pub struct Pipeline<'a, T = f64> {
    pub provider: &'a dyn EmbeddingProvider,
    pub head: Option<&'a ProjectionHead<T>>,
    pub generator: &'a dyn SqlGenerator,
    pub options: PipelineOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub prompt: String,
    pub sql: String,
    pub outcome: ExecutionOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub question_id: String,
    pub db_id: String,
    pub retrieval: RetrievalResult<f64>,
    pub attempts: Vec<Attempt>,
    pub final_sql: String,
    pub executable: bool,
    pub iterations_used: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_error: Option<String>,
}

impl InferenceTrace {
    /// The attempt that would have been final with `budget` corrections.
    pub fn attempt_at_budget(&self, budget: usize) -> &Attempt {
        &self.attempts[budget.min(self.attempts.len() - 1)]
    }

    pub fn first(&self) -> &Attempt {
        &self.attempts[0]
    }

    pub fn last(&self) -> &Attempt {
        self.attempts
            .last()
            .expect("traces have at least one attempt")
    }
}

fn to_f64<T: Scalar>(r: RetrievalResult<T>) -> RetrievalResult<f64> {
    RetrievalResult {
        question_id: r.question_id,
        ranked_columns: r
            .ranked_columns
            .into_iter()
            .map(|s| ScoredColumn {
                column: s.column,
                score: s.score.as_f64(),
            })
            .collect(),
        k: r.k,
    }
}

pub fn answer_question<T: Scalar>(
    q: &QuestionRecord,
    bundle: &DatabaseBundle<T>,
    pipeline: &Pipeline<'_, T>,
) -> Result<InferenceTrace> {
    if q.db_id != bundle.schema.db_id {
        return Err(Error::Validation(format!(
            "question {} targets {}, got database {}",
            q.question_id, q.db_id, bundle.schema.db_id
        )));
    }
    let opts = &pipeline.options;
    let k = if opts.full_schema {
        bundle.schema.columns.len()
    } else {
        opts.k
    };
    let retrieval = retrieve_columns(q, &bundle.index, pipeline.provider, pipeline.head, k)?;
    let ctx = GenerationContext::from_retrieval(q, &bundle.schema, &retrieval, k);
    let mut attempts: Vec<Attempt> = Vec::new();
    let mut generation_error = None;
    for _ in 0..=opts.max_iterations {
        let prompt = match attempts.last() {
            None => build_sft_prompt(&ctx)?,
            Some(prev) => build_rft_prompt(&ctx.clone().with_feedback(
                &prev.sql,
                prev.outcome.error_message.clone().unwrap_or_default(),
            ))?,
        };
        let sql = match pipeline.generator.generate(&prompt) {
            Ok(sql) => sql,
            Err(e) => {
                let message = format!("generation failed: {e}");
                attempts.push(Attempt {
                    prompt,
                    sql: String::new(),
                    outcome: ExecutionOutcome::failure(&message, Duration::ZERO),
                });
                generation_error = Some(message);
                break;
            }
        };
        let outcome = execute_sql(&bundle.handle, &sql, &opts.limits);
        let done = outcome.is_success();
        attempts.push(Attempt {
            prompt,
            sql,
            outcome,
        });
        if done {
            break;
        }
    }
    let last = attempts.last().expect("at least one attempt");
    Ok(InferenceTrace {
        question_id: q.question_id.clone(),
        db_id: q.db_id.clone(),
        retrieval: to_f64(retrieval),
        final_sql: last.sql.clone(),
        executable: last.outcome.is_success(),
        iterations_used: attempts.len() - 1,
        attempts,
        generation_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionError {
    pub question_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub questions: usize,
    pub executable: usize,
    /// Present when at least one question has usable gold SQL.
    pub ex: Option<f64>,
    pub correct: usize,
    pub graded: usize,
    /// Corrections used → number of questions.
    pub iteration_histogram: BTreeMap<usize, usize>,
    /// Failure categories of first attempts.
    pub errors_before: BTreeMap<ErrorCategory, usize>,
    /// Failure categories of final attempts.
    pub errors_after: BTreeMap<ErrorCategory, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub traces: Vec<InferenceTrace>,
    pub errors: Vec<QuestionError>,
    pub summary: BatchSummary,
}

pub(crate) fn with_pool<R: Send>(parallelism: usize, f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
    {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

pub fn run_batch<T: Scalar>(
    corpus: &[QuestionRecord],
    catalog: &Catalog<T>,
    pipeline: &Pipeline<'_, T>,
) -> BatchResult {
    let results: Vec<std::result::Result<InferenceTrace, QuestionError>> =
        with_pool(pipeline.options.parallelism, || {
            corpus
                .par_iter()
                .map(|q| {
                    let bundle = catalog
                        .get(&q.db_id)
                        .ok_or_else(|| Error::Validation(format!("unknown database {}", q.db_id)));
                    bundle
                        .and_then(|b| answer_question(q, b, pipeline))
                        .map_err(|e| QuestionError {
                            question_id: q.question_id.clone(),
                            message: e.to_string(),
                        })
                })
                .collect()
        });
    let mut traces = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(t) => traces.push(t),
            Err(e) => {
                log::warn!("question {}: {}", e.question_id, e.message);
                errors.push(e);
            }
        }
    }
    let golds = gold_results(
        corpus,
        catalog,
        &pipeline.options.limits,
        pipeline.options.parallelism,
    );
    let summary = summarize(&traces, &golds, ComparisonOptions::default());
    BatchResult {
        traces,
        errors,
        summary,
    }
}

/// Gold result sets by question id; `None` when the gold SQL is absent or
/// fails (such questions are not graded).
pub fn gold_results<T: Sync>(
    corpus: &[QuestionRecord],
    catalog: &Catalog<T>,
    limits: &ExecutionLimits,
    parallelism: usize,
) -> BTreeMap<String, Option<ResultSet>> {
    gold_results_for(
        corpus,
        &|db_id| catalog.get(db_id).map(|b| &b.handle),
        limits,
        parallelism,
    )
}

pub(crate) fn gold_results_for<'a>(
    corpus: &[QuestionRecord],
    handle: &(dyn Fn(&str) -> Option<&'a DatabaseHandle> + Sync),
    limits: &ExecutionLimits,
    parallelism: usize,
) -> BTreeMap<String, Option<ResultSet>> {
    with_pool(parallelism, || {
        corpus
            .par_iter()
            .map(|q| {
                let rs = match (&q.gold_sql, handle(&q.db_id)) {
                    (Some(sql), Some(db)) => {
                        let out = execute_sql(db, sql, limits);
                        if !out.is_success() {
                            log::warn!(
                                "gold SQL for {} failed ({}), not graded",
                                q.question_id,
                                out.error_message.as_deref().unwrap_or_default()
                            );
                        }
                        out.result_set()
                    }
                    _ => None,
                };
                (q.question_id.clone(), rs)
            })
            .collect()
    })
}

/// Whether `attempt` reproduces `gold`.
pub fn attempt_correct(attempt: &Attempt, gold: &ResultSet, opts: ComparisonOptions) -> bool {
    attempt
        .outcome
        .result_set()
        .is_some_and(|rs| results_match_with(&rs, gold, opts))
}

pub(crate) fn failure_category(a: &Attempt) -> Option<ErrorCategory> {
    (!a.outcome.is_success()).then(|| a.outcome.error_category.unwrap_or(ErrorCategory::Other))
}

pub fn summarize(
    traces: &[InferenceTrace],
    golds: &BTreeMap<String, Option<ResultSet>>,
    opts: ComparisonOptions,
) -> BatchSummary {
    let mut iteration_histogram = BTreeMap::new();
    let mut errors_before = BTreeMap::new();
    let mut errors_after = BTreeMap::new();
    let (mut correct, mut graded) = (0, 0);
    for t in traces {
        *iteration_histogram.entry(t.iterations_used).or_insert(0) += 1;
        if let Some(c) = failure_category(t.first()) {
            *errors_before.entry(c).or_insert(0) += 1;
        }
        if let Some(c) = failure_category(t.last()) {
            *errors_after.entry(c).or_insert(0) += 1;
        }
        if let Some(Some(gold)) = golds.get(&t.question_id) {
            graded += 1;
            if attempt_correct(t.last(), gold, opts) {
                correct += 1;
            }
        }
    }
    BatchSummary {
        questions: traces.len(),
        executable: traces.iter().filter(|t| t.executable).count(),
        ex: (graded > 0).then(|| correct as f64 / graded as f64),
        correct,
        graded,
        iteration_histogram,
        errors_before,
        errors_after,
    }
}
