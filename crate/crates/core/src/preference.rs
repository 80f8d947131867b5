//! Preference pairs from executed candidates, and the preference objective.

use crate::error::{Error, Result};
use crate::executor::{execute_sql, ExecutionLimits, ExecutionOutcome};
use crate::generator::SqlGenerator;
use crate::orchestrator::with_pool;
use crate::prompt::{build_rft_prompt, GenerationContext};
use crate::scalar::{log_sigmoid, Scalar};
use crate::schema::{ColumnRef, DatabaseHandle, DatabaseSchema, QuestionRecord};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateOutcome {
    pub sql: String,
    pub outcome: ExecutionOutcome,
}

impl CandidateOutcome {
    pub fn succeeded(&self) -> bool {
        self.outcome.is_success()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SuccessVsFail,
    GtVsFail,
    ReplicatedGtVsFail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub provenance: Provenance,
}

/// Executes every candidate once; empty results count as success and
/// timeouts as failure.
pub fn label_by_execution(
    candidates: &[String],
    db: &DatabaseHandle,
    limits: &ExecutionLimits,
) -> Vec<CandidateOutcome> {
    candidates
        .par_iter()
        .map(|sql| CandidateOutcome {
            sql: sql.clone(),
            outcome: execute_sql(db, sql, limits),
        })
        .collect()
}

/// One pair per failed candidate, in candidate order. The first pair, and the
/// only one when there is a single failure, prefers the gold query; later
/// pairs consume distinct successful candidates in seeded random order, then
/// fall back to repeating the gold query. Each pair's prompt is the feedback
/// prompt for its rejected candidate.
pub fn build_pairs(
    candidates: &[CandidateOutcome],
    gold_sql: &str,
    ctx: &GenerationContext,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    let failures: Vec<&CandidateOutcome> = candidates.iter().filter(|c| !c.succeeded()).collect();
    let mut successes: Vec<&str> = Vec::new();
    for c in candidates.iter().filter(|c| c.succeeded()) {
        if !successes.contains(&c.sql.as_str()) {
            successes.push(&c.sql);
        }
    }
    successes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut pool = successes.into_iter();
    failures
        .iter()
        .enumerate()
        .map(|(slot, f)| {
            let (chosen, provenance) = if slot == 0 {
                (gold_sql, Provenance::GtVsFail)
            } else {
                match pool.next() {
                    Some(s) => (s, Provenance::SuccessVsFail),
                    None => (gold_sql, Provenance::ReplicatedGtVsFail),
                }
            };
            let message = f.outcome.error_message.clone().unwrap_or_default();
            Ok(PreferencePair {
                prompt: build_rft_prompt(&ctx.clone().with_feedback(&f.sql, message))?,
                chosen: chosen.to_string(),
                rejected: f.sql.clone(),
                provenance,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyLogProbs<T = f64> {
    pub logp_theta_w: T,
    pub logp_theta_l: T,
    pub logp_ref_w: T,
    pub logp_ref_l: T,
    pub alpha: T,
    pub beta: T,
}

impl<T: Scalar> PolicyLogProbs<T> {
    /// Log-probabilities with the default weights `alpha = 1`, `beta = 0.1`.
    pub fn new(logp_theta_w: T, logp_theta_l: T, logp_ref_w: T, logp_ref_l: T) -> Self {
        Self {
            logp_theta_w,
            logp_theta_l,
            logp_ref_w,
            logp_ref_l,
            alpha: T::one(),
            beta: T::of(0.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.logp_theta_w,
            self.logp_theta_l,
            self.logp_ref_w,
            self.logp_ref_l,
            self.alpha,
            self.beta,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "log-probabilities and weights must be finite".into(),
            ));
        }
        if !(self.alpha >= T::zero()) || !(self.beta > T::zero()) {
            return Err(Error::Validation(
                "alpha must be non-negative and beta positive".into(),
            ));
        }
        Ok(())
    }
}

/// `−log σ(β[(θw − 0w) − (θl − 0l)]) − α·θw`.
pub fn rft_loss<T: Scalar>(p: &PolicyLogProbs<T>) -> T {
    let margin = (p.logp_theta_w - p.logp_ref_w) - (p.logp_theta_l - p.logp_ref_l);
    -log_sigmoid(p.beta * margin) - p.alpha * p.logp_theta_w
}

pub fn export_pairs(path: impl AsRef<Path>, pairs: &[PreferencePair]) -> Result<()> {
    crate::prompt::write_jsonl(path, pairs)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<PreferencePair>> {
    crate::prompt::read_jsonl(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairBuildOptions {
    pub candidates: usize,
    pub k: usize,
    pub seed: u64,
    pub limits: ExecutionLimits,
    pub parallelism: usize,
}

impl Default for PairBuildOptions {
    fn default() -> Self {
        Self {
            candidates: crate::generator::DEFAULT_CANDIDATES,
            k: crate::retriever::DEFAULT_K,
            seed: 0,
            limits: ExecutionLimits::default(),
            parallelism: std::thread::available_parallelism().map_or(4, |n| n.get()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDataset {
    pub pairs: Vec<PreferencePair>,
    /// Question ids skipped, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Samples candidates from training contexts (gold columns plus padding),
/// labels them by execution and builds pairs for every question whose gold
/// SQL executes.
pub fn build_preference_dataset(
    questions: &[QuestionRecord],
    schemas: &BTreeMap<String, DatabaseSchema>,
    dbs: &BTreeMap<String, DatabaseHandle>,
    gold_columns: &BTreeMap<String, Vec<ColumnRef>>,
    generator: &dyn SqlGenerator,
    opts: &PairBuildOptions,
) -> PairDataset {
    let per_question: Vec<std::result::Result<Vec<PreferencePair>, (String, String)>> =
        with_pool(opts.parallelism, || {
            questions
                .par_iter()
                .map(|q| {
                    let skip = |why: String| (q.question_id.clone(), why);
                    let (Some(gold_sql), Some(schema), Some(db), Some(gold)) = (
                        &q.gold_sql,
                        schemas.get(&q.db_id),
                        dbs.get(&q.db_id),
                        gold_columns.get(&q.question_id),
                    ) else {
                        return Err(skip("missing gold SQL, gold columns or database".into()));
                    };
                    let gold_out = execute_sql(db, gold_sql, &opts.limits);
                    if !gold_out.is_success() {
                        return Err(skip(format!(
                            "gold SQL fails: {}",
                            gold_out.error_message.unwrap_or_default()
                        )));
                    }
                    let ctx = GenerationContext::for_training(q, schema, gold, opts.k, opts.seed);
                    let prompt =
                        crate::prompt::build_sft_prompt(&ctx).map_err(|e| skip(e.to_string()))?;
                    let sampled = generator
                        .sample(&prompt, opts.candidates)
                        .map_err(|e| skip(e.to_string()))?;
                    let labeled = label_by_execution(&sampled, db, &opts.limits);
                    build_pairs(
                        &labeled,
                        gold_sql,
                        &ctx,
                        opts.seed ^ crate::embedding::fnv1a(q.question_id.as_bytes()),
                    )
                    .map_err(|e| skip(e.to_string()))
                })
                .collect()
        });
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for r in per_question {
        match r {
            Ok(p) => pairs.extend(p),
            Err(s) => {
                log::warn!("question {} skipped: {}", s.0, s.1);
                skipped.push(s);
            }
        }
    }
    PairDataset { pairs, skipped }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::ExecutionStatus;
    use crate::schema::ColumnRecord;
    use proptest::prelude::*;
    use std::time::Duration;

    fn ok(sql: &str) -> CandidateOutcome {
        CandidateOutcome {
            sql: sql.into(),
            outcome: ExecutionOutcome {
                status: ExecutionStatus::Success,
                columns: Some(vec![]),
                rows: Some(vec![]),
                error_message: None,
                error_category: None,
                elapsed_ms: 0.0,
            },
        }
    }

    fn bad(sql: &str) -> CandidateOutcome {
        CandidateOutcome {
            sql: sql.into(),
            outcome: ExecutionOutcome::failure(
                format!("near \"{sql}\": syntax error"),
                Duration::ZERO,
            ),
        }
    }

    fn ctx() -> GenerationContext {
        let schema = DatabaseSchema {
            db_id: "d".into(),
            columns: vec![ColumnRecord::new("d", "t", "x", "integer")],
            foreign_key_edges: vec![],
        };
        GenerationContext::new(
            &QuestionRecord::new("1", "d", "q"),
            &schema,
            schema.columns.clone(),
            25,
        )
    }

    #[test]
    fn rft_loss_examples() {
        let p = PolicyLogProbs::new(-1.0f64, -2.0, -1.0, -2.0);
        assert!((rft_loss(&p) - (2f64.ln() + 1.0)).abs() < 1e-12);
        let p = PolicyLogProbs {
            alpha: 0.0,
            ..PolicyLogProbs::new(-1.0f64, -3.0, -2.0, -2.0)
        };
        let expected = -(1.0 / (1.0 + (-0.2f64).exp())).ln();
        assert!((rft_loss(&p) - expected).abs() < 1e-12);
        assert!((rft_loss(&p) - 0.5981).abs() < 1e-4);
        for beta in [0.01, 0.1, 5.0] {
            let p = PolicyLogProbs {
                alpha: 0.0,
                beta,
                ..PolicyLogProbs::new(-4.0f64, -1.0, -3.0, 0.0)
            };
            assert!((rft_loss(&p) - 2f64.ln()).abs() < 1e-12);
        }
        assert!(PolicyLogProbs::new(f64::NAN, 0.0, 0.0, 0.0)
            .validate()
            .is_err());
        let f32_loss = rft_loss(&PolicyLogProbs::new(-1.0f32, -2.0, -1.0, -2.0));
        assert!((f32_loss - 1.693_147).abs() < 1e-5);
    }

    #[test]
    fn lone_failure_prefers_gold() {
        let pairs = build_pairs(&[ok("s1"), bad("f1"), ok("s2")], "gold", &ctx(), 3).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(
            (pairs[0].chosen.as_str(), pairs[0].rejected.as_str()),
            ("gold", "f1")
        );
        assert_eq!(pairs[0].provenance, Provenance::GtVsFail);
        assert!(pairs[0]
            .prompt
            .contains("\n\nf1\n\n### Error Message\nnear \"f1\": syntax error"));
    }

    #[test]
    fn three_failures_two_successes() {
        let cands = [bad("f1"), ok("s1"), bad("f2"), ok("s2"), bad("f3")];
        let pairs = build_pairs(&cands, "gold", &ctx(), 11).unwrap();
        let rejected: Vec<&str> = pairs.iter().map(|p| p.rejected.as_str()).collect();
        assert_eq!(rejected, ["f1", "f2", "f3"]);
        assert_eq!(pairs[0].chosen, "gold");
        let mut rest: Vec<&str> = pairs[1..].iter().map(|p| p.chosen.as_str()).collect();
        rest.sort();
        assert_eq!(rest, ["s1", "s2"]);
        assert!(pairs[1..]
            .iter()
            .all(|p| p.provenance == Provenance::SuccessVsFail));
        assert_eq!(pairs, build_pairs(&cands, "gold", &ctx(), 11).unwrap());
    }

    #[test]
    fn shortfall_replicates_gold() {
        let pairs = build_pairs(&[bad("f1"), bad("f2"), bad("f3")], "gold", &ctx(), 0).unwrap();
        assert!(pairs.iter().all(|p| p.chosen == "gold"));
        let prov: Vec<_> = pairs.iter().map(|p| p.provenance).collect();
        assert_eq!(
            prov,
            [
                Provenance::GtVsFail,
                Provenance::ReplicatedGtVsFail,
                Provenance::ReplicatedGtVsFail
            ]
        );
        assert!(build_pairs(&[ok("a"), ok("b")], "gold", &ctx(), 0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dpo.jsonl");
        let pairs = build_pairs(&[bad("f1"), ok("s1"), bad("f2")], "gold", &ctx(), 0).unwrap();
        export_pairs(&path, &pairs).unwrap();
        assert_eq!(load_pairs(&path).unwrap(), pairs);
        let line = std::fs::read_to_string(&path).unwrap();
        assert!(line.contains("\"provenance\":\"gt_vs_fail\""));
    }

    proptest! {
        #[test]
        fn pair_rules_hold(pattern in proptest::collection::vec(any::<bool>(), 0..12), seed in any::<u64>()) {
            let cands: Vec<CandidateOutcome> = pattern
                .iter()
                .enumerate()
                .map(|(i, &good)| if good { ok(&format!("s{}", i % 4)) } else { bad(&format!("f{i}")) })
                .collect();
            let pairs = build_pairs(&cands, "gold", &ctx(), seed).unwrap();
            let failures: Vec<&str> = cands.iter().filter(|c| !c.succeeded()).map(|c| c.sql.as_str()).collect();
            prop_assert_eq!(pairs.len(), failures.len());
            let rejected: Vec<&str> = pairs.iter().map(|p| p.rejected.as_str()).collect();
            prop_assert_eq!(rejected, failures.clone());
            if !failures.is_empty() {
                prop_assert!(pairs.iter().any(|p| p.chosen == "gold"));
            }
            let used: Vec<&str> = pairs.iter().filter(|p| p.provenance == Provenance::SuccessVsFail).map(|p| p.chosen.as_str()).collect();
            let mut dedup = used.clone();
            dedup.sort();
            dedup.dedup();
            prop_assert_eq!(dedup.len(), used.len());
            if failures.len() == 1 {
                prop_assert_eq!(pairs[0].chosen.as_str(), "gold");
            }
        }

        #[test]
        fn loss_monotone_in_log_probs(w in -10.0f64..-0.01, l in -10.0f64..-0.01, rw in -10.0f64..-0.01, rl in -10.0f64..-0.01, d in 0.01f64..5.0, alpha in 0.01f64..3.0, beta in 0.01f64..1.0) {
            let base = PolicyLogProbs { logp_theta_w: w, logp_theta_l: l, logp_ref_w: rw, logp_ref_l: rl, alpha, beta };
            let up_w = PolicyLogProbs { logp_theta_w: w + d, ..base };
            let up_l = PolicyLogProbs { logp_theta_l: l + d, ..base };
            prop_assert!(rft_loss(&up_w) < rft_loss(&base));
            prop_assert!(rft_loss(&up_l) > rft_loss(&base));
            prop_assert!(rft_loss(&base) > alpha * -w);
        }
    }
}
