//! Projection-head trainer for the contrastive retrieval objective.

use crate::embedding::{embed_texts, EmbeddingProvider, EmbeddingVector};
use crate::error::{Error, Result};
use crate::hnsupcon::{
    loss_gradient, loss_gradient_sum, sample_negatives, ContrastiveBatch, ContrastiveItem,
    ProjectionHead, DEFAULT_MARGIN, DEFAULT_NEGATIVE_LIMIT, DEFAULT_TAU,
};
use crate::scalar::{dot, Scalar};
use crate::schema::{
    render_column_document, render_query_text, ColumnRef, DatabaseSchema, QuestionRecord,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

pub const HEAD_MAGIC: &[u8; 8] = b"LSQLHEAD";
pub const HEAD_VERSION: u32 = 1;

/// One question with the documents of its gold columns and its negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query: String,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub lr: f64,
    pub tau: f64,
    pub margin: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 5e-5,
            tau: DEFAULT_TAU,
            margin: DEFAULT_MARGIN,
            batch_size: 16,
            negatives: DEFAULT_NEGATIVE_LIMIT,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                context: format!("trainer config line {}", n + 1),
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let float = || value.parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            let int = || value.parse::<u64>().map_err(|e| err(format!("{key}: {e}")));
            match key {
                "epochs" => cfg.epochs = int()? as usize,
                "lr" => cfg.lr = float()?,
                "tau" => cfg.tau = float()?,
                "margin" => cfg.margin = float()?,
                "batch_size" => cfg.batch_size = int()? as usize,
                "negatives" => cfg.negatives = int()? as usize,
                "weight_decay" => cfg.weight_decay = float()?,
                "beta1" => cfg.beta1 = float()?,
                "beta2" => cfg.beta2 = float()?,
                "eps" => cfg.eps = float()?,
                "seed" => cfg.seed = int()?,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Validation("tau must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Validation(
                "lr and weight_decay must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::Validation("invalid optimizer moments".into()));
        }
        Ok(())
    }
}

/// Decoupled weight decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    weight_decay: T,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(len: usize, cfg: &TrainerConfig) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
            lr: T::of(cfg.lr),
            beta1: T::of(cfg.beta1),
            beta2: T::of(cfg.beta2),
            eps: T::of(cfg.eps),
            weight_decay: T::of(cfg.weight_decay),
        }
    }

    pub fn update(&mut self, params: &mut [T], grad: &[T]) {
        self.step += 1;
        let c1 = T::one() - self.beta1.powi(self.step);
        let c2 = T::one() - self.beta2.powi(self.step);
        for (((w, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (T::one() - self.beta1) * g;
            *v = self.beta2 * *v + (T::one() - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *w);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome<T> {
    pub head: ProjectionHead<T>,
    /// Full training-set loss before training, then after each epoch.
    pub loss_trace: Vec<T>,
    pub steps: usize,
}

/// Embeds every distinct text once and expands each example into one item per
/// positive, all sharing the example's negatives.
fn contrastive_items<T: Scalar>(
    examples: &[TrainingExample],
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<ContrastiveItem<T>>> {
    let mut texts: Vec<String> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for ex in examples {
        for t in std::iter::once(&ex.query)
            .chain(&ex.positives)
            .chain(&ex.negatives)
        {
            slot.entry(t.as_str()).or_insert_with(|| {
                texts.push(t.clone());
                texts.len() - 1
            });
        }
    }
    let vectors = embed_texts::<T>(provider, &texts)?;
    let get = |t: &String| vectors[slot[t.as_str()]].clone();
    let mut items = Vec::new();
    for ex in examples {
        let negatives: Vec<EmbeddingVector<T>> = ex.negatives.iter().map(get).collect();
        for p in &ex.positives {
            items.push(ContrastiveItem {
                query: get(&ex.query),
                positive: get(p),
                negatives: negatives.clone(),
            });
        }
    }
    Ok(items)
}

fn full_loss<T: Scalar>(
    items: &[ContrastiveItem<T>],
    head: &ProjectionHead<T>,
    tau: T,
    margin: T,
) -> Result<T> {
    let batch = ContrastiveBatch::new(items.to_vec(), tau, margin);
    let (sum, _) = loss_gradient_sum(&batch, head)?;
    Ok(sum / T::of(items.len() as f64))
}

pub fn train_projection<T: Scalar>(
    examples: &[TrainingExample],
    provider: &dyn EmbeddingProvider,
    cfg: &TrainerConfig,
) -> Result<TrainingOutcome<T>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Validation("training corpus is empty".into()));
    }
    let items = contrastive_items::<T>(examples, provider)?;
    if items.is_empty() {
        return Err(Error::Validation(
            "training corpus has no positive columns".into(),
        ));
    }
    let (tau, margin) = (T::of(cfg.tau), T::of(cfg.margin));
    let mut head = ProjectionHead::identity(provider.dim());
    let mut opt = AdamW::new(head.weight().len(), cfg);
    let mut loss_trace = vec![full_loss(&items, &head, tau, margin)?];
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = ContrastiveBatch::new(
                chunk.iter().map(|&i| items[i].clone()).collect(),
                tau,
                margin,
            );
            let (loss, grad) = loss_gradient(&batch, &head).map_err(|e| match e {
                Error::Numeric(_) | Error::Degenerate(_) => Error::Divergence {
                    step,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    loss: loss.as_f64(),
                });
            }
            opt.update(head.weight_mut(), &grad);
            step += 1;
        }
        let loss = full_loss(&items, &head, tau, margin).map_err(|_| Error::Divergence {
            step,
            loss: f64::NAN,
        })?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: loss.as_f64(),
            });
        }
        log::info!("epoch {} loss {:.6}", epoch + 1, loss);
        loss_trace.push(loss);
    }
    Ok(TrainingOutcome {
        head,
        loss_trace,
        steps: step,
    })
}

/// Training examples for every question that has gold columns: negatives are
/// the `negative_limit` non-gold columns closest to the question under the
/// untrained embedding.
pub fn build_training_examples(
    questions: &[QuestionRecord],
    schemas: &BTreeMap<String, DatabaseSchema>,
    gold: &BTreeMap<String, Vec<ColumnRef>>,
    provider: &dyn EmbeddingProvider,
    negative_limit: usize,
) -> Result<Vec<TrainingExample>> {
    let mut by_db: BTreeMap<&str, Vec<&QuestionRecord>> = BTreeMap::new();
    for q in questions {
        if gold.get(&q.question_id).is_some_and(|g| !g.is_empty()) {
            by_db.entry(q.db_id.as_str()).or_default().push(q);
        }
    }
    let mut out = Vec::new();
    for (db_id, qs) in by_db {
        let schema = schemas
            .get(db_id)
            .ok_or_else(|| Error::Validation(format!("no schema for database {db_id}")))?;
        let docs: Vec<String> = schema.columns.iter().map(render_column_document).collect();
        let doc_vecs = embed_texts::<f64>(provider, &docs)?;
        let queries = qs
            .iter()
            .map(|q| render_query_text(q))
            .collect::<Result<Vec<_>>>()?;
        let query_vecs = embed_texts::<f64>(provider, &queries)?;
        for ((q, text), qv) in qs.iter().zip(queries).zip(&query_vecs) {
            let g = &gold[&q.question_id];
            let sims: Vec<f64> = doc_vecs
                .iter()
                .map(|d| dot(d.values(), qv.values()))
                .collect();
            let negatives = sample_negatives(q, g, schema, &sims, negative_limit)?;
            let positives = g
                .iter()
                .filter_map(|c| schema.position(c))
                .map(|i| docs[i].clone())
                .collect::<Vec<_>>();
            if positives.len() != g.len() {
                return Err(Error::Validation(format!(
                    "question {}: gold columns are not all in schema {db_id}",
                    q.question_id
                )));
            }
            out.push(TrainingExample {
                query: text,
                positives,
                negatives: negatives.into_iter().map(render_column_document).collect(),
            });
        }
    }
    Ok(out)
}

pub fn head_to_bytes<T: Scalar>(head: &ProjectionHead<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + head.weight().len() * 8);
    out.extend_from_slice(HEAD_MAGIC);
    out.extend_from_slice(&HEAD_VERSION.to_le_bytes());
    out.extend_from_slice(&(head.dim() as u32).to_le_bytes());
    for w in head.weight() {
        out.extend_from_slice(&w.as_f64().to_le_bytes());
    }
    out
}

pub fn head_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ProjectionHead<T>> {
    if bytes.len() < 16 || &bytes[..8] != HEAD_MAGIC {
        return Err(Error::Format("not a projection checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != HEAD_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let dim = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != dim * dim * 8 {
        return Err(Error::Format(format!(
            "checkpoint body is {} bytes, expected {}",
            body.len(),
            dim * dim * 8
        )));
    }
    let weight = body
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    ProjectionHead::from_weight(dim, weight)
}

pub fn save_head<T: Scalar>(head: &ProjectionHead<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, head_to_bytes(head)).map_err(|e| Error::io(path, e))
}

pub fn load_head<T: Scalar>(path: impl AsRef<Path>) -> Result<ProjectionHead<T>> {
    let path = path.as_ref();
    head_from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// One `epoch=N loss=X` line per trace entry.
pub fn format_loss_trace<T: Scalar>(trace: &[T]) -> String {
    let mut out = String::new();
    for (i, l) in trace.iter().enumerate() {
        let _ = writeln!(out, "epoch={i} loss={:.9}", l.as_f64());
    }
    out
}
