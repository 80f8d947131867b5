//! Hard-negative filtered supervised contrastive loss.
//!
//! For an item with query `q`, positive `p` and negatives `n_j`, the loss is
//! `-log(e^{s(q,p)/τ} / Z)` with `Z = e^{s(q,p)/τ} + Σ_j m_j e^{s(q,n_j)/τ}`
//! and `m_j = 1` iff `q·n_j ≥ q·p − margin`. A batch loss is the mean over
//! items. An infinite margin keeps every negative, which is plain SupCon.

use crate::embedding::{normalize, EmbeddingVector};
use crate::error::{Error, Result};
use crate::scalar::{dot, l2_norm, log_sum_exp, Scalar};
use crate::schema::{ColumnRecord, ColumnRef, DatabaseSchema, QuestionRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MARGIN: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_NEGATIVE_LIMIT: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveItem<T> {
    pub query: EmbeddingVector<T>,
    pub positive: EmbeddingVector<T>,
    pub negatives: Vec<EmbeddingVector<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch<T> {
    pub items: Vec<ContrastiveItem<T>>,
    pub tau: T,
    pub margin: T,
}

impl<T: Scalar> ContrastiveBatch<T> {
    pub fn new(items: Vec<ContrastiveItem<T>>, tau: T, margin: T) -> Self {
        Self { items, tau, margin }
    }

    /// Checks the batch invariants; `negative_limit` caps each item's negatives.
    pub fn validate(&self, negative_limit: Option<usize>) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Validation("contrastive batch is empty".into()));
        }
        if !(self.tau > T::zero()) || !self.tau.is_finite() {
            return Err(Error::Validation(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        if self.margin.is_nan() {
            return Err(Error::Validation("margin is NaN".into()));
        }
        let dim = self.items[0].query.dim();
        let tol = T::of(1e-5);
        for (i, item) in self.items.iter().enumerate() {
            if let Some(limit) = negative_limit {
                if item.negatives.len() > limit {
                    return Err(Error::Validation(format!(
                        "item {i} has {} negatives, limit is {limit}",
                        item.negatives.len()
                    )));
                }
            }
            for v in std::iter::once(&item.query)
                .chain(std::iter::once(&item.positive))
                .chain(&item.negatives)
            {
                if v.dim() != dim {
                    return Err(Error::Contract(format!(
                        "item {i}: dimension {} != {dim}",
                        v.dim()
                    )));
                }
                if (l2_norm(v.values()) - T::one()).abs() > tol {
                    return Err(Error::Contract(format!(
                        "item {i}: vector is not unit-norm"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `m_j = 1` iff `q·n_j ≥ q·p − margin`.
pub fn compute_mask<T: Scalar>(
    query: &EmbeddingVector<T>,
    positive: &EmbeddingVector<T>,
    negatives: &[EmbeddingVector<T>],
    margin: T,
) -> Vec<bool> {
    let threshold = query.dot(positive) - margin;
    negatives
        .iter()
        .map(|n| query.dot(n) >= threshold)
        .collect()
}

fn mask_slices<T: Scalar>(q: &[T], p: &[T], negatives: &[&[T]], margin: T) -> Vec<bool> {
    let threshold = dot(q, p) - margin;
    negatives.iter().map(|n| dot(q, n) >= threshold).collect()
}

/// Per-item loss and the derivatives of that loss w.r.t. `s(q,p)` and each
/// `s(q,n_j)` (zero for masked-out negatives).
struct ItemTerms<T> {
    loss: T,
    d_pos: T,
    d_neg: Vec<T>,
}

fn item_terms<T: Scalar>(s_pos: T, s_neg: &[T], mask: &[bool], tau: T) -> ItemTerms<T> {
    let mut logits = Vec::with_capacity(1 + s_neg.len());
    logits.push(s_pos / tau);
    for (s, &m) in s_neg.iter().zip(mask) {
        if m {
            logits.push(*s / tau);
        }
    }
    let lse = log_sum_exp(&logits);
    let loss = lse - logits[0];
    let weight = |logit: T| (logit - lse).exp();
    let d_pos = (weight(logits[0]) - T::one()) / tau;
    let d_neg = s_neg
        .iter()
        .zip(mask)
        .map(|(s, &m)| if m { weight(*s / tau) / tau } else { T::zero() })
        .collect();
    ItemTerms { loss, d_pos, d_neg }
}

/// Batch loss on the vectors as given.
pub fn hn_supcon_loss<T: Scalar>(batch: &ContrastiveBatch<T>) -> Result<T> {
    batch.validate(None)?;
    let mut total = T::zero();
    for item in &batch.items {
        let s_pos = item.query.dot(&item.positive);
        let s_neg: Vec<T> = item.negatives.iter().map(|n| item.query.dot(n)).collect();
        let mask = compute_mask(&item.query, &item.positive, &item.negatives, batch.margin);
        total += item_terms(s_pos, &s_neg, &mask, batch.tau).loss;
    }
    let loss = total / T::of(batch.items.len() as f64);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("contrastive loss is {loss}")));
    }
    Ok(loss)
}

/// Shared linear map applied to query and document embeddings before
/// renormalization: `v ↦ normalize(W v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead<T> {
    dim: usize,
    /// Row-major `dim × dim`.
    weight: Vec<T>,
}

impl<T: Scalar> ProjectionHead<T> {
    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![T::zero(); dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = T::one();
        }
        Self { dim, weight }
    }

    pub fn from_weight(dim: usize, weight: Vec<T>) -> Result<Self> {
        if weight.len() != dim * dim {
            return Err(Error::Contract(format!(
                "projection weight has {} entries, expected {}",
                weight.len(),
                dim * dim
            )));
        }
        if weight.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric(
                "projection weight has non-finite entries".into(),
            ));
        }
        Ok(Self { dim, weight })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self) -> &[T] {
        &self.weight
    }

    pub(crate) fn weight_mut(&mut self) -> &mut [T] {
        &mut self.weight
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.dim)
    }

    fn matvec(&self, x: &[T]) -> Vec<T> {
        self.weight
            .chunks_exact(self.dim)
            .map(|row| dot(row, x))
            .collect()
    }

    pub fn apply(&self, v: &EmbeddingVector<T>) -> Result<EmbeddingVector<T>> {
        if v.dim() != self.dim {
            return Err(Error::Contract(format!(
                "projection expects dimension {}, got {}",
                self.dim,
                v.dim()
            )));
        }
        normalize(&self.matvec(v.values()))
    }

    pub fn cast<U: Scalar>(&self) -> ProjectionHead<U> {
        ProjectionHead {
            dim: self.dim,
            weight: self.weight.iter().map(|w| U::of(w.as_f64())).collect(),
        }
    }
}

/// A projected vector kept together with what backpropagation needs.
struct Projected<T> {
    unit: Vec<T>,
    norm: T,
}

fn project<T: Scalar>(head: &ProjectionHead<T>, x: &[T]) -> Result<Projected<T>> {
    let u = head.matvec(x);
    let norm = l2_norm(&u);
    if !(norm > T::zero()) || !norm.is_finite() {
        return Err(Error::Degenerate("projection maps a vector to zero".into()));
    }
    Ok(Projected {
        unit: u.iter().map(|&v| v / norm).collect(),
        norm,
    })
}

/// Accumulates `∂L/∂W` for `y = normalize(W x)` given `g = ∂L/∂y`.
fn backprop<T: Scalar>(grad: &mut [T], dim: usize, y: &Projected<T>, g: &[T], x: &[T]) {
    let along = dot(&y.unit, g);
    for r in 0..dim {
        let gu = (g[r] - y.unit[r] * along) / y.norm;
        if gu == T::zero() {
            continue;
        }
        let row = &mut grad[r * dim..(r + 1) * dim];
        for (w, &xc) in row.iter_mut().zip(x) {
            *w += gu * xc;
        }
    }
}

/// Loss and weight gradient of one item under `head`.
fn item_loss_gradient<T: Scalar>(
    item: &ContrastiveItem<T>,
    head: &ProjectionHead<T>,
    tau: T,
    margin: T,
) -> Result<(T, Vec<T>)> {
    let dim = head.dim();
    let mut grad = vec![T::zero(); dim * dim];
    let q = project(head, item.query.values())?;
    let p = project(head, item.positive.values())?;
    let negs = item
        .negatives
        .iter()
        .map(|n| project(head, n.values()))
        .collect::<Result<Vec<_>>>()?;
    let neg_units: Vec<&[T]> = negs.iter().map(|n| n.unit.as_slice()).collect();
    // Masks are fixed by the forward pass.
    let mask = mask_slices(&q.unit, &p.unit, &neg_units, margin);
    let s_pos = dot(&q.unit, &p.unit);
    let s_neg: Vec<T> = neg_units.iter().map(|n| dot(&q.unit, n)).collect();
    let terms = item_terms(s_pos, &s_neg, &mask, tau);

    let mut g_q: Vec<T> = p.unit.iter().map(|&v| v * terms.d_pos).collect();
    for (n, &d) in negs.iter().zip(&terms.d_neg) {
        if d != T::zero() {
            for (g, &v) in g_q.iter_mut().zip(&n.unit) {
                *g += d * v;
            }
        }
    }
    backprop(&mut grad, dim, &q, &g_q, item.query.values());
    let g_p: Vec<T> = q.unit.iter().map(|&v| v * terms.d_pos).collect();
    backprop(&mut grad, dim, &p, &g_p, item.positive.values());
    for ((n, &d), raw) in negs.iter().zip(&terms.d_neg).zip(&item.negatives) {
        if d != T::zero() {
            let g_n: Vec<T> = q.unit.iter().map(|&v| v * d).collect();
            backprop(&mut grad, dim, n, &g_n, raw.values());
        }
    }
    Ok((terms.loss, grad))
}

/// Unaveraged loss and gradient sums over the batch items.
pub(crate) fn loss_gradient_sum<T: Scalar>(
    batch: &ContrastiveBatch<T>,
    head: &ProjectionHead<T>,
) -> Result<(T, Vec<T>)> {
    let per_item = batch
        .items
        .par_iter()
        .map(|item| item_loss_gradient(item, head, batch.tau, batch.margin))
        .collect::<Result<Vec<_>>>()?;
    let dim = head.dim();
    let mut grad = vec![T::zero(); dim * dim];
    let mut total = T::zero();
    for (loss, g) in per_item {
        total += loss;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    Ok((total, grad))
}

/// Loss of the projected batch and its gradient with respect to the
/// projection weight, treating the masks as constants.
pub fn loss_gradient<T: Scalar>(
    batch: &ContrastiveBatch<T>,
    head: &ProjectionHead<T>,
) -> Result<(T, Vec<T>)> {
    batch.validate(None)?;
    let (total, mut grad) = loss_gradient_sum(batch, head)?;
    let b = T::of(batch.items.len() as f64);
    for g in &mut grad {
        *g /= b;
    }
    let loss = total / b;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("contrastive loss is {loss}")));
    }
    Ok((loss, grad))
}

/// Loss of the batch after projecting every vector through `head`.
pub fn projected_loss<T: Scalar>(
    batch: &ContrastiveBatch<T>,
    head: &ProjectionHead<T>,
) -> Result<T> {
    let project_all = |v: &EmbeddingVector<T>| head.apply(v);
    let items = batch
        .items
        .iter()
        .map(|it| {
            Ok(ContrastiveItem {
                query: project_all(&it.query)?,
                positive: project_all(&it.positive)?,
                negatives: it
                    .negatives
                    .iter()
                    .map(project_all)
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    hn_supcon_loss(&ContrastiveBatch::new(items, batch.tau, batch.margin))
}

/// Picks up to `limit` non-gold columns with the highest base similarity to
/// the question; ties go to the earlier column in schema order.
/// `base_similarities` is aligned with `schema.columns`.
pub fn sample_negatives<'s, T: Scalar>(
    question: &QuestionRecord,
    gold: &[ColumnRef],
    schema: &'s DatabaseSchema,
    base_similarities: &[T],
    limit: usize,
) -> Result<Vec<&'s ColumnRecord>> {
    if schema.columns.is_empty() {
        return Err(Error::Validation(format!(
            "schema {} has no columns",
            schema.db_id
        )));
    }
    if question.db_id != schema.db_id {
        return Err(Error::Validation(format!(
            "question {} targets {}, schema is {}",
            question.question_id, question.db_id, schema.db_id
        )));
    }
    if base_similarities.len() != schema.columns.len() {
        return Err(Error::Contract(format!(
            "{} similarities for {} columns",
            base_similarities.len(),
            schema.columns.len()
        )));
    }
    let mut candidates: Vec<usize> = (0..schema.columns.len())
        .filter(|&i| {
            let c = &schema.columns[i];
            !gold
                .iter()
                .any(|g| g.same_column(&c.table_name, &c.column_name))
        })
        .collect();
    candidates.sort_by(|&a, &b| {
        base_similarities[b]
            .partial_cmp(&base_similarities[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    candidates.truncate(limit);
    Ok(candidates.into_iter().map(|i| &schema.columns[i]).collect())
}
