//! Generator inputs: schema slices, the first-pass prompt, and the feedback prompt.

use crate::embedding::fnv1a;
use crate::error::{Error, Result};
use crate::retriever::RetrievalResult;
use crate::schema::{normalize_newlines, ColumnRecord, ColumnRef, DatabaseSchema, QuestionRecord};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationContext {
    pub question: String,
    pub evidence: Option<String>,
    pub schema_slice: Vec<ColumnRecord>,
    /// `(referencing, referenced)` pairs with both endpoints in the slice.
    pub foreign_keys: Vec<(ColumnRef, ColumnRef)>,
    pub failed_sql: Option<String>,
    pub error_message: Option<String>,
    pub k: usize,
}

impl GenerationContext {
    /// Context over `slice`, keeping its order and truncating to `k`.
    pub fn new(
        q: &QuestionRecord,
        schema: &DatabaseSchema,
        mut slice: Vec<ColumnRecord>,
        k: usize,
    ) -> Self {
        slice.truncate(k);
        let refs: Vec<ColumnRef> = slice.iter().map(ColumnRecord::column_ref).collect();
        Self {
            question: q.question.clone(),
            evidence: q.evidence.clone().filter(|e| !e.trim().is_empty()),
            foreign_keys: schema.edges_within(&refs),
            schema_slice: slice,
            failed_sql: None,
            error_message: None,
            k,
        }
    }

    /// Inference-time context: retrieved columns in rank order.
    pub fn from_retrieval(
        q: &QuestionRecord,
        schema: &DatabaseSchema,
        retrieval: &RetrievalResult<impl Sized>,
        k: usize,
    ) -> Self {
        let slice = retrieval
            .ranked_columns
            .iter()
            .filter_map(|s| schema.column(&s.column).cloned())
            .collect();
        Self::new(q, schema, slice, k)
    }

    /// Training-time context: gold columns padded with sampled irrelevant ones.
    pub fn for_training(
        q: &QuestionRecord,
        schema: &DatabaseSchema,
        gold: &[ColumnRef],
        k: usize,
        seed: u64,
    ) -> Self {
        let gold: Vec<ColumnRecord> = gold
            .iter()
            .filter_map(|c| schema.column(c).cloned())
            .collect();
        let seed = seed ^ fnv1a(q.question.as_bytes());
        Self::new(q, schema, pad_schema_to_k(&gold, schema, k, seed), k)
    }

    pub fn with_feedback(
        mut self,
        failed_sql: impl Into<String>,
        error_message: impl Into<String>,
    ) -> Self {
        self.failed_sql = Some(failed_sql.into());
        self.error_message = Some(error_message.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_slice.is_empty() {
            return Err(Error::Validation(
                "generation context has an empty schema slice".into(),
            ));
        }
        if self.schema_slice.len() > self.k {
            return Err(Error::Validation(format!(
                "schema slice has {} columns, more than k = {}",
                self.schema_slice.len(),
                self.k
            )));
        }
        if self.failed_sql.is_some() != self.error_message.is_some() {
            return Err(Error::Validation(
                "failed SQL and error message must be given together".into(),
            ));
        }
        Ok(())
    }
}

/// `input` truncated to `k` when long enough, otherwise `input` plus seeded
/// uniformly sampled other columns, returned in schema order.
pub fn pad_schema_to_k(
    input: &[ColumnRecord],
    schema: &DatabaseSchema,
    k: usize,
    seed: u64,
) -> Vec<ColumnRecord> {
    if input.len() >= k {
        return input[..k].to_vec();
    }
    let in_input = |c: &ColumnRecord| {
        input.iter().any(|g| {
            g.table_name.eq_ignore_ascii_case(&c.table_name)
                && g.column_name.eq_ignore_ascii_case(&c.column_name)
        })
    };
    let others: Vec<usize> = (0..schema.columns.len())
        .filter(|&i| !in_input(&schema.columns[i]))
        .collect();
    let want = (k - input.len()).min(others.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, others.len(), want)
        .into_iter()
        .map(|j| others[j])
        .collect();
    picked.extend(
        input
            .iter()
            .filter_map(|c| schema.position(&c.column_ref())),
    );
    picked.sort_unstable();
    picked.dedup();
    let mut out: Vec<ColumnRecord> = picked
        .into_iter()
        .map(|i| schema.columns[i].clone())
        .collect();
    // Input columns missing from the schema are kept at the end.
    for c in input {
        if schema.position(&c.column_ref()).is_none() {
            out.push(c.clone());
        }
    }
    out
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

/// `table.column = { ... }` block for one column.
pub fn render_column_entry(col: &ColumnRecord) -> String {
    let mut fields = vec![format!(
        "\"type\": {}",
        json_str(&col.data_type.to_lowercase())
    )];
    if col.is_primary_key {
        fields.push("\"primary_key\": true".into());
    }
    if !col.sample_values.is_empty() {
        let values: Vec<String> = col.sample_values.iter().map(|v| v.render()).collect();
        fields.push(format!("\"values\": [{}]", values.join(", ")));
    }
    if let Some(d) = &col.column_description {
        fields.push(format!("\"description\": {}", json_str(d)));
    }
    if let Some(v) = &col.value_description {
        fields.push(format!("\"comment\": {}", json_str(v)));
    }
    format!(
        "{}.{} = {{\n  {}\n}}",
        col.table_name,
        col.column_name,
        fields.join(",\n  ")
    )
}

pub fn build_sft_prompt(ctx: &GenerationContext) -> Result<String> {
    ctx.validate()?;
    let entries: Vec<String> = ctx.schema_slice.iter().map(render_column_entry).collect();
    let fks: Vec<String> = ctx
        .foreign_keys
        .iter()
        .map(|(from, to)| format!("{to} = {from}"))
        .collect();
    let mut out = format!(
        "### Question\n{}\n\n### Database\n-- Tables and Columns\n{}\n\n-- Foreign Keys\n{}",
        ctx.question,
        entries.join("\n"),
        fks.join("\n")
    );
    if let Some(e) = &ctx.evidence {
        out.push_str("\n\n-- Evidence\n");
        out.push_str(e);
    }
    Ok(normalize_newlines(&out))
}

pub fn build_rft_prompt(ctx: &GenerationContext) -> Result<String> {
    let (Some(sql), Some(err)) = (&ctx.failed_sql, &ctx.error_message) else {
        return Err(Error::Validation(
            "feedback prompt needs a failed SQL query and its error message".into(),
        ));
    };
    let sft = build_sft_prompt(ctx)?;
    Ok(normalize_newlines(&format!(
        "{sft}\n\n{sql}\n\n### Error Message\n{err}"
    )))
}

/// Question text of a prompt produced by [`build_sft_prompt`].
pub fn prompt_question(prompt: &str) -> Option<&str> {
    let rest = prompt.strip_prefix("### Question\n")?;
    rest.split_once("\n\n### Database\n").map(|(q, _)| q)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub completion: String,
}

/// First-pass training records: gold columns padded to `k` for each question
/// with gold SQL and gold columns.
pub fn build_sft_dataset(
    questions: &[QuestionRecord],
    schemas: &BTreeMap<String, DatabaseSchema>,
    gold_columns: &BTreeMap<String, Vec<ColumnRef>>,
    k: usize,
    seed: u64,
) -> Result<Vec<SftRecord>> {
    let mut out = Vec::new();
    for q in questions {
        let (Some(sql), Some(gold), Some(schema)) = (
            &q.gold_sql,
            gold_columns.get(&q.question_id),
            schemas.get(&q.db_id),
        ) else {
            log::warn!(
                "question {}: missing gold SQL, gold columns or schema, skipped",
                q.question_id
            );
            continue;
        };
        let ctx = GenerationContext::for_training(q, schema, gold, k, seed);
        out.push(SftRecord {
            prompt: build_sft_prompt(&ctx)?,
            completion: sql.clone(),
        });
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).expect("records serialize");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            context: format!("{} line {}", path.display(), n + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
