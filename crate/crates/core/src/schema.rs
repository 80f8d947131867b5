//! Corpus records, database schemas, and the text forms used for retrieval.

use crate::error::{Error, Result};
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

/// Instruction line prepended to every retrieval query.
pub const QUERY_INSTRUCTION: &str =
    "Given a natural language question, retrieve database column information passages used to generate SQL.";

/// Number of example values kept per column.
pub const SAMPLE_VALUES_PER_COLUMN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Simple,
    Moderate,
    #[serde(alias = "chall")]
    Challenging,
    Easy,
    Medium,
    Hard,
    Extra,
    #[serde(other)]
    Unlabeled,
}

impl Difficulty {
    pub fn as_str(&self) -> &'static str {
        match self {
            Difficulty::Simple => "simple",
            Difficulty::Moderate => "moderate",
            Difficulty::Challenging => "challenging",
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
            Difficulty::Extra => "extra",
            Difficulty::Unlabeled => "unlabeled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: String,
    pub db_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
    #[serde(default, rename = "SQL", skip_serializing_if = "Option::is_none")]
    pub gold_sql: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<Difficulty>,
}

impl QuestionRecord {
    pub fn new(
        id: impl Into<String>,
        db_id: impl Into<String>,
        question: impl Into<String>,
    ) -> Self {
        Self {
            question_id: id.into(),
            db_id: db_id.into(),
            question: question.into(),
            evidence: None,
            gold_sql: None,
            difficulty: None,
        }
    }

    pub fn with_evidence(mut self, evidence: impl Into<String>) -> Self {
        self.evidence = Some(evidence.into());
        self
    }

    pub fn with_gold(mut self, sql: impl Into<String>) -> Self {
        self.gold_sql = Some(sql.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() {
            return Err(Error::Validation(format!(
                "question {} has an empty question text",
                self.question_id
            )));
        }
        Ok(())
    }
}

/// Record layout accepted on input. Field aliases cover the BIRD and Spider
/// release files.
#[derive(Deserialize)]
struct RawQuestion {
    #[serde(default, alias = "id", alias = "qid")]
    question_id: Option<serde_json::Value>,
    db_id: String,
    question: String,
    #[serde(default)]
    evidence: Option<String>,
    #[serde(
        default,
        alias = "SQL",
        alias = "sql",
        alias = "query",
        alias = "gold_sql"
    )]
    gold: Option<String>,
    #[serde(default)]
    difficulty: Option<Difficulty>,
}

/// Loads a corpus file: a JSON array of question records.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<QuestionRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, &path.display().to_string())
}

pub fn parse_corpus(text: &str, context: &str) -> Result<Vec<QuestionRecord>> {
    let raw: Vec<RawQuestion> = serde_json::from_str(text).map_err(|e| Error::Parse {
        context: context.to_string(),
        message: e.to_string(),
    })?;
    let mut out = Vec::with_capacity(raw.len());
    for (i, r) in raw.into_iter().enumerate() {
        let question_id = match r.question_id {
            None | Some(serde_json::Value::Null) => i.to_string(),
            Some(serde_json::Value::String(s)) => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(other) => {
                return Err(Error::Parse {
                    context: context.to_string(),
                    message: format!(
                        "record {i}: field `question_id` has unsupported value {other}"
                    ),
                })
            }
        };
        let rec = QuestionRecord {
            question_id,
            db_id: r.db_id,
            question: r.question,
            evidence: r.evidence.filter(|e| !e.trim().is_empty()),
            gold_sql: r.gold.filter(|s| !s.trim().is_empty()),
            difficulty: r.difficulty,
        };
        rec.validate()?;
        out.push(rec);
    }
    let mut seen = HashSet::new();
    let mut dups: Vec<&str> = Vec::new();
    for r in &out {
        if !seen.insert(r.question_id.as_str()) && !dups.contains(&r.question_id.as_str()) {
            dups.push(&r.question_id);
        }
    }
    if !dups.is_empty() {
        return Err(Error::Validation(format!(
            "duplicate question_id: {}",
            dups.join(", ")
        )));
    }
    Ok(out)
}

pub fn write_corpus(path: impl AsRef<Path>, records: &[QuestionRecord]) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(records).expect("records serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `(db_id, table, column)` triple identifying one column.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ColumnRef {
    pub db_id: String,
    pub table: String,
    pub column: String,
}

impl ColumnRef {
    pub fn new(
        db_id: impl Into<String>,
        table: impl Into<String>,
        column: impl Into<String>,
    ) -> Self {
        Self {
            db_id: db_id.into(),
            table: table.into(),
            column: column.into(),
        }
    }

    /// Case-insensitive match on table and column, the way SQLite resolves names.
    pub fn same_column(&self, table: &str, column: &str) -> bool {
        self.table.eq_ignore_ascii_case(table) && self.column.eq_ignore_ascii_case(column)
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.table, self.column)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleValue {
    Integer(i64),
    Real(f64),
    Text(String),
}

impl SampleValue {
    /// JSON-style literal: strings quoted and escaped, numbers bare.
    pub fn render(&self) -> String {
        match self {
            SampleValue::Integer(i) => i.to_string(),
            SampleValue::Real(r) => serde_json::to_string(r).unwrap_or_else(|_| "null".into()),
            SampleValue::Text(s) => serde_json::to_string(s).expect("strings serialize"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ForeignKeyTarget {
    pub table: String,
    pub column: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRecord {
    pub db_id: String,
    pub table_name: String,
    pub column_name: String,
    pub data_type: String,
    pub is_primary_key: bool,
    #[serde(default)]
    pub foreign_keys: Vec<ForeignKeyTarget>,
    #[serde(default)]
    pub column_description: Option<String>,
    #[serde(default)]
    pub value_description: Option<String>,
    #[serde(default)]
    pub sample_values: Vec<SampleValue>,
}

impl ColumnRecord {
    pub fn new(db_id: &str, table: &str, column: &str, data_type: &str) -> Self {
        Self {
            db_id: db_id.to_string(),
            table_name: table.to_string(),
            column_name: column.to_string(),
            data_type: data_type.to_string(),
            is_primary_key: false,
            foreign_keys: Vec::new(),
            column_description: None,
            value_description: None,
            sample_values: Vec::new(),
        }
    }

    pub fn column_ref(&self) -> ColumnRef {
        ColumnRef::new(&self.db_id, &self.table_name, &self.column_name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseSchema {
    pub db_id: String,
    pub columns: Vec<ColumnRecord>,
    pub foreign_key_edges: Vec<(ColumnRef, ColumnRef)>,
}

impl DatabaseSchema {
    pub fn position(&self, col: &ColumnRef) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| c.column_ref().same_column(&col.table, &col.column))
    }

    pub fn column(&self, col: &ColumnRef) -> Option<&ColumnRecord> {
        self.position(col).map(|i| &self.columns[i])
    }

    /// Table names in schema order.
    pub fn tables(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for c in &self.columns {
            if !out.contains(&c.table_name.as_str()) {
                out.push(&c.table_name);
            }
        }
        out
    }

    /// Foreign key edges whose endpoints are both inside `cols`.
    pub fn edges_within(&self, cols: &[ColumnRef]) -> Vec<(ColumnRef, ColumnRef)> {
        let has = |c: &ColumnRef| cols.iter().any(|x| x.same_column(&c.table, &c.column));
        self.foreign_key_edges
            .iter()
            .filter(|(a, b)| has(a) && has(b))
            .cloned()
            .collect()
    }
}

/// A SQLite database file plus the id it is known by in a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseHandle {
    pub db_id: String,
    pub path: PathBuf,
}

impl DatabaseHandle {
    pub fn new(db_id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        Self {
            db_id: db_id.into(),
            path: path.into(),
        }
    }

    /// Resolves `<dir>/<db_id>/<db_id>.sqlite` (benchmark layout) or
    /// `<dir>/<db_id>.sqlite`.
    pub fn locate(dir: impl AsRef<Path>, db_id: &str) -> Result<Self> {
        let dir = dir.as_ref();
        for candidate in [
            dir.join(db_id).join(format!("{db_id}.sqlite")),
            dir.join(format!("{db_id}.sqlite")),
            dir.join(format!("{db_id}.db")),
        ] {
            if candidate.is_file() {
                return Ok(Self::new(db_id, candidate));
            }
        }
        Err(Error::Validation(format!(
            "no database file for {db_id} under {}",
            dir.display()
        )))
    }

    /// Enumerates every database under `dir` in either layout, sorted by id.
    pub fn discover(dir: impl AsRef<Path>) -> Result<Vec<Self>> {
        let dir = dir.as_ref();
        let mut out = Vec::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                if let Some(id) = path.file_name().and_then(|s| s.to_str()) {
                    let f = path.join(format!("{id}.sqlite"));
                    if f.is_file() {
                        out.push(Self::new(id, f));
                    }
                }
            } else if matches!(
                path.extension().and_then(|e| e.to_str()),
                Some("sqlite" | "db")
            ) {
                if let Some(id) = path.file_stem().and_then(|s| s.to_str()) {
                    out.push(Self::new(id, path.clone()));
                }
            }
        }
        out.sort_by(|a, b| a.db_id.cmp(&b.db_id));
        out.dedup_by(|a, b| a.db_id == b.db_id);
        Ok(out)
    }

    pub fn open_read_only(&self) -> Result<Connection> {
        if !self.path.is_file() {
            return Err(Error::io(
                &self.path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "database file not found"),
            ));
        }
        let conn = Connection::open_with_flags(
            &self.path,
            OpenFlags::SQLITE_OPEN_READ_ONLY
                | OpenFlags::SQLITE_OPEN_NO_MUTEX
                | OpenFlags::SQLITE_OPEN_URI,
        )?;
        conn.execute_batch("PRAGMA query_only = 1;")?;
        Ok(conn)
    }
}

/// Column descriptions keyed by (table, column).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DescriptionOverlay {
    pub entries: Vec<OverlayEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayEntry {
    pub table: String,
    pub column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column_description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_description: Option<String>,
}

impl DescriptionOverlay {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.entries).expect("overlay serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Converts a BIRD `database_description/` directory (one CSV per table
    /// with `original_column_name, column_name, column_description,
    /// data_format, value_description`) into an overlay.
    pub fn from_bird_csv_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| e.eq_ignore_ascii_case("csv"))
                    == Some(true)
            })
            .collect();
        files.sort();
        let mut entries = Vec::new();
        for file in files {
            let table = file
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
            let text = String::from_utf8_lossy(&bytes);
            let text = text.trim_start_matches('\u{feff}');
            let mut reader = csv::ReaderBuilder::new()
                .flexible(true)
                .trim(csv::Trim::All)
                .from_reader(text.as_bytes());
            let headers: Vec<String> = reader
                .headers()
                .map_err(|e| Error::Parse {
                    context: file.display().to_string(),
                    message: e.to_string(),
                })?
                .iter()
                .map(|h| h.trim().to_ascii_lowercase())
                .collect();
            let idx = |name: &str| headers.iter().position(|h| h == name);
            let (Some(orig), desc, vdesc) = (
                idx("original_column_name"),
                idx("column_description"),
                idx("value_description"),
            ) else {
                log::warn!(
                    "{}: no original_column_name header, skipped",
                    file.display()
                );
                continue;
            };
            for rec in reader.records() {
                let rec = rec.map_err(|e| Error::Parse {
                    context: file.display().to_string(),
                    message: e.to_string(),
                })?;
                let get = |i: Option<usize>| {
                    i.and_then(|i| rec.get(i))
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                };
                let Some(column) = get(Some(orig)) else {
                    continue;
                };
                entries.push(OverlayEntry {
                    table: table.clone(),
                    column,
                    column_description: get(desc),
                    value_description: get(vdesc),
                });
            }
        }
        Ok(Self { entries })
    }
}

fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

fn sample_values(conn: &Connection, table: &str, column: &str) -> Result<Vec<SampleValue>> {
    let (t, c) = (quote_ident(table), quote_ident(column));
    let ordered = format!("SELECT {c} FROM {t} WHERE {c} IS NOT NULL ORDER BY rowid");
    let unordered = format!("SELECT {c} FROM {t} WHERE {c} IS NOT NULL");
    // WITHOUT ROWID tables reject the ordered form.
    let mut stmt = match conn.prepare(&ordered) {
        Ok(s) => s,
        Err(_) => conn.prepare(&unordered)?,
    };
    let mut rows = stmt.query([])?;
    let mut out: Vec<SampleValue> = Vec::new();
    while let Some(row) = rows.next()? {
        let v = match row.get_ref(0)? {
            rusqlite::types::ValueRef::Integer(i) => SampleValue::Integer(i),
            rusqlite::types::ValueRef::Real(r) => SampleValue::Real(r),
            rusqlite::types::ValueRef::Text(t) => {
                SampleValue::Text(String::from_utf8_lossy(t).into_owned())
            }
            _ => continue,
        };
        if !out.contains(&v) {
            out.push(v);
            if out.len() == SAMPLE_VALUES_PER_COLUMN {
                break;
            }
        }
    }
    Ok(out)
}

/// Reads columns, keys and sample values from a SQLite database, merging
/// descriptions from `overlay` when given.
pub fn introspect_schema(
    db: &DatabaseHandle,
    overlay: Option<&DescriptionOverlay>,
) -> Result<DatabaseSchema> {
    let conn = db.open_read_only()?;
    let tables: Vec<String> = {
        let mut stmt = conn.prepare(
            "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid",
        )?;
        let rows = stmt.query_map([], |r| r.get::<_, String>(0))?;
        rows.collect::<std::result::Result<_, _>>()?
    };

    let mut columns: Vec<ColumnRecord> = Vec::new();
    // (from table, from column, to table, to column or None for target pk)
    let mut raw_fks: Vec<(String, String, String, Option<String>)> = Vec::new();
    for table in &tables {
        let mut stmt = conn.prepare(&format!("PRAGMA table_info({})", quote_ident(table)))?;
        let infos = stmt.query_map([], |r| {
            Ok((
                r.get::<_, String>(1)?,
                r.get::<_, Option<String>>(2)?.unwrap_or_default(),
                r.get::<_, i64>(5)? > 0,
            ))
        })?;
        for info in infos {
            let (name, ty, pk) = info?;
            let mut rec = ColumnRecord::new(&db.db_id, table, &name, &ty);
            rec.is_primary_key = pk;
            rec.sample_values = sample_values(&conn, table, &name)?;
            columns.push(rec);
        }
        let mut stmt = conn.prepare(&format!("PRAGMA foreign_key_list({})", quote_ident(table)))?;
        let fks = stmt.query_map([], |r| {
            Ok((
                r.get::<_, String>(2)?,
                r.get::<_, String>(3)?,
                r.get::<_, Option<String>>(4)?,
            ))
        })?;
        for fk in fks {
            let (to_table, from, to) = fk?;
            raw_fks.push((table.clone(), from, to_table, to));
        }
    }

    let find = |columns: &[ColumnRecord], table: &str, column: &str| {
        columns.iter().position(|c| {
            c.table_name.eq_ignore_ascii_case(table) && c.column_name.eq_ignore_ascii_case(column)
        })
    };
    let mut edges = Vec::new();
    for (from_t, from_c, to_t, to_c) in raw_fks {
        let to_c = match to_c {
            Some(c) => Some(c),
            None => columns
                .iter()
                .find(|c| c.table_name.eq_ignore_ascii_case(&to_t) && c.is_primary_key)
                .map(|c| c.column_name.clone()),
        };
        let (Some(a), Some(b)) = (
            find(&columns, &from_t, &from_c),
            to_c.as_deref().and_then(|c| find(&columns, &to_t, c)),
        ) else {
            log::warn!(
                "{}: foreign key {from_t}.{from_c} -> {to_t} does not resolve, skipped",
                db.db_id
            );
            continue;
        };
        let target = ForeignKeyTarget {
            table: columns[b].table_name.clone(),
            column: columns[b].column_name.clone(),
        };
        if !columns[a].foreign_keys.contains(&target) {
            columns[a].foreign_keys.push(target);
        }
        let edge = (columns[a].column_ref(), columns[b].column_ref());
        if !edges.contains(&edge) {
            edges.push(edge);
        }
    }

    if let Some(overlay) = overlay {
        for entry in &overlay.entries {
            match find(&columns, &entry.table, &entry.column) {
                Some(i) => {
                    if entry.column_description.is_some() {
                        columns[i].column_description = entry.column_description.clone();
                    }
                    if entry.value_description.is_some() {
                        columns[i].value_description = entry.value_description.clone();
                    }
                }
                None => log::warn!(
                    "{}: overlay entry {}.{} names no column, skipped",
                    db.db_id,
                    entry.table,
                    entry.column
                ),
            }
        }
    }

    Ok(DatabaseSchema {
        db_id: db.db_id.clone(),
        columns,
        foreign_key_edges: edges,
    })
}

pub(crate) fn normalize_newlines(s: &str) -> String {
    s.replace("\r\n", "\n").replace('\r', "\n")
}

/// Document text stored in the index for one column.
pub fn render_column_document(col: &ColumnRecord) -> String {
    let mut out = format!("table:{}\ncolumn:{}", col.table_name, col.column_name);
    if let Some(d) = &col.column_description {
        out.push_str("\ncolumn_desc:");
        out.push_str(d);
    }
    if let Some(v) = &col.value_description {
        out.push_str("\nvalue_desc:");
        out.push_str(v);
    }
    normalize_newlines(&out)
}

/// Query text embedded at retrieval time.
pub fn render_query_text(q: &QuestionRecord) -> Result<String> {
    q.validate()?;
    let mut out = format!("Instruct:{QUERY_INSTRUCTION}\nQuery:{}", q.question);
    if let Some(e) = q.evidence.as_deref().filter(|e| !e.is_empty()) {
        out.push(' ');
        out.push_str(e);
    }
    Ok(normalize_newlines(&out))
}

/// Index of column positions by `(table, column)`, lowercase.
pub(crate) fn column_lookup(schema: &DatabaseSchema) -> HashMap<(String, String), usize> {
    schema
        .columns
        .iter()
        .enumerate()
        .map(|(i, c)| {
            (
                (
                    c.table_name.to_ascii_lowercase(),
                    c.column_name.to_ascii_lowercase(),
                ),
                i,
            )
        })
        .collect()
}
