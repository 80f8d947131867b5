//! Deterministic fixture corpus: small SQLite databases plus questions that
//! name tables and columns mostly through synonyms.

use crate::error::{Error, Result};
use crate::schema::{
    write_corpus, DatabaseHandle, DescriptionOverlay, Difficulty, OverlayEntry, QuestionRecord,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rusqlite::Connection;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const OVERLAY_FILE: &str = "descriptions.json";
pub const CORPUS_FILE: &str = "questions.json";

/// `(name, synonym)`.
pub const TABLE_LEXICON: [(&str, &str); 30] = [
    ("customer", "client"),
    ("product", "merchandise"),
    ("invoice", "bill"),
    ("employee", "worker"),
    ("department", "division"),
    ("vehicle", "automobile"),
    ("driver", "chauffeur"),
    ("school", "academy"),
    ("student", "pupil"),
    ("course", "lesson"),
    ("hospital", "clinic"),
    ("doctor", "physician"),
    ("patient", "convalescent"),
    ("airport", "airfield"),
    ("flight", "voyage"),
    ("hotel", "inn"),
    ("guest", "visitor"),
    ("library", "archive"),
    ("book", "volume"),
    ("author", "writer"),
    ("team", "squad"),
    ("player", "athlete"),
    ("stadium", "arena"),
    ("city", "municipality"),
    ("country", "nation"),
    ("restaurant", "eatery"),
    ("recipe", "formula"),
    ("museum", "gallery"),
    ("artist", "painter"),
    ("warehouse", "depot"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Text,
    Integer,
    Real,
}

impl ColumnKind {
    fn sql_type(self) -> &'static str {
        match self {
            ColumnKind::Text => "TEXT",
            ColumnKind::Integer => "INTEGER",
            ColumnKind::Real => "REAL",
        }
    }
}

use ColumnKind::{Integer as I, Real as R, Text as S};

/// `(name, synonym, kind)`.
pub const COLUMN_LEXICON: [(&str, &str, ColumnKind); 60] = [
    ("label", "caption", S),
    ("price", "cost", R),
    ("quantity", "tally", I),
    ("rating", "grade", R),
    ("color", "hue", S),
    ("weight", "heaviness", R),
    ("height", "tallness", R),
    ("age", "seniority", I),
    ("salary", "wage", I),
    ("budget", "allowance", I),
    ("capacity", "headroom", I),
    ("region", "territory", S),
    ("status", "condition", S),
    ("category", "genre", S),
    ("email", "mailbox", S),
    ("phone", "telephone", S),
    ("address", "residence", S),
    ("founded", "established", I),
    ("revenue", "turnover", I),
    ("distance", "mileage", R),
    ("duration", "span", I),
    ("language", "tongue", S),
    ("brand", "marque", S),
    ("model", "variant", S),
    ("surname", "lastname", S),
    ("nickname", "alias", S),
    ("gender", "sex", S),
    ("nationality", "citizenship", S),
    ("discount", "markdown", R),
    ("tax", "levy", R),
    ("stock", "inventory", I),
    ("floor", "storey", I),
    ("room", "chamber", I),
    ("seats", "places", I),
    ("speed", "velocity", R),
    ("year", "annum", I),
    ("quarter", "trimester", I),
    ("rank", "standing", I),
    ("points", "marks", I),
    ("wins", "victories", I),
    ("losses", "defeats", I),
    ("elevation", "altitude", R),
    ("population", "inhabitants", I),
    ("area", "extent", R),
    ("currency", "money", S),
    ("motto", "slogan", S),
    ("website", "homepage", S),
    ("owner", "proprietor", S),
    ("manager", "supervisor", S),
    ("balance", "remainder", R),
    ("fee", "charge", R),
    ("deposit", "downpayment", R),
    ("temperature", "warmth", R),
    ("pages", "leaves", I),
    ("edition", "printing", I),
    ("cuisine", "fare", S),
    ("calories", "energy", I),
    ("medium", "material", S),
    ("style", "manner", S),
    ("shift", "rota", S),
];

const VALUES: [&str; 16] = [
    "amber", "birch", "cobalt", "delta", "ember", "fjord", "garnet", "harbor", "indigo", "jasper",
    "kestrel", "lumen", "mesa", "nimbus", "onyx", "prairie",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    /// Column descriptions and evidence present.
    Bird,
    /// Bare schema, no evidence.
    Spider,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub databases: usize,
    pub tables_per_db: usize,
    pub columns_per_table: usize,
    pub questions_per_db: usize,
    pub rows_per_table: usize,
    /// Chance that a mention uses the real name instead of the synonym.
    pub name_rate: f64,
    pub flavor: Flavor,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            databases: 20,
            tables_per_db: 5,
            columns_per_table: 8,
            questions_per_db: 10,
            rows_per_table: 12,
            name_rate: 0.25,
            flavor: Flavor::Bird,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub root: PathBuf,
    pub handles: Vec<DatabaseHandle>,
    pub questions: Vec<QuestionRecord>,
    pub overlays: BTreeMap<String, DescriptionOverlay>,
}

impl SyntheticCorpus {
    pub fn overlay(&self, db_id: &str) -> Option<&DescriptionOverlay> {
        self.overlays.get(db_id)
    }

    /// `(train, held_out)` under [`crate::eval::held_out_split`].
    pub fn split(&self) -> (Vec<QuestionRecord>, Vec<QuestionRecord>) {
        crate::eval::held_out_split(&self.questions)
    }
}

#[derive(Debug, Clone)]
struct Column {
    name: &'static str,
    synonym: &'static str,
    kind: ColumnKind,
    values: Vec<String>,
}

#[derive(Debug, Clone)]
struct Table {
    name: &'static str,
    synonym: &'static str,
    columns: Vec<Column>,
    /// Indexes of referenced tables, one `{name}_id` column each.
    refs: Vec<usize>,
}

fn literal(kind: ColumnKind, v: &str) -> String {
    match kind {
        ColumnKind::Text => format!("'{v}'"),
        _ => v.to_string(),
    }
}

fn random_value(rng: &mut ChaCha8Rng, kind: ColumnKind, pool: &[&str]) -> String {
    match kind {
        ColumnKind::Text => pool[rng.gen_range(0..pool.len())].to_string(),
        ColumnKind::Integer => rng.gen_range(1..=500).to_string(),
        ColumnKind::Real => format!("{:.2}", f64::from(rng.gen_range(4..=2000)) / 4.0),
    }
}

fn build_tables(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<Table> {
    let text: Vec<_> = COLUMN_LEXICON.iter().filter(|c| c.2 == S).collect();
    let numeric: Vec<_> = COLUMN_LEXICON.iter().filter(|c| c.2 != S).collect();
    let n_text = cfg.columns_per_table / 2;
    TABLE_LEXICON
        .choose_multiple(rng, cfg.tables_per_db)
        .enumerate()
        .map(|(ti, &(name, synonym))| {
            let mut cols: Vec<_> = text.choose_multiple(rng, n_text).copied().collect();
            cols.extend(
                numeric
                    .choose_multiple(rng, cfg.columns_per_table - n_text)
                    .copied(),
            );
            cols.shuffle(rng);
            let pool: Vec<&str> = VALUES.choose_multiple(rng, 5).copied().collect();
            let columns = cols
                .into_iter()
                .map(|&(name, synonym, kind)| Column {
                    name,
                    synonym,
                    kind,
                    values: (0..cfg.rows_per_table)
                        .map(|_| random_value(rng, kind, &pool))
                        .collect(),
                })
                .collect();
            let refs = if ti == 0 {
                vec![]
            } else {
                vec![rng.gen_range(0..ti)]
            };
            Table {
                name,
                synonym,
                columns,
                refs,
            }
        })
        .collect()
}

fn write_database(path: &Path, tables: &[Table], rows: usize) -> Result<()> {
    if path.exists() {
        std::fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    let mut conn = Connection::open(path)?;
    let tx = conn.transaction()?;
    for t in tables {
        let mut defs = vec!["id INTEGER PRIMARY KEY".to_string()];
        defs.extend(
            t.columns
                .iter()
                .map(|c| format!("{} {}", c.name, c.kind.sql_type())),
        );
        defs.extend(
            t.refs
                .iter()
                .map(|&r| format!("{}_id INTEGER", tables[r].name)),
        );
        defs.extend(
            t.refs
                .iter()
                .map(|&r| format!("FOREIGN KEY ({0}_id) REFERENCES {0}(id)", tables[r].name)),
        );
        tx.execute_batch(&format!("CREATE TABLE {} ({});", t.name, defs.join(", ")))?;
        for row in 0..rows {
            let mut vals = vec![(row + 1).to_string()];
            vals.extend(t.columns.iter().map(|c| literal(c.kind, &c.values[row])));
            vals.extend(t.refs.iter().map(|_| ((row * 7) % rows + 1).to_string()));
            tx.execute_batch(&format!(
                "INSERT INTO {} VALUES ({});",
                t.name,
                vals.join(", ")
            ))?;
        }
    }
    tx.commit()?;
    Ok(())
}

struct Mentions<'a> {
    rng: &'a mut ChaCha8Rng,
    name_rate: f64,
}

impl Mentions<'_> {
    fn pick(&mut self, name: &'static str, synonym: &'static str) -> &'static str {
        if self.rng.gen_bool(self.name_rate) {
            name
        } else {
            synonym
        }
    }
    fn table(&mut self, t: &Table) -> &'static str {
        self.pick(t.name, t.synonym)
    }
    fn column(&mut self, c: &Column) -> &'static str {
        self.pick(c.name, c.synonym)
    }
}

struct Draft {
    question: String,
    sql: String,
    evidence: Option<String>,
    difficulty: Difficulty,
}

fn pick_kind<'a>(
    rng: &mut ChaCha8Rng,
    t: &'a Table,
    want_text: bool,
    avoid: Option<&str>,
) -> &'a Column {
    let pool: Vec<&Column> = t
        .columns
        .iter()
        .filter(|c| (c.kind == S) == want_text && Some(c.name) != avoid)
        .collect();
    pool.choose(rng).copied().unwrap_or(&t.columns[0])
}

fn draft_question(
    template: usize,
    tables: &[Table],
    rng: &mut ChaCha8Rng,
    name_rate: f64,
) -> Draft {
    let ti = rng.gen_range(0..tables.len());
    let t = &tables[ti];
    let mut rng2 = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut m = Mentions {
        rng: &mut rng2,
        name_rate,
    };
    match template {
        0 => {
            let c2 = pick_kind(rng, t, true, None);
            let text = rng.gen_bool(0.5);
            let c1 = pick_kind(rng, t, text, Some(c2.name));
            let v = c2.values.choose(rng).expect("rows");
            Draft {
                question: format!(
                    "What is the {} of the {} whose {} is {v}?",
                    m.column(c1),
                    m.table(t),
                    m.column(c2)
                ),
                sql: format!(
                    "SELECT {} FROM {} WHERE {} = '{v}'",
                    c1.name, t.name, c2.name
                ),
                evidence: Some(format!("{v} is a stored value")),
                difficulty: Difficulty::Simple,
            }
        }
        1 => {
            let c = pick_kind(rng, t, true, None);
            let v = c.values.choose(rng).expect("rows");
            Draft {
                question: format!("How many {} have {} equal to {v}?", m.table(t), m.column(c)),
                sql: format!("SELECT COUNT(*) FROM {} WHERE {} = '{v}'", t.name, c.name),
                evidence: Some("count every matching row".into()),
                difficulty: Difficulty::Simple,
            }
        }
        2 => {
            let c1 = pick_kind(rng, t, true, None);
            let c2 = pick_kind(rng, t, false, None);
            Draft {
                question: format!(
                    "List the {} and {} of every {}.",
                    m.column(c1),
                    m.column(c2),
                    m.table(t)
                ),
                sql: format!("SELECT {}, {} FROM {}", c1.name, c2.name, t.name),
                evidence: None,
                difficulty: Difficulty::Simple,
            }
        }
        3 => {
            let with_ref: Vec<usize> = (0..tables.len())
                .filter(|&i| !tables[i].refs.is_empty())
                .collect();
            let t1 = &tables[*with_ref.choose(rng).expect("tables with references")];
            let t2 = &tables[t1.refs[0]];
            let (a, b) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
            let c1 = pick_kind(rng, t1, a, None);
            let c2 = pick_kind(rng, t2, b, None);
            Draft {
                question: format!(
                    "Show the {} of each {} together with the {} of its {}.",
                    m.column(c1),
                    m.table(t1),
                    m.column(c2),
                    m.table(t2)
                ),
                sql: format!(
                    "SELECT T1.{}, T2.{} FROM {} AS T1 JOIN {} AS T2 ON T1.{}_id = T2.id",
                    c1.name, c2.name, t1.name, t2.name, t2.name
                ),
                evidence: Some("pair each row with the row it references".into()),
                difficulty: Difficulty::Moderate,
            }
        }
        4 => {
            let n = pick_kind(rng, t, false, None);
            let g = pick_kind(rng, t, true, None);
            Draft {
                question: format!(
                    "What is the average {} of {} for each {}?",
                    m.column(n),
                    m.table(t),
                    m.column(g)
                ),
                sql: format!(
                    "SELECT {0}, AVG({1}) FROM {2} GROUP BY {0}",
                    g.name, n.name, t.name
                ),
                evidence: Some("average means the arithmetic mean".into()),
                difficulty: Difficulty::Moderate,
            }
        }
        _ => {
            let n = pick_kind(rng, t, false, None);
            let c = pick_kind(rng, t, true, None);
            Draft {
                question: format!(
                    "Which {} has the highest {}? Give its {}.",
                    m.table(t),
                    m.column(n),
                    m.column(c)
                ),
                sql: format!(
                    "SELECT {} FROM {} ORDER BY {} DESC LIMIT 1",
                    c.name, t.name, n.name
                ),
                evidence: Some("highest refers to the maximum".into()),
                difficulty: Difficulty::Challenging,
            }
        }
    }
}

pub const TEMPLATES: usize = 6;

/// Writes `<root>/<db>/<db>.sqlite` for every database, an overlay per
/// database for the bird flavor, and `<root>/questions.json`.
pub fn generate(root: impl AsRef<Path>, cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.tables_per_db < 2 || cfg.tables_per_db > TABLE_LEXICON.len() {
        return Err(Error::Validation(format!(
            "tables_per_db must be in 2..={}",
            TABLE_LEXICON.len()
        )));
    }
    if cfg.columns_per_table < 2 || cfg.rows_per_table == 0 || !(0.0..=1.0).contains(&cfg.name_rate)
    {
        return Err(Error::Validation("invalid synthetic corpus shape".into()));
    }
    let root = root.as_ref().to_path_buf();
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut handles = Vec::new();
    let mut questions = Vec::new();
    let mut overlays = BTreeMap::new();
    for d in 0..cfg.databases {
        let db_id = format!("synth_{d:02}");
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(d as u64));
        let tables = build_tables(cfg, &mut rng);
        let dir = root.join(&db_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{db_id}.sqlite"));
        write_database(&path, &tables, cfg.rows_per_table)?;
        handles.push(DatabaseHandle::new(&db_id, path));
        if cfg.flavor == Flavor::Bird {
            let entries = tables
                .iter()
                .flat_map(|t| {
                    t.columns.iter().map(|c| OverlayEntry {
                        table: t.name.into(),
                        column: c.name.into(),
                        column_description: Some(format!("the {} of the {}", c.name, t.name)),
                        value_description: None,
                    })
                })
                .collect();
            let overlay = DescriptionOverlay { entries };
            overlay.save(dir.join(OVERLAY_FILE))?;
            overlays.insert(db_id.clone(), overlay);
        }
        for qi in 0..cfg.questions_per_db {
            let draft = draft_question((qi + d) % TEMPLATES, &tables, &mut rng, cfg.name_rate);
            let mut q = QuestionRecord::new(format!("{db_id}_q{qi:02}"), &db_id, draft.question)
                .with_gold(draft.sql);
            q.difficulty = Some(draft.difficulty);
            if cfg.flavor == Flavor::Bird {
                q.evidence = draft.evidence;
            }
            questions.push(q);
        }
    }
    write_corpus(root.join(CORPUS_FILE), &questions)?;
    Ok(SyntheticCorpus {
        root,
        handles,
        questions,
        overlays,
    })
}
