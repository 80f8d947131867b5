use nl2sql_core::embedding::{EmbeddingProvider, HashingEmbedder};
use nl2sql_core::eval::evaluate_traces;
use nl2sql_core::executor::ComparisonOptions;
use nl2sql_core::generator::{KeyedScriptedGenerator, ScriptedGenerator};
use nl2sql_core::index::{build_index, index_fingerprint, SchemaIndex};
use nl2sql_core::orchestrator::{
    gold_results, run_batch, Catalog, DatabaseBundle, Pipeline, PipelineOptions,
};
use nl2sql_core::retriever::{resolve_gold_columns, retrieve_columns};
use nl2sql_core::synthetic::{generate, SyntheticConfig};
use nl2sql_core::train::{
    build_training_examples, load_head, save_head, train_projection, TrainerConfig,
};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

struct Counting {
    inner: HashingEmbedder,
    calls: AtomicUsize,
}

impl EmbeddingProvider for Counting {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn embed_raw(&self, texts: &[String]) -> nl2sql_core::Result<Vec<Vec<f64>>> {
        self.calls.fetch_add(texts.len(), Ordering::SeqCst);
        self.inner.embed_raw(texts)
    }
}

fn small_config() -> SyntheticConfig {
    SyntheticConfig {
        databases: 4,
        questions_per_db: 8,
        seed: 11,
        ..SyntheticConfig::default()
    }
}

#[test]
fn end_to_end_on_synthetic_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let mut corpus = generate(dir.path(), &small_config()).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    corpus.questions.retain(|q| seen.insert(q.question.clone()));
    let provider = Counting {
        inner: HashingEmbedder::new(128),
        calls: AtomicUsize::new(0),
    };
    let catalog: Catalog = corpus
        .handles
        .iter()
        .map(|h| {
            let b =
                DatabaseBundle::open(h.clone(), corpus.overlay(&h.db_id), &provider, None).unwrap();
            (h.db_id.clone(), b)
        })
        .collect();

    // persisted indexes load back identical and give identical rankings
    for b in catalog.values() {
        let path = dir.path().join(format!("{}.idx", b.schema.db_id));
        b.index.persist(&path).unwrap();
        let expected = index_fingerprint(&provider, None::<&nl2sql_core::Head>);
        let (loaded, stale) = SchemaIndex::<f64>::load_expecting(&path, &expected).unwrap();
        assert!(!stale);
        assert_eq!(loaded, b.index);
        let q = corpus
            .questions
            .iter()
            .find(|q| q.db_id == b.schema.db_id)
            .unwrap();
        let a = retrieve_columns(q, &b.index, &provider, None, 25).unwrap();
        let c = retrieve_columns(q, &loaded, &provider, None, 25).unwrap();
        assert_eq!(a, c);
        let (_, stale) = SchemaIndex::<f64>::load_expecting(&path, "other-model").unwrap();
        assert!(stale);
    }

    // a generator that always fails exercises every correction round
    let scripts: BTreeMap<String, Vec<String>> = corpus
        .questions
        .iter()
        .map(|q| (q.question.clone(), vec!["SELEC".to_string(); 4]))
        .collect();
    let generator = KeyedScriptedGenerator::new(scripts).unwrap();
    provider.calls.store(0, Ordering::SeqCst);
    let pipeline = Pipeline {
        provider: &provider,
        head: None,
        generator: &generator,
        options: PipelineOptions {
            max_iterations: 3,
            parallelism: 2,
            ..PipelineOptions::default()
        },
    };
    let out = run_batch(&corpus.questions, &catalog, &pipeline);
    assert_eq!(
        provider.calls.load(Ordering::SeqCst),
        corpus.questions.len()
    );
    assert!(out.errors.is_empty());
    assert_eq!(out.traces.len(), corpus.questions.len());
    for t in &out.traces {
        assert_eq!(t.attempts.len(), 4);
        assert!(!t.executable);
        assert_eq!(t.iterations_used, 3);
        let first = &t.first().prompt;
        assert!(t
            .attempts
            .iter()
            .all(|a| a.prompt.starts_with(first.as_str())));
        assert!(t.attempts[1..]
            .iter()
            .all(|a| a.prompt.contains("### Error Message")));
    }
    assert_eq!(out.summary.executable, 0);
    assert_eq!(out.summary.ex, Some(0.0));

    // gold SQL answers every question
    let scripts: BTreeMap<String, Vec<String>> = corpus
        .questions
        .iter()
        .map(|q| (q.question.clone(), vec![q.gold_sql.clone().unwrap()]))
        .collect();
    let generator = KeyedScriptedGenerator::new(scripts).unwrap();
    let pipeline = Pipeline {
        generator: &generator,
        ..pipeline
    };
    let out = run_batch(&corpus.questions, &catalog, &pipeline);
    assert_eq!(out.summary.ex, Some(1.0));
    assert!(out.traces.iter().all(|t| t.iterations_used == 0));
    let golds = gold_results(&corpus.questions, &catalog, &Default::default(), 2);
    let report = evaluate_traces(
        &out.traces,
        &corpus.questions,
        &golds,
        None,
        3,
        ComparisonOptions::default(),
    )
    .unwrap();
    assert_eq!(report.ex_overall, 1.0);
    assert_eq!(report.iteration_gains, vec![1.0; 4]);
}

#[test]
fn unknown_database_is_reported_per_question() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(
        dir.path(),
        &SyntheticConfig {
            databases: 1,
            questions_per_db: 2,
            ..small_config()
        },
    )
    .unwrap();
    let p = HashingEmbedder::new(32);
    let catalog: Catalog = corpus
        .handles
        .iter()
        .map(|h| {
            (
                h.db_id.clone(),
                DatabaseBundle::open(h.clone(), corpus.overlay(&h.db_id), &p, None).unwrap(),
            )
        })
        .collect();
    let mut questions = corpus.questions.clone();
    questions[0].db_id = "missing".into();
    let generator = ScriptedGenerator::new(["SELECT 1"; 8]).unwrap();
    let pipeline = Pipeline {
        provider: &p,
        head: None,
        generator: &generator,
        options: PipelineOptions {
            parallelism: 1,
            ..PipelineOptions::default()
        },
    };
    let out = run_batch(&questions, &catalog, &pipeline);
    assert_eq!(out.errors.len(), 1);
    assert_eq!(out.errors[0].question_id, questions[0].question_id);
    assert_eq!(out.traces.len(), 1);
}

#[test]
fn trained_head_persists_and_reindexes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(dir.path(), &small_config()).unwrap();
    let p = HashingEmbedder::new(64);
    let schemas: BTreeMap<_, _> = corpus
        .handles
        .iter()
        .map(|h| {
            let s = nl2sql_core::schema::introspect_schema(h, corpus.overlay(&h.db_id)).unwrap();
            (h.db_id.clone(), s)
        })
        .collect();
    let dbs: BTreeMap<_, _> = corpus
        .handles
        .iter()
        .map(|h| (h.db_id.clone(), h.clone()))
        .collect();
    let (train, _) = corpus.split();
    let gold = resolve_gold_columns(&train, &schemas, &dbs, &BTreeMap::new());
    assert_eq!(gold.len(), train.len());
    let examples = build_training_examples(&train, &schemas, &gold, &p, 8).unwrap();
    let cfg = TrainerConfig {
        lr: 0.01,
        epochs: 2,
        ..TrainerConfig::default()
    };
    let outcome = train_projection::<f64>(&examples, &p, &cfg).unwrap();
    assert_eq!(outcome.loss_trace.len(), 3);
    assert!(outcome.loss_trace[2] < outcome.loss_trace[0]);

    let path = dir.path().join("head.bin");
    save_head(&outcome.head, &path).unwrap();
    let head = load_head::<f64>(&path).unwrap();
    assert_eq!(head, outcome.head);

    let schema = &schemas[&corpus.handles[0].db_id];
    let plain = build_index::<f64>(schema, &p, None).unwrap();
    let tuned = build_index(schema, &p, Some(&head)).unwrap();
    assert_ne!(plain.fingerprint(), tuned.fingerprint());
    assert_eq!(tuned.fingerprint(), index_fingerprint(&p, Some(&head)));

    let again = train_projection::<f64>(&examples, &p, &cfg).unwrap();
    assert_eq!(again.head, outcome.head);
}
