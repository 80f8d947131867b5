use crate::catalog::{load_overlay, overlay_path, IndexStatus, Workspace};
use crate::config::ServiceConfig;
use crate::server::{serve, AppState};
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nl2sql_core::eval::{
    error_series, evaluate_predictions, evaluate_traces, held_out_split, iteration_series,
    render_report, subsample_per_database, SweepData, SWEEP_KS, SWEEP_MARGINS, SWEEP_NEGATIVES,
};
use nl2sql_core::executor::ComparisonOptions;
use nl2sql_core::orchestrator::{answer_question, gold_results, run_batch, Pipeline};
use nl2sql_core::preference::{build_preference_dataset, export_pairs, PairBuildOptions};
use nl2sql_core::prompt::{build_sft_dataset, write_jsonl};
use nl2sql_core::retriever::{resolve_gold_columns, retrieve_columns};
use nl2sql_core::schema::{load_corpus, DescriptionOverlay, QuestionRecord};
use nl2sql_core::synthetic::{generate, Flavor, SyntheticConfig, CORPUS_FILE};
use nl2sql_core::train::{
    build_training_examples, format_loss_trace, save_head, train_projection, TrainerConfig,
};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Parser)]
#[command(
    name = "nl2sql",
    version,
    about = "Schema-retrieval text-to-SQL engine"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true, env = "NL2SQL_CONFIG")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (overrides the configuration).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub db_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub index_dir: Option<PathBuf>,
    /// Trained projection head.
    #[arg(long, global = true)]
    pub head: Option<PathBuf>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FlavorArg {
    Bird,
    Spider,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SweepParam {
    K,
    Margin,
    Negatives,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` trainer configuration.
    #[arg(long)]
    pub trainer_config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prepare databases: generate a synthetic corpus or convert description CSVs, then summarize.
    Ingest {
        /// Generate this many synthetic databases into the database directory.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 10)]
        questions_per_db: usize,
        #[arg(long, value_enum, default_value = "bird")]
        flavor: FlavorArg,
        /// Directory of per-table description CSVs to attach to `--db`.
        #[arg(long, requires = "db")]
        bird_csv: Option<PathBuf>,
        #[arg(long)]
        db: Option<String>,
        /// Question corpus to check against the databases.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Build and persist one vector index per database.
    IndexBuild {
        #[arg(long)]
        db: Option<String>,
        /// Rebuild even when the stored index is current.
        #[arg(long)]
        force: bool,
    },
    /// Train the projection head on a corpus with gold SQL.
    TrainRetriever {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Rank the columns of a database for a question.
    Retrieve {
        #[arg(long)]
        db: String,
        #[arg(long)]
        question: String,
        #[arg(long)]
        evidence: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Answer one question with the self-correcting pipeline.
    Ask {
        #[arg(long)]
        db: String,
        #[arg(long)]
        question: String,
        #[arg(long)]
        evidence: Option<String>,
        #[arg(long)]
        max_iterations: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Run (or score) a corpus and write an evaluation report.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        /// JSON object of question id to SQL; skips generation.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Trace archive (JSON lines).
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        max_iterations: Option<usize>,
        /// Put every column in the prompt.
        #[arg(long)]
        full_schema: bool,
        /// Evaluate a seeded sample of this fraction of each database's questions.
        #[arg(long)]
        subsample: Option<f64>,
        /// Write plot-ready iteration and error series here.
        #[arg(long)]
        series_dir: Option<PathBuf>,
    },
    /// Write first-pass fine-tuning records (JSON lines).
    BuildSft {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample candidates, label them by execution and write preference pairs.
    BuildDpo {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = nl2sql_core::generator::DEFAULT_CANDIDATES)]
        candidates: usize,
    },
    /// Retrieval sweeps over k, the margin or the negative count.
    Sweep {
        /// Defaults to a freshly generated synthetic corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
}

pub fn load_config(g: &GlobalArgs) -> anyhow::Result<ServiceConfig> {
    let mut cfg = match &g.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = &g.db_dir {
        cfg.db_dir = d.clone();
    }
    if let Some(d) = &g.index_dir {
        cfg.index_dir = d.clone();
    }
    if let Some(h) = &g.head {
        cfg.head = Some(h.clone());
    }
    if let Some(k) = g.k {
        cfg.k = k;
    }
    Ok(cfg)
}

fn trainer_config(args: &TrainArgs, seed: u64) -> anyhow::Result<TrainerConfig> {
    let mut cfg = match &args.trainer_config {
        Some(p) => TrainerConfig::load(p)?,
        None => TrainerConfig::default(),
    };
    cfg.seed = seed;
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    if let Some(v) = args.margin {
        cfg.margin = v;
    }
    if let Some(v) = args.negatives {
        cfg.negatives = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a corpus and checks that every question names a known database.
fn corpus(ws: &Workspace, path: &Path) -> anyhow::Result<Vec<QuestionRecord>> {
    let qs = load_corpus(path)?;
    let known = ws.db_map();
    let missing: Vec<&str> = qs
        .iter()
        .filter(|q| !known.contains_key(&q.db_id))
        .map(|q| q.db_id.as_str())
        .collect();
    if !missing.is_empty() {
        bail!(
            "corpus references unknown databases: {}",
            missing.join(", ")
        );
    }
    Ok(qs)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Ingest {
            synthetic,
            questions_per_db,
            flavor,
            bird_csv,
            db,
            corpus: corpus_path,
        } => {
            if let Some(n) = synthetic {
                let sc = SyntheticConfig {
                    databases: n,
                    questions_per_db,
                    flavor: match flavor {
                        FlavorArg::Bird => Flavor::Bird,
                        FlavorArg::Spider => Flavor::Spider,
                    },
                    seed: cfg.seed,
                    ..SyntheticConfig::default()
                };
                let c = generate(&cfg.db_dir, &sc)?;
                println!(
                    "generated {} databases and {} questions under {}",
                    c.handles.len(),
                    c.questions.len(),
                    cfg.db_dir.display()
                );
            }
            let ws = Workspace::open(cfg)?;
            if let (Some(dir), Some(id)) = (bird_csv, db.as_deref()) {
                let h = ws.handle(id)?;
                let overlay = DescriptionOverlay::from_bird_csv_dir(&dir)?;
                let path = overlay_path(h);
                overlay.save(&path)?;
                println!(
                    "{id}: {} descriptions written to {}",
                    overlay.entries.len(),
                    path.display()
                );
            }
            println!("db_id\ttables\tcolumns\tforeign_keys\tdescriptions");
            for h in ws.selected(db.as_deref())? {
                let s = ws.schema(h)?;
                let described = load_overlay(h)?.is_some();
                println!(
                    "{}\t{}\t{}\t{}\t{}",
                    h.db_id,
                    s.tables().len(),
                    s.columns.len(),
                    s.foreign_key_edges.len(),
                    if described { "yes" } else { "no" }
                );
            }
            if let Some(p) = corpus_path {
                let qs = corpus(&ws, &p)?;
                let gold = qs.iter().filter(|q| q.gold_sql.is_some()).count();
                println!("{} questions, {gold} with gold SQL", qs.len());
            }
        }
        Command::IndexBuild { db, force } => {
            let ws = Workspace::open(cfg)?;
            for h in ws.selected(db.as_deref())? {
                match ws.build_index(h, force)? {
                    IndexStatus::Written => println!("{}: written", h.db_id),
                    IndexStatus::Unchanged => {
                        println!("{}: fingerprint-identical, unchanged", h.db_id)
                    }
                }
            }
        }
        Command::TrainRetriever {
            corpus: p,
            out,
            train,
        } => {
            let tc = trainer_config(&train, cfg.seed)?;
            let ws = Workspace::open(cfg)?;
            let qs = corpus(&ws, &p)?;
            let schemas = ws.schemas()?;
            let gold = resolve_gold_columns(&qs, &schemas, &ws.db_map(), &BTreeMap::new());
            let examples =
                build_training_examples(&qs, &schemas, &gold, ws.provider.as_ref(), tc.negatives)?;
            let outcome = train_projection::<f64>(&examples, ws.provider.as_ref(), &tc)?;
            save_head(&outcome.head, &out)?;
            println!("{} examples, {} steps", examples.len(), outcome.steps);
            println!("loss {}", format_loss_trace(&outcome.loss_trace));
            println!("head written to {}", out.display());
        }
        Command::Retrieve {
            db,
            question,
            evidence,
            json,
        } => {
            let ws = Workspace::open(cfg)?;
            let bundle = ws.bundle(ws.handle(&db)?)?;
            let mut q = QuestionRecord::new("cli", &db, question);
            q.evidence = evidence;
            q.validate()?;
            let r = retrieve_columns(
                &q,
                &bundle.index,
                ws.provider.as_ref(),
                ws.head.as_ref(),
                ws.cfg.k,
            )?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                for (i, s) in r.ranked_columns.iter().enumerate() {
                    println!(
                        "{}\t{}.{}\t{:.6}",
                        i + 1,
                        s.column.table,
                        s.column.column,
                        s.score
                    );
                }
            }
        }
        Command::Ask {
            db,
            question,
            evidence,
            max_iterations,
            json,
        } => {
            let generator = cfg.generator.build()?;
            let ws = Workspace::open(cfg)?;
            let bundle = ws.bundle(ws.handle(&db)?)?;
            let mut q = QuestionRecord::new("cli", &db, question);
            q.evidence = evidence;
            q.validate()?;
            let mut options = ws.cfg.pipeline_options();
            if let Some(m) = max_iterations {
                options.max_iterations = m;
            }
            let pipeline = Pipeline {
                provider: ws.provider.as_ref(),
                head: ws.head.as_ref(),
                generator: generator.as_ref(),
                options,
            };
            let trace = answer_question(&q, &bundle, &pipeline)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&trace)?);
            } else {
                for (i, a) in trace.attempts.iter().enumerate() {
                    let status = match &a.outcome.error_message {
                        None => "ok".to_string(),
                        Some(m) => format!(
                            "{}: {m}",
                            a.outcome.error_category.map_or("other", |c| c.as_str())
                        ),
                    };
                    println!("attempt {i}\t{status}\t{}", a.sql);
                }
                println!(
                    "corrections {}\texecutable {}",
                    trace.iterations_used, trace.executable
                );
                println!("{}", trace.final_sql);
            }
        }
        Command::Evaluate {
            corpus: p,
            predictions,
            out,
            traces,
            max_iterations,
            full_schema,
            subsample,
            series_dir,
        } => {
            let generator = match predictions {
                None => Some(cfg.generator.build()?),
                Some(_) => None,
            };
            let ws = Workspace::open(cfg)?;
            let mut qs = corpus(&ws, &p)?;
            if let Some(f) = subsample {
                qs = subsample_per_database(&qs, f, ws.cfg.seed)?;
                println!("evaluating a sample of {} questions", qs.len());
            }
            let limits = ws.cfg.limits();
            let report = match (predictions, generator) {
                (Some(path), _) => {
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    let mut preds: BTreeMap<String, String> = serde_json::from_str(&text)
                        .with_context(|| format!("parsing {}", path.display()))?;
                    if subsample.is_some() {
                        preds.retain(|id, _| qs.iter().any(|q| &q.question_id == id));
                    }
                    evaluate_predictions(
                        &preds,
                        &qs,
                        &ws.db_map(),
                        &limits,
                        ComparisonOptions::default(),
                    )?
                }
                (None, Some(generator)) => {
                    let catalog = ws.catalog(None)?;
                    let mut options = ws.cfg.pipeline_options();
                    options.full_schema = full_schema;
                    if let Some(m) = max_iterations {
                        options.max_iterations = m;
                    }
                    let pipeline = Pipeline {
                        provider: ws.provider.as_ref(),
                        head: ws.head.as_ref(),
                        generator: generator.as_ref(),
                        options,
                    };
                    let batch = run_batch(&qs, &catalog, &pipeline);
                    for e in &batch.errors {
                        eprintln!("question {}: {}", e.question_id, e.message);
                    }
                    if let Some(t) = &traces {
                        write_jsonl(t, &batch.traces)?;
                    }
                    let schemas = catalog
                        .iter()
                        .map(|(k, b)| (k.clone(), b.schema.clone()))
                        .collect();
                    let gold_cols =
                        resolve_gold_columns(&qs, &schemas, &ws.db_map(), &BTreeMap::new());
                    let golds = gold_results(&qs, &catalog, &limits, options.parallelism);
                    let graded: Vec<QuestionRecord> = qs
                        .iter()
                        .filter(|q| batch.traces.iter().any(|t| t.question_id == q.question_id))
                        .cloned()
                        .collect();
                    evaluate_traces(
                        &batch.traces,
                        &graded,
                        &golds,
                        Some(&gold_cols),
                        options.max_iterations,
                        ComparisonOptions::default(),
                    )?
                }
                (None, None) => unreachable!("a generator is built when predictions are absent"),
            };
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)
                .with_context(|| format!("writing {}", out.display()))?;
            if let Some(dir) = series_dir {
                std::fs::create_dir_all(&dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
                for (name, text) in [
                    ("iterations.tsv", iteration_series(&report)),
                    ("errors.tsv", error_series(&report)),
                ] {
                    let path = dir.join(name);
                    std::fs::write(&path, text)
                        .with_context(|| format!("writing {}", path.display()))?;
                }
            }
            print!("{}", render_report(&report));
            println!("report written to {}", out.display());
        }
        Command::BuildSft { corpus: p, out } => {
            let ws = Workspace::open(cfg)?;
            let qs = corpus(&ws, &p)?;
            let schemas = ws.schemas()?;
            let gold = resolve_gold_columns(&qs, &schemas, &ws.db_map(), &BTreeMap::new());
            let records = build_sft_dataset(&qs, &schemas, &gold, ws.cfg.k, ws.cfg.seed)?;
            write_jsonl(&out, &records)?;
            println!("{} records written to {}", records.len(), out.display());
        }
        Command::BuildDpo {
            corpus: p,
            out,
            candidates,
        } => {
            let generator = cfg.generator.build()?;
            let ws = Workspace::open(cfg)?;
            let qs = corpus(&ws, &p)?;
            let schemas = ws.schemas()?;
            let dbs = ws.db_map();
            let gold = resolve_gold_columns(&qs, &schemas, &dbs, &BTreeMap::new());
            let opts = PairBuildOptions {
                candidates,
                k: ws.cfg.k,
                seed: ws.cfg.seed,
                limits: ws.cfg.limits(),
                parallelism: ws.cfg.workers,
            };
            let data =
                build_preference_dataset(&qs, &schemas, &dbs, &gold, generator.as_ref(), &opts);
            export_pairs(&out, &data.pairs)?;
            println!(
                "{} pairs written to {}, {} questions skipped",
                data.pairs.len(),
                out.display(),
                data.skipped.len()
            );
        }
        Command::Sweep {
            corpus: p,
            param,
            out,
            train,
        } => {
            let tc = trainer_config(&train, cfg.seed)?;
            let (cfg, p) = match p {
                Some(p) => (cfg, p),
                None => {
                    let root = std::env::temp_dir().join(format!("nl2sql-sweep-{}", cfg.seed));
                    let sc = SyntheticConfig {
                        seed: cfg.seed,
                        ..SyntheticConfig::default()
                    };
                    let c = generate(&root, &sc)?;
                    eprintln!("sweeping the synthetic corpus under {}", root.display());
                    (
                        ServiceConfig {
                            db_dir: c.root,
                            ..cfg
                        },
                        root.join(CORPUS_FILE),
                    )
                }
            };
            let ws = Workspace::open(cfg)?;
            let qs = corpus(&ws, &p)?;
            let schemas = ws.schemas()?;
            let gold = resolve_gold_columns(&qs, &schemas, &ws.db_map(), &BTreeMap::new());
            let (train_qs, eval_qs) = held_out_split(&qs);
            let data = SweepData {
                train: &train_qs,
                eval: &eval_qs,
                schemas: &schemas,
                gold: &gold,
                provider: ws.provider.as_ref(),
                k: ws.cfg.k,
            };
            let table = match param {
                SweepParam::K => data.k_sweep(ws.head.as_ref(), &SWEEP_KS)?,
                SweepParam::Margin => data.margin_sweep(&tc, &SWEEP_MARGINS)?,
                SweepParam::Negatives => data.negatives_sweep(&tc, &SWEEP_NEGATIVES)?,
            };
            let text = table.render();
            print!("{text}");
            if let Some(o) = out {
                std::fs::write(&o, &text).with_context(|| format!("writing {}", o.display()))?;
            }
        }
        Command::Serve { listen } => {
            let mut cfg = cfg;
            if let Some(l) = listen {
                cfg.listen = l;
            }
            cfg.validate_for_service()?;
            let generator = cfg.generator.build()?;
            let addr = cfg.listen_addr()?;
            let workers = cfg.workers;
            let ws = Workspace::open(cfg)?;
            let catalog = ws.catalog(None)?;
            let options = ws.cfg.pipeline_options();
            let row_cap = ws.cfg.row_cap;
            let state = Arc::new(AppState::new(
                catalog,
                ws.provider,
                ws.head,
                generator,
                options,
                row_cap,
            ));
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .max_blocking_threads(workers)
                .build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                println!("listening on {}", listener.local_addr()?);
                serve(listener, state).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}
