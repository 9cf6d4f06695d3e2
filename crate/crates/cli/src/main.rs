use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use kinject::ablation::ablate;
use kinject::corpus::{load_corpus, Split};
use kinject::metrics::MetricReport;
use kinject::model::Model;
use kinject::pipeline::{generate_split, generations_to_jsonl, read_generations, train_pipeline, Assets, Mode, PipelineConfig};
use kinject::retrieval::{topk, EmbeddingStore, Encoder, SyntheticEncoder};
use kinject::synth::{knowledge_corpus, toy_corpus, KnowledgeCorpusConfig};
use kinject::triplet::{extract_triplets, render_prompt, triplet_to_json};
use kinject::wck::compute_tfidf;
use kinject::ErrorKind;
use serde_json::json;

#[derive(Parser)]
#[command(name = "kinject", version, about = "Knowledge-injected report generation")]
struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a JSON-lines corpus, assign splits and write the normalized corpus.
    Ingest {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Compute TF-IDF scores over the corpus.
    Tfidf {
        /// Print the table (or one report's scores) as JSON.
        #[arg(long)]
        dump: bool,
        #[arg(long)]
        report_id: Option<String>,
    },
    /// Build or query the retrieval index.
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Rule-based triplet extraction.
    Extract {
        #[arg(long)]
        report_id: Option<String>,
        /// Print rendered prompts instead of triplets.
        #[arg(long)]
        dump_prompts: bool,
    },
    /// Train on the train split; writes `train_log.csv` and `checkpoint/`.
    Train,
    /// Generate reports for a split with a trained checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score generated reports against references.
    Evaluate {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Train and evaluate the five knowledge variants for every seed.
    Ablate,
    /// Write a synthetic corpus (and embeddings for the knowledge corpus).
    Synth {
        #[arg(long, value_enum, default_value_t = SynthKind::Knowledge)]
        kind: SynthKind,
        #[arg(long, default_value_t = 240)]
        n: usize,
    },
}

#[derive(Subcommand)]
enum IndexAction {
    /// Embed the train split and write `index.kift` plus its id sidecar.
    Build,
    Query {
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Index file; defaults to `<out>/index.kift`.
        #[arg(long)]
        index: Option<PathBuf>,
        /// Free-text query, encoded with the synthetic text encoder.
        #[arg(long, conflicts_with = "report_id")]
        text: Option<String>,
        /// Query with a corpus report, excluding it from the results.
        #[arg(long)]
        report_id: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Toy,
    Knowledge,
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let out = cfg.paths.out.clone();
    log::info!("config hash {}", cfg.hash());
    match cli.command {
        Command::Ingest { input } => {
            let path = input.or(cfg.paths.corpus.clone()).context("no corpus: pass --input or set paths.corpus")?;
            let corpus = load_corpus(&path, &cfg.tokenizer)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            corpus.save(&out.join("corpus.jsonl"))?;
            let count = |s| corpus.split(s).count();
            println!(
                "{}",
                json!({
                    "reports": corpus.len(),
                    "train": count(Split::Train),
                    "val": count(Split::Val),
                    "test": count(Split::Test),
                    "vocab": corpus.vocab().len(),
                })
            );
        }
        Command::Tfidf { dump, report_id } => {
            let path = cfg.paths.corpus.as_deref().context("paths.corpus is not set")?;
            let corpus = load_corpus(path, &cfg.tokenizer)?;
            let table = compute_tfidf(&corpus)?;
            write(&out.join("tfidf.json"), table.to_json())?;
            match (dump, report_id) {
                (true, Some(id)) => println!("{}", serde_json::to_string_pretty(table.report(&id)?)?),
                (true, None) => println!("{}", table.to_json()),
                (false, _) => println!("{}", json!({"reports": table.n_reports, "words": table.doc_freq.len()})),
            }
        }
        Command::Index { action: IndexAction::Build } => {
            let assets = Assets::load(&cfg)?;
            let path = out.join("index.kift");
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            assets.train_store.save(&path)?;
            println!("{}", json!({"index": path, "rows": assets.train_store.len(), "dim": assets.train_store.dim()}));
        }
        Command::Index {
            action: IndexAction::Query { k, index, text, report_id },
        } => {
            let path = index.unwrap_or_else(|| out.join("index.kift"));
            let store = EmbeddingStore::load(&path)?;
            let (query, exclude) = match (text, report_id) {
                (Some(t), _) => (SyntheticEncoder { dim: store.dim() }.encode_text(&t)?, None),
                (None, Some(id)) => {
                    let assets = Assets::load(&cfg)?;
                    let report = assets.corpus.require(&id)?;
                    let features = assets.features(report)?;
                    (assets.query(report, &features)?, Some(id))
                }
                (None, None) => bail!(UsageError("index query needs --text or --report-id".into())),
            };
            for hit in topk(&store, &query, k, exclude.as_deref())?.hits {
                println!("{}", serde_json::to_string(&hit)?);
            }
        }
        Command::Extract { report_id, dump_prompts } => {
            let assets = Assets::load(&cfg)?;
            let reports: Vec<_> = match &report_id {
                Some(id) => vec![assets.corpus.require(id)?],
                None => assets.corpus.reports().iter().collect(),
            };
            let mut lines = String::new();
            for r in reports {
                for t in extract_triplets(r, &assets.lexicons) {
                    let line = if dump_prompts {
                        let p = render_prompt(&t);
                        json!({"report_id": r.id, "prompt": p.text, "template": p.template}).to_string()
                    } else {
                        triplet_to_json(&r.id, &t)
                    };
                    lines.push_str(&line);
                    lines.push('\n');
                }
            }
            if report_id.is_none() && !dump_prompts {
                write(&out.join("triplets.jsonl"), &lines)?;
            }
            print!("{lines}");
        }
        Command::Train => {
            let assets = Assets::load(&cfg)?;
            let (_, report) = train_pipeline(&assets, &cfg, Some(&out))?;
            write(&out.join("config.toml"), cfg.to_toml())?;
            println!(
                "{}",
                json!({
                    "epochs": report.epochs.len(),
                    "best_epoch": report.best_epoch,
                    "final_train_loss": report.final_train_loss(),
                    "checkpoint": out.join("checkpoint"),
                    "config_hash": cfg.hash(),
                })
            );
        }
        Command::Generate { checkpoint, split } => {
            let split: Split = split.parse().map_err(|e: kinject::Error| UsageError(e.to_string()))?;
            let dir = checkpoint.or(cfg.paths.checkpoint.clone()).unwrap_or_else(|| out.join("checkpoint"));
            let model = Model::load(&dir)?;
            let assets = Assets::load(&cfg)?;
            log::info!("generating {} reports in {:?} mode", assets.corpus.split(split).count(), Mode::for_split(split));
            let rows: Vec<(String, String)> = generate_split(&assets, &model, split, cfg.knowledge)?.into_iter().map(|(id, g)| (id, g.text)).collect();
            let refs: Vec<(String, String)> = assets.corpus.split(split).map(|r| (r.id.clone(), r.normalized())).collect();
            write(&out.join("generated.jsonl"), generations_to_jsonl(&rows))?;
            write(&out.join("reference.jsonl"), generations_to_jsonl(&refs))?;
            println!("{}", json!({"generated": rows.len(), "path": out.join("generated.jsonl")}));
        }
        Command::Evaluate { gen, reference } => {
            let gen = read_generations(&gen)?;
            let refs: std::collections::HashMap<String, String> = read_generations(&reference)?.into_iter().collect();
            let mut cands = Vec::with_capacity(gen.len());
            let mut matched = Vec::with_capacity(gen.len());
            for (id, text) in gen {
                let r = refs.get(&id).ok_or(kinject::Error::UnknownId(id))?;
                cands.push(text);
                matched.push(r.clone());
            }
            let report = MetricReport::compute(&cands, &matched)?;
            println!("{}", serde_json::to_string(&report)?);
            println!("{}", MetricReport::CSV_HEADER);
            println!("{}", report.csv_row());
        }
        Command::Ablate => {
            let assets = Assets::load(&cfg)?;
            let table = ablate(&assets, &cfg, Some(&out))?;
            for e in table.errors() {
                log::error!("{e}");
            }
            print!("{}", table.to_csv());
            if table.rows.iter().all(|r| r.outcome.is_err()) {
                bail!(kinject::Error::Numeric("every ablation leg failed".into()));
            }
        }
        Command::Synth { kind, n } => {
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let corpus_path = out.join("corpus.jsonl");
            match kind {
                SynthKind::Toy => toy_corpus().save(&corpus_path)?,
                SynthKind::Knowledge => {
                    let kc = knowledge_corpus(&KnowledgeCorpusConfig {
                        n_reports: n,
                        seed: cfg.seed,
                        ..Default::default()
                    })?;
                    kc.corpus.save(&corpus_path)?;
                    kc.embeddings.save(&out.join("embeddings.kift"))?;
                }
            }
            println!("{}", json!({"corpus": corpus_path}));
        }
    }
    Ok(())
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.chain().find_map(|e| e.downcast_ref::<kinject::Error>()).map(|e| e.kind()) {
        Some(ErrorKind::Config) => 1,
        Some(ErrorKind::Numeric) => 3,
        _ => 2,
    }
}

/// The error chain joined with ": ", skipping causes already quoted by
/// the message above them.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).target(env_logger::Target::Stderr).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
