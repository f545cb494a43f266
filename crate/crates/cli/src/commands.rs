//! Subcommands. Each loads the pipeline config, runs one step and reports a
//! short summary on stdout.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use fse_core::corpus::{Exercise, SyntheticSpec};
use fse_core::engine::{stages, Engine, PipelineConfig, QueryTarget, SimilarRequest};
use fse_core::rerank::StudentProfile;

#[derive(Debug, Parser)]
#[command(name = "fse", version, about = "Find similar exercises: recall, rank and re-rank")]
pub struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read exercises from JSONL into a corpus snapshot.
    Ingest {
        input: PathBuf,
    },
    /// Generate a synthetic corpus, labeled pairs and ground-truth groups.
    Synth(SynthArgs),
    /// Build the vocabulary and pretrain the encoder.
    Pretrain,
    /// Fine-tune the encoder on labeled pairs.
    Finetune,
    /// Build the recall indexes and train the duplicate detector.
    Index,
    /// Train the multi-task ranker (and the variant classifier).
    TrainRank,
    /// Prune suspect labels with confident learning and retrain the ranker.
    Clean,
    /// Similar exercises for one query.
    Query(QueryArgs),
    /// Recall@K and Precision@K; JSON on stdout (or --out), table on stderr.
    Eval {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
    },
    /// Write `id v_1 ... v_d` lines for every exercise.
    ExportEmbeddings {
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator settings (TOML); defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Bank exercise id.
    #[arg(long, conflicts_with = "exercise", required_unless_present = "exercise")]
    pub id: Option<String>,
    /// JSON file with an exercise to query by value.
    #[arg(long)]
    pub exercise: Option<PathBuf>,
    /// JSON file with a student profile.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Print at most this many results.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

fn load_config(path: Option<&Path>) -> anyhow::Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest { input } => {
            let corpus = stages::ingest(&cfg, &input)?;
            println!("ingested {} exercises into {}", corpus.len(), cfg.paths.corpus.display());
        }
        Command::Synth(args) => {
            let mut spec: SyntheticSpec = match &args.spec {
                Some(p) => fse_core::config::load(p)?,
                None => SyntheticSpec::default(),
            };
            if let Some(s) = args.seed {
                spec.seed = s;
            }
            if let Some(n) = args.noise {
                spec.noise_rate = n;
            }
            let data = stages::synth(&cfg, &spec)?;
            println!(
                "generated {} exercises, {} pairs ({} flipped)",
                data.corpus.len(),
                data.pairs.len(),
                data.flips.len()
            );
        }
        Command::Pretrain => {
            let out = stages::pretrain_step(&cfg)?;
            if let Some(last) = out.history.last() {
                println!("pretrained {} epochs, final loss {:.5}", out.history.len(), last.total);
            }
        }
        Command::Finetune => {
            let out = stages::finetune_step(&cfg)?;
            println!("fine-tuned {} epochs, final loss {:.5}", out.history.len(), out.history.last().copied().unwrap_or(f64::NAN));
        }
        Command::Index => {
            let idx = stages::index_step(&cfg)?;
            println!("indexed {} exercises", idx.vector.len());
        }
        Command::TrainRank => {
            let out = stages::train_rank_step(&cfg)?;
            if let Some(e) = out.history.last() {
                println!("ranker trained, final loss {:.5}, alpha {:?}", e.loss, e.alpha);
            }
        }
        Command::Clean => {
            let report = stages::clean_step(&cfg)?;
            println!(
                "pruned {} of {} pairs; report in {}",
                report.prune_count,
                report.pairs,
                cfg.paths.clean_report.display()
            );
        }
        Command::Query(args) => {
            let target = match (&args.id, &args.exercise) {
                (Some(id), _) => QueryTarget::Id(id.clone()),
                (None, Some(p)) => QueryTarget::Exercise(Box::new(read_json::<Exercise>(p)?)),
                (None, None) => anyhow::bail!("either --id or --exercise is required"),
            };
            let profile: Option<StudentProfile> = args.profile.as_deref().map(read_json).transpose()?;
            let engine = Engine::load(cfg)?;
            let result = engine.query_uncached(&SimilarRequest { target, profile })?;
            for (kind, items) in [("variant", &result.variants), ("similar", &result.similar)] {
                for item in items.iter().take(args.top) {
                    println!("{kind}\t{}\t{:.4}", item.candidate.id, item.candidate.score);
                }
            }
        }
        Command::Eval { out } => {
            let report = stages::eval_step(&cfg, out.as_deref())?;
            if out.is_none() {
                println!("{}", report.to_json()?);
            }
            eprint!("{}", report.table());
        }
        Command::Serve { port } => {
            let port = port.unwrap_or(cfg.service.port);
            let engine = Engine::load(cfg)?;
            tokio::runtime::Runtime::new()?.block_on(crate::server::serve(engine, port))?;
        }
        Command::ExportEmbeddings { out } => {
            stages::export_embeddings_step(&cfg, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
