use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use melo_core::adapter::LinkReadyOutcome;
use melo_core::eval::{ingest, run_eval};
use melo_core::kg::{KgMode, SearchQuery};
use melo_core::{Error, MeloConfig, Mention};
use serde_json::json;

#[derive(Parser)]
#[command(name = "melo", version, about = "Multimodal entity linking against Wikidata")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Link every record of a dataset and report Acc@1.
    Eval(EvalArgs),
    /// Link a single mention and print the result as JSON.
    Link(LinkArgs),
    /// Run fusion and the adaptive loop for one dataset record, without the clozer.
    Candidates(CandidatesArgs),
    /// Knowledge-graph cache maintenance.
    Cache {
        #[command(subcommand)]
        command: CacheCommand,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Drop malformed dataset lines instead of aborting.
    #[arg(long)]
    skip_bad: bool,
    #[arg(long)]
    workers: Option<usize>,
    /// Serve knowledge-graph lookups from the cache only.
    #[arg(long)]
    offline: bool,
    /// Also write one JSON line per record with the full link trace.
    #[arg(long)]
    traces: Option<PathBuf>,
}

#[derive(Args)]
struct LinkArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    words: String,
    #[arg(long, default_value = "")]
    context: String,
    #[arg(long)]
    image: Option<String>,
    #[arg(long)]
    image_description: Option<String>,
    #[arg(long, default_value = "cli")]
    id: String,
    #[arg(long)]
    offline: bool,
}

#[derive(Args)]
struct CandidatesArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    mention_id: String,
    /// Where to write the per-round trace and final loop state.
    #[arg(long)]
    round_trace: PathBuf,
    #[arg(long)]
    offline: bool,
}

#[derive(Subcommand)]
enum CacheCommand {
    /// Search each query (one per line) so later runs can go offline.
    Warm {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        queries: PathBuf,
    },
}

/// Exit status classes.
enum Failure {
    Config(anyhow::Error),
    Ingestion(anyhow::Error),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

fn config_error(e: Error) -> Failure {
    Failure::Config(anyhow::Error::new(e))
}

fn load_config(path: &Path) -> Result<MeloConfig, Failure> {
    MeloConfig::load(path).map_err(|e| Failure::Config(anyhow::Error::new(e).context(format!("loading {}", path.display()))))
}

fn offline(flag: bool) -> Option<KgMode> {
    flag.then_some(KgMode::Offline)
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.config)?;
    if let Some(w) = args.workers {
        cfg.workers = w.max(1);
    }
    let pipeline = cfg.build_pipeline(offline(args.offline)).map_err(config_error)?;
    let data = match ingest(&args.dataset, args.skip_bad) {
        Ok(d) => d,
        Err(e @ Error::Ingestion { .. }) => return Err(Failure::Ingestion(e.into())),
        Err(e) => return Err(Failure::Run(e.into())),
    };
    for s in &data.skipped {
        eprintln!("warning: skipped line {}: {}", s.line, s.message);
    }
    let name = args.dataset.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    let run = run_eval(name, &data.records, &pipeline, cfg.workers, &cfg.hash()).map_err(anyhow::Error::new)?;
    write_file(&args.out, &(run.report.to_json() + "\n"))?;
    if let Some(path) = &args.traces {
        run.write_traces(path).map_err(anyhow::Error::new)?;
    }
    println!("{}", run.report.render_table());
    Ok(())
}

fn link(args: LinkArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.config)?;
    let pipeline = cfg.build_pipeline(offline(args.offline)).map_err(config_error)?;
    let mut mention = Mention::new(args.id, args.words, args.context).map_err(anyhow::Error::new)?;
    mention.image = args.image;
    mention.image_description = args.image_description;
    let result = pipeline.run_pipeline(mention);
    println!("{}", serde_json::to_string_pretty(&result).context("serializing result")?);
    Ok(())
}

fn candidates(args: CandidatesArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.config)?;
    let pipeline = cfg.build_pipeline(offline(args.offline)).map_err(config_error)?;
    let data = ingest(&args.dataset, true).map_err(anyhow::Error::new)?;
    let record = data
        .records
        .iter()
        .find(|r| r.id == args.mention_id)
        .with_context(|| format!("no record with id {:?} in {}", args.mention_id, args.dataset.display()))?;
    let outcome = pipeline.candidates(Mention::from_record(record).map_err(anyhow::Error::new)?).map_err(anyhow::Error::new)?;
    let status = match &outcome {
        LinkReadyOutcome::Ready { rounds_used, .. } => json!({"status": "ready", "rounds_used": rounds_used}),
        LinkReadyOutcome::MatchingFailed { .. } => json!({"status": "matching_failed"}),
    };
    let doc = json!({
        "mention_id": record.id,
        "outcome": status,
        "fused_description": outcome.mention().fused_description,
        "rounds": outcome.trace(),
        "state": outcome.state(),
    });
    write_file(&args.round_trace, &(serde_json::to_string_pretty(&doc).context("serializing trace")? + "\n"))?;
    for round in outcome.trace() {
        let qids: Vec<String> = round.candidate_set.qids().iter().map(ToString::to_string).collect();
        println!("round {}: {:?} [{}]", round.round, round.verdict, qids.join(", "));
    }
    Ok(())
}

fn warm(config: &Path, queries: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let mode = if cfg.kg_mode == KgMode::Offline { KgMode::ReadThrough } else { cfg.kg_mode };
    let store = cfg.kg_store(Some(mode)).map_err(config_error)?;
    let text = std::fs::read_to_string(queries).with_context(|| format!("reading {}", queries.display()))?;
    let (mut ok, mut failed) = (0, 0);
    for q in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let query = SearchQuery { text: q.to_string(), limit: cfg.search_limit, language: cfg.kg_language.clone() };
        match store.search(&query) {
            Ok(hits) => {
                ok += 1;
                println!("{q}: {} hits", hits.len());
            }
            Err(e) => {
                failed += 1;
                eprintln!("{q}: {e}");
            }
        }
    }
    println!("warmed {ok} queries into {} ({failed} failed)", store.cache().dir().display());
    if failed > 0 {
        return Err(Failure::Run(anyhow::anyhow!("{failed} queries could not be cached")));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Eval(a) => eval(a),
        Command::Link(a) => link(a),
        Command::Candidates(a) => candidates(a),
        Command::Cache { command: CacheCommand::Warm { config, queries } } => warm(&config, &queries),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Ingestion(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
