//! `gear`: reverse-dictionary pipeline operator surface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod commands;
mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "gear", version, about = "Reverse dictionary: generate, embed, average, rank")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Jsonl,
    Csv,
    Tsv,
}

impl From<FormatArg> for gear_core::CorpusFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Jsonl => Self::Jsonl,
            FormatArg::Csv => Self::Csv,
            FormatArg::Tsv => Self::Tsv,
        }
    }
}

/// Flags shared by the pipeline subcommands. Flag values override the
/// config file.
#[derive(Args, Clone)]
struct PipelineArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for reports, traces, and built artifacts.
    #[arg(long, default_value = "gear-out")]
    out_dir: PathBuf,
    /// Cache directory (default: $GEAR_CACHE_DIR, else <out-dir>/cache).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Load a prebuilt index instead of building one.
    #[arg(long)]
    index_dir: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    pooling: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    instruction: Option<String>,
    /// Worker threads for batch evaluation (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Skip the per-query trace file.
    #[arg(long)]
    no_trace: bool,
    /// Candidate-count sweep, e.g. `1..5`: one report per m, truncating the
    /// cached m-max generation.
    #[arg(long)]
    sweep_m: Option<String>,
}

impl PipelineArgs {
    fn overrides(&self) -> BTreeMap<String, String> {
        let mut o = BTreeMap::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.insert(k.to_string(), v);
            }
        };
        put("mode", self.mode.clone());
        put("prompt", self.prompt.clone());
        put("pooling", self.pooling.clone());
        put("m", self.m.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("top_k", self.topk.map(|v| v.to_string()));
        put("instruction", self.instruction.clone());
        o
    }

    fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .or_else(|| std::env::var_os("GEAR_CACHE_DIR").map(PathBuf::from))
            .unwrap_or_else(|| self.out_dir.join("cache"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a dictionary file into the canonical corpus form.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: FormatArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute and save a train/valid/test split.
    Split {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// `random` or `source` (overrides the config).
        #[arg(long)]
        kind: Option<String>,
    },
    /// Embed the vocabulary and save the index.
    BuildIndex(PipelineArgs),
    /// Populate the generation cache for the test split.
    Generate(PipelineArgs),
    /// Full pipeline: split, build, generate, evaluate, report.
    Run(PipelineArgs),
    /// Evaluate against existing artifacts (alias of run that prefers a
    /// prebuilt index).
    Eval(PipelineArgs),
    /// Look up terms for one definition.
    Query {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// The definition to look up.
        definition: String,
    },
    /// Re-render a machine-readable report as an aligned table.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
    /// Measure single-query latency and batch-evaluation scaling on a
    /// synthetic index.
    Bench {
        #[arg(long, default_value_t = 100_000)]
        terms: usize,
        #[arg(long, default_value_t = 768)]
        dim: usize,
        #[arg(long, default_value_t = 32)]
        queries: usize,
        #[arg(long, default_value_t = 8)]
        threads: usize,
        #[arg(long)]
        json: bool,
    },
}

/// Marker for errors that should exit with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<toml::de::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<gear_core::Error>() {
            if matches!(
                e,
                gear_core::Error::InvalidConfig(_) | gear_core::Error::InvalidRatios(_)
            ) {
                return 2;
            }
        }
    }
    1
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest { input, format, out } => commands::ingest(&input, format.into(), &out),
        Command::Split {
            config,
            out,
            seed,
            kind,
        } => commands::split(&config, &out, seed, kind),
        Command::BuildIndex(args) => commands::build_index_cmd(&args),
        Command::Generate(args) => commands::generate(&args),
        Command::Run(args) => commands::run(&args),
        Command::Eval(args) => commands::run(&args),
        Command::Query {
            pipeline,
            definition,
        } => commands::query(&pipeline, &definition),
        Command::Report { report } => commands::report(&report),
        Command::Bench {
            terms,
            dim,
            queries,
            threads,
            json,
        } => commands::bench(terms, dim, queries, threads, json),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}
