//! `subtrace`: build perturbation corpora, trace triggers, score
//! reproducibility, scan training corpora and run the theory checks.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use subtrace_core::corpus_stats::DocGranularity;
use subtrace_core::theory::CheckKind;

use crate::commands::{ScanArgs, SrepArgs};
use crate::config::Loaded;
use crate::error::CliResult;

#[derive(Parser)]
#[command(name = "subtrace", version, about = "Subsequence association tracing")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Granularity {
    Lines,
    File,
}

#[derive(Subcommand)]
enum Command {
    /// Build a perturbation corpus for a prompt.
    Perturb {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        prompt_file: PathBuf,
        /// Defaults to `<output_dir>/corpus.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Beam-search the prompt for subsequences associated with a target.
    Trace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        prompt_file: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure how often a trigger reproduces a target.
    Srep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trigger: String,
        #[arg(long)]
        target: String,
        #[arg(long)]
        n_per_mode: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count trigger/target co-occurrence over a directory of text files.
    CorpusScan {
        #[arg(long)]
        root: PathBuf,
        /// JSON array of `{"trigger", "target", "doc_window"?}` objects.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        tokenizer: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Window for queries that do not set their own.
        #[arg(long)]
        doc_window: Option<usize>,
        #[arg(long, value_enum, default_value = "lines")]
        granularity: Granularity,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one numerical check of the transformer constructions.
    TheoryCheck {
        kind: CheckKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Inspect or prune the generation cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Subcommand)]
enum CacheAction {
    Stats {
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long, conflicts_with = "dir")]
        config: Option<PathBuf>,
    },
    /// Remove entries older than the retention window.
    Gc {
        #[arg(long, default_value_t = 30.0)]
        retention_days: f64,
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long, conflicts_with = "dir")]
        config: Option<PathBuf>,
    },
}

fn run(cmd: Command) -> CliResult<String> {
    match cmd {
        Command::Perturb {
            config,
            prompt_file,
            out,
        } => {
            let loaded = Loaded::from_file(&config)?;
            let path = commands::perturb(&loaded, &prompt_file, out.as_deref())?;
            Ok(path.display().to_string())
        }
        Command::Trace {
            config,
            corpus,
            prompt_file,
            target,
            out,
        } => {
            let loaded = Loaded::from_file(&config)?;
            commands::trace(&loaded, &corpus, &prompt_file, &target, out.as_deref())
        }
        Command::Srep {
            config,
            trigger,
            target,
            n_per_mode,
            seed,
            out,
        } => {
            let loaded = Loaded::from_file(&config)?;
            let args = SrepArgs {
                trigger: &trigger,
                target: &target,
                n_per_mode,
                seed,
                out: out.as_deref(),
            };
            commands::srep(&loaded, &args)
        }
        Command::CorpusScan {
            root,
            queries,
            tokenizer,
            workers,
            doc_window,
            granularity,
            out,
        } => commands::corpus_scan(&ScanArgs {
            root,
            queries,
            tokenizer,
            workers,
            doc_window,
            granularity: match granularity {
                Granularity::Lines => DocGranularity::Lines,
                Granularity::File => DocGranularity::File,
            },
            out,
        }),
        Command::TheoryCheck { kind, seed, report } => commands::theory_check(kind, seed, &report),
        Command::Cache { action } => {
            let (dir, config) = match &action {
                CacheAction::Stats { dir, config } | CacheAction::Gc { dir, config, .. } => (dir, config),
            };
            let loaded = config.as_deref().map(Loaded::from_file).transpose()?;
            let cache = commands::cache_dir(dir.as_deref(), loaded.as_ref());
            match action {
                CacheAction::Stats { .. } => commands::cache_stats(&cache),
                CacheAction::Gc { retention_days, .. } => commands::cache_gc(&cache, retention_days),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(out) => {
            if !out.is_empty() {
                println!("{out}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
