use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use esc_fusion::checkpoint;
use esc_fusion::metrics::MetricTable;
use esc_fusion::pipeline::{self, Resources, RunConfig};

#[derive(Parser)]
#[command(name = "esc", about = "Emotional-support response generation with multi-knowledge fusion")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for splitting, initialization, shuffling and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override, `key.path=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a corpus, build the vocabulary, retrieval base and index.
    Ingest {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Re-embed the retrieval base.
    BuildIndex,
    /// Train and keep the checkpoint with the lowest validation perplexity.
    Train,
    /// Score a checkpoint on a split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also print an aligned table.
        #[arg(long)]
        table: bool,
    },
    /// Top-s demonstrations for a query.
    Retrieve {
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 3)]
        top_s: usize,
    },
    /// Train and evaluate once per top-s value.
    SweepTopS {
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
        values: Vec<usize>,
    },
    /// Normalized mean score per method from a CSV or JSON metric table.
    SNorm {
        #[arg(long)]
        table: PathBuf,
    },
    /// Interactive session on standard input.
    Chat {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> esc_fusion::Result<()> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides, cli.seed, cli.out)?;
    match cli.command {
        Command::Ingest { corpus } => {
            if let Some(c) = corpus {
                cfg.corpus = Some(c);
                cfg.presplit = None;
            }
            print_json(&pipeline::cmd_ingest(&cfg)?);
        }
        Command::BuildIndex => print_json(&pipeline::cmd_build_index(&cfg)?),
        Command::Train => print_json(&pipeline::cmd_train(&cfg)?),
        Command::Evaluate { checkpoint, split, table } => {
            let ckpt = checkpoint.unwrap_or_else(|| cfg.outputs().best_checkpoint());
            let report = pipeline::cmd_evaluate(&cfg, &ckpt, &split)?;
            print_json(&report);
            if table {
                print!("{}", pipeline::report_table(&[(split, Some(&report))]));
            }
        }
        Command::Retrieve { index, query, top_s } => {
            let index = index.unwrap_or_else(|| cfg.artifacts().index());
            print_json(&pipeline::cmd_retrieve(&cfg, &index, &query, top_s)?);
        }
        Command::SweepTopS { values } => {
            let rows = pipeline::cmd_sweep_top_s(&cfg, &values);
            print_json(&rows);
            print!("{}", pipeline::sweep_table(&rows));
            if let Some(failed) = rows.iter().find(|r| r.error.is_some()) {
                return Err(esc_fusion::Error::Config(format!(
                    "sweep run s={} failed: {}",
                    failed.top_s,
                    failed.error.as_deref().unwrap_or_default()
                )));
            }
        }
        Command::SNorm { table } => {
            let table = MetricTable::load(&table)?;
            let scores = pipeline::cmd_s_norm(&table)?;
            print_json(&scores);
            print!("{}", pipeline::s_norm_table(&table, &scores));
        }
        Command::Chat { checkpoint } => {
            let resources = Resources::load(&cfg)?;
            let path = checkpoint.unwrap_or_else(|| cfg.outputs().best_checkpoint());
            let ckpt = checkpoint::load(&path, Some(&resources.vocab.hash()))?;
            let stdin = io::stdin();
            pipeline::run_chat(&ckpt.model, &resources, &cfg, stdin.lock(), io::stdout().lock())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(io::stderr(), "error: {e}");
            ExitCode::FAILURE
        }
    }
}
