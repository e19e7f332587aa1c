use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use sqlprompt_cli::commands::{self, EvaluateArgs};
use sqlprompt_cli::config::RunConfig;
use sqlprompt_core::evalkit::{SuiteSpec, DEFAULT_ROWS_PER_TABLE, DEFAULT_SUITE_COUNT};

#[derive(Parser)]
#[command(name = "sqlprompt", version, about = "Consistency-voted text-to-SQL prediction and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Predict SQL for every question in the configured dataset.
    Predict {
        #[arg(long)]
        config: PathBuf,
        /// Also write one audit record per candidate.
        #[arg(long)]
        audit: bool,
    },
    /// Score a prediction file with EX and, optionally, simplified TS.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        db_dir: PathBuf,
        /// Schema manifest; schemas are read from the databases when omitted.
        #[arg(long)]
        tables: Option<PathBuf>,
        #[arg(long)]
        ts: bool,
        #[arg(long, default_value_t = DEFAULT_SUITE_COUNT)]
        suites: usize,
        #[arg(long, default_value_t = DEFAULT_ROWS_PER_TABLE)]
        rows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-question report; defaults to `<pred>.eval.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Where suite databases are written; defaults to `<pred>.suites`.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
    /// Print the rendered prompt for one example.
    ShowPrompt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        example: String,
        #[arg(long)]
        design: String,
        #[arg(long, default_value_t = 0)]
        shots: usize,
    },
    /// Inspect or empty a completion cache.
    Cache {
        action: CacheAction,
        #[arg(long)]
        dir: PathBuf,
    },
    /// Check a schema manifest against its database files.
    Validate {
        #[arg(long)]
        tables: PathBuf,
        #[arg(long)]
        db_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CacheAction {
    Stats,
    Clear,
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Predict { config, audit } => {
            let config = RunConfig::load(&config)?;
            let summary = commands::predict(&config, audit)?;
            println!("{summary}");
            println!("predictions: {}", config.output.display());
        }
        Command::Evaluate {
            pred,
            dataset,
            db_dir,
            tables,
            ts,
            suites,
            rows,
            seed,
            report,
            work_dir,
        } => {
            let args = EvaluateArgs {
                pred,
                dataset,
                db_dir,
                tables,
                suite: ts.then_some(SuiteSpec {
                    suite_count: suites,
                    rows_per_table: rows,
                    seed,
                }),
                report,
                work_dir,
            };
            let report = commands::evaluate(&args)?;
            print!("{}", report.summary());
        }
        Command::ShowPrompt {
            config,
            example,
            design,
            shots,
        } => {
            let config = RunConfig::load(&config)?;
            print!("{}", commands::show_prompt(&config, &example, &design, shots)?);
        }
        Command::Cache { action, dir } => match action {
            CacheAction::Stats => println!("{}", commands::cache_stats_text(&dir)?),
            CacheAction::Clear => commands::cache_clear_dir(&dir)?,
        },
        Command::Validate { tables, db_dir } => {
            let mut clean = true;
            for (db_id, report) in commands::validate(&tables, &db_dir)? {
                if report.is_empty() {
                    println!("{db_id}: ok");
                } else {
                    clean = false;
                    println!("{db_id}:\n{report}");
                }
            }
            if !clean {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
