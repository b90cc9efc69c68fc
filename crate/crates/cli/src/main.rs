use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use lendrl::{load_config, run, run_pipeline, CliError, Overrides, Stage};
use lendrl_core::agents::Algorithm;
use lendrl_core::ingest::write_snapshots_csv;
use lendrl_core::synthetic::{generate_snapshots, SyntheticConfig};

#[derive(Parser)]
#[command(
    name = "lendrl",
    version,
    about = "Offline RL for lending-pool interest-rate policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Snapshots to features, transitions and normalization statistics.
    Preprocess(StageArgs),
    /// Train the configured algorithm on the preprocessed transitions.
    Train(StageArgs),
    /// Replay the trained policy and compare it with the baseline.
    Evaluate(StageArgs),
    /// Merge evaluation reports into a text summary.
    Report(StageArgs),
    /// preprocess, train, evaluate and report in one go.
    Pipeline(StageArgs),
    /// Write a synthetic snapshot CSV.
    Synth(SynthArgs),
}

#[derive(Args)]
struct StageArgs {
    #[arg(long, env = "LENDRL_CONFIG")]
    config: PathBuf,
    #[arg(long, env = "LENDRL_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "LENDRL_POOL")]
    pool: Option<String>,
    #[arg(long, env = "LENDRL_ALGO", value_parser = parse_algo)]
    algo: Option<Algorithm>,
    #[arg(long, env = "LENDRL_STEPS")]
    steps: Option<u64>,
    #[arg(long, env = "LENDRL_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 1000)]
    days: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "SYN-USDC")]
    pool: String,
    #[arg(long, default_value = "2022-03-01")]
    start: NaiveDate,
}

fn parse_algo(s: &str) -> Result<Algorithm, String> {
    Algorithm::from_tag(s)
        .ok_or_else(|| format!("unknown algorithm {s}; expected bc, cql or td3bc"))
}

fn run_stage(stage: Option<Stage>, args: StageArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    Overrides {
        seed: args.seed,
        algo: args.algo,
        steps: args.steps,
        out: args.out,
    }
    .apply(&mut cfg)?;
    match stage {
        Some(stage) => run(stage, &cfg, args.pool.as_deref()),
        None => run_pipeline(&cfg, args.pool.as_deref()),
    }
}

fn synth(args: SynthArgs) -> Result<(), CliError> {
    let cfg = SyntheticConfig {
        pool_id: args.pool,
        start_date: args.start,
        days: args.days,
        seed: args.seed,
        ..SyntheticConfig::default()
    };
    let file = std::fs::File::create(&args.output).map_err(|source| CliError::Io {
        path: args.output.clone(),
        source,
    })?;
    write_snapshots_csv(&generate_snapshots(&cfg), file)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Preprocess(a) => run_stage(Some(Stage::Preprocess), a),
        Command::Train(a) => run_stage(Some(Stage::Train), a),
        Command::Evaluate(a) => run_stage(Some(Stage::Evaluate), a),
        Command::Report(a) => run_stage(Some(Stage::Report), a),
        Command::Pipeline(a) => run_stage(None, a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
