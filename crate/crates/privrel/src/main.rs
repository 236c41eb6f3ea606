use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use privrel::{exit_code, run, Command, Invocation, Overrides, RunConfigFile};

#[derive(Parser)]
#[command(name = "privrel", version, about = "Privacy-preserving release of smart-meter data")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed override (generator for gen-data, oracle for oracle-verify, training otherwise).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated trade-off grid, e.g. 0,0.5,1.
    #[arg(long, global = true, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    /// Releaser checkpoint; repeat for psd.
    #[arg(long, global = true)]
    checkpoint: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset.
    GenData,
    /// Train a releaser and its training attacker.
    Train,
    /// Train a fresh test attacker against a releaser checkpoint.
    Attack,
    /// Evaluate distortion and attacker accuracy on the test split.
    Eval {
        /// Use this test attacker instead of training one.
        #[arg(long)]
        attacker: Option<PathBuf>,
    },
    /// Train and assess one releaser per trade-off weight.
    Sweep,
    /// Welch PSD of release errors.
    Psd,
    /// Statistical quality indicators of a release.
    Indicators,
    /// Releaser/attacker data mismatch experiment.
    Mismatch,
    /// Check the information-theoretic bounds on random finite processes.
    OracleVerify {
        /// Number of random processes.
        #[arg(long)]
        specs: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut specs = None;
    let mut attacker = None;
    let command = match cli.command {
        Cmd::GenData => Command::GenData,
        Cmd::Train => Command::Train,
        Cmd::Attack => Command::Attack,
        Cmd::Eval { attacker: a } => {
            attacker = a;
            Command::Eval
        }
        Cmd::Sweep => Command::Sweep,
        Cmd::Psd => Command::Psd,
        Cmd::Indicators => Command::Indicators,
        Cmd::Mismatch => Command::Mismatch,
        Cmd::OracleVerify { specs: s } => {
            specs = s;
            Command::OracleVerify
        }
    };
    let result = (|| {
        let base = match &cli.config {
            Some(path) => RunConfigFile::load(path)?,
            None => RunConfigFile::default(),
        };
        let overrides = Overrides {
            seed: cli.seed,
            lambda_grid: cli.lambda_grid,
            specs,
        };
        run(&Invocation {
            command,
            config: overrides.apply(base, command),
            out: cli.out,
            checkpoints: cli.checkpoint,
            attacker,
        })
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err}", err.category());
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
