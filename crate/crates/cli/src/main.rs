//! `gbtd`: synthesize, decompose and verify tensors, and count network costs.
//!
//! Reports go to stdout as JSON with sorted keys; a one-line summary goes to
//! stderr. Exit status: 0 success, 1 verification failure, 2 usage or input
//! error, 3 numerical failure.

mod commands;

use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use commands::{Failure, Report};

mod cli {
    use std::path::PathBuf;

    use clap::{Args, Parser, Subcommand};

    #[derive(Parser, Debug)]
    #[command(
        name = "gbtd",
        version,
        about = "Block term decompositions and factored convolutions"
    )]
    pub struct Cli {
        /// Add wall-clock time to the report (makes output non-reproducible).
        #[arg(long, global = true)]
        pub timing: bool,
        #[command(subcommand)]
        pub command: Command,
    }

    #[derive(Subcommand, Debug)]
    pub enum Command {
        /// Write a tensor built from a seeded random decomposition.
        Synth(SynthArgs),
        /// Fit a block term decomposition and write it as an archive.
        Decompose(DecomposeArgs),
        /// Compare a factored archive's pipeline against direct convolution.
        Verify(VerifyArgs),
        /// Count parameters, FLOPs and model size of a network.
        Count(CountArgs),
        /// Print a network description as JSON.
        Arch {
            /// Built-in name or JSON file.
            name: String,
        },
    }

    #[derive(Args, Debug)]
    pub struct SynthArgs {
        /// Comma-separated extents, e.g. 6,6,6.
        #[arg(long, value_delimiter = ',', required = true)]
        pub shape: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        pub terms: usize,
        /// Comma-separated ranks; `*` or `_` leaves a mode unfactorized.
        #[arg(long)]
        pub rank: String,
        /// 1-based modes the ranks apply to.
        #[arg(long, value_delimiter = ',')]
        pub modes: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0)]
        pub seed: u64,
        /// Output GBT1 file.
        #[arg(long)]
        pub out: PathBuf,
        /// Ground-truth archive directory [default: <out>.truth].
        #[arg(long)]
        pub truth: Option<PathBuf>,
    }

    #[derive(Args, Debug)]
    pub struct AlsArgs {
        #[arg(long, default_value_t = 1000)]
        pub sweeps: usize,
        #[arg(long, default_value_t = 1e-13)]
        pub tol: f64,
        #[arg(long, default_value_t = 1e-10)]
        pub ridge: f64,
        #[arg(long, default_value_t = 0)]
        pub seed: u64,
        #[arg(long, default_value_t = 20)]
        pub restarts: usize,
    }

    #[derive(Args, Debug)]
    pub struct DecomposeArgs {
        /// GBT1 inputs; several 4-D kernels are factored collectively.
        #[arg(required = true)]
        pub inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        pub terms: usize,
        #[arg(long)]
        pub rank: String,
        #[arg(long, value_delimiter = ',')]
        pub modes: Option<Vec<usize>>,
        /// Archive directory.
        #[arg(long)]
        pub out: PathBuf,
        /// Sharing-window id recorded for collective archives.
        #[arg(long, default_value_t = 0)]
        pub window: usize,
        #[command(flatten)]
        pub als: AlsArgs,
    }

    #[derive(Args, Debug)]
    pub struct VerifyArgs {
        pub archive: PathBuf,
        #[arg(long, default_value_t = 5)]
        pub trials: usize,
        #[arg(long, default_value_t = 0)]
        pub seed: u64,
        /// Width and height of the random inputs.
        #[arg(long, default_value_t = 8)]
        pub size: usize,
    }

    #[derive(Args, Debug)]
    pub struct CountArgs {
        /// Built-in name or JSON file.
        pub arch: String,
        #[arg(long, default_value = "fma", value_parser = ["fma", "madd2"])]
        pub convention: String,
        #[arg(long)]
        pub no_sharing: bool,
        /// Leave out normalization parameters.
        #[arg(long)]
        pub no_norm: bool,
        #[arg(long, default_value_t = 224)]
        pub input_size: usize,
    }
}

pub use cli::{AlsArgs, CountArgs, DecomposeArgs, SynthArgs, VerifyArgs};

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("GBTD_THREADS") else {
        return Ok(());
    };
    let n = value
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Failure::Usage(format!(
                "GBTD_THREADS must be a positive integer, got {value:?}"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn run(args: &cli::Cli) -> Result<Report, Failure> {
    configure_threads()?;
    match &args.command {
        cli::Command::Synth(a) => commands::synth(a),
        cli::Command::Decompose(a) => commands::decompose(a),
        cli::Command::Verify(a) => commands::verify(a),
        cli::Command::Count(a) => commands::count(a),
        cli::Command::Arch { name } => commands::arch(name),
    }
}

fn main() -> ExitCode {
    let args = cli::Cli::parse();
    let start = Instant::now();
    match run(&args) {
        Ok(mut report) => {
            if args.timing {
                report.json["wall_seconds"] = serde_json::json!(start.elapsed().as_secs_f64());
            }
            let text = serde_json::to_string_pretty(&report.json).expect("serializable");
            // A closed pipe (e.g. `| head`) is not an error worth reporting.
            let _ = writeln!(std::io::stdout(), "{text}");
            eprintln!("{}", report.summary);
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
