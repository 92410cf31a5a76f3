//! `tern`: pretrain, ternarize, evaluate, analyze and export models.
//!
//! Every subcommand reads an optional `key = value` run config (see
//! [`RunConfig`]) and applies command-line overrides on top of it. Errors
//! are printed as `error[<category>]: <message>` and mapped to exit codes:
//!
//! | code | category |
//! |------|----------|
//! | 2    | usage    |
//! | 3    | config   |
//! | 4    | shape    |
//! | 5    | numeric  |
//! | 6    | format   |
//! | 7    | io       |
//! | 8    | autodiff |

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "tern",
    version,
    about = "Ternary weight network training and deployment"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run config of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for initialization, data order and augmentation
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["lenet", "resnet20", "resnet32", "resnet44", "resnet56", "resnet18"])]
    arch: Option<String>,
    #[arg(long, global = true, value_parser = ["tw", "tw-ics", "tw-ft", "tw-ics-ft", "tw-ics-ft-rel"])]
    mode: Option<String>,
    /// Threshold factors: one value for plain ternary layers, a strictly
    /// increasing list for expanded layers.
    #[arg(long, global = true, value_delimiter = ',', num_args = 1..)]
    beta: Option<Vec<f64>>,
    /// Expansion factor of expanded layers; picks the default factors.
    #[arg(long, global = true)]
    tex: Option<usize>,
    #[arg(long = "first-last", global = true, value_parser = ["fp", "tern"])]
    first_last: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the full-precision model.
    Train,
    /// Ternarize and train in the selected mode.
    Ternarize {
        /// FP checkpoint to fine-tune from.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Print top-1 and top-5 test accuracy of a model file.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Density, compression and operation-count reports, or FPGA cost.
    Analyze {
        #[arg(long)]
        model: Option<PathBuf>,
        /// `fp_macs=<n> tern_macs=<n>`, optionally with `add_lut`,
        /// `mul_lut` and `mul_dsp` unit costs.
        #[arg(long, num_args = 1.., value_name = "KEY=VALUE")]
        fpga: Option<Vec<String>>,
    },
    /// Write the deployable packed model.
    Export {
        #[arg(long)]
        model: PathBuf,
    },
}

fn exit_code(category: &str) -> u8 {
    match category {
        "usage" => 2,
        "config" => 3,
        "shape" => 4,
        "numeric" => 5,
        "format" => 6,
        "io" => 7,
        "autodiff" => 8,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err}", err.category());
            ExitCode::from(exit_code(err.category()))
        }
    }
}
