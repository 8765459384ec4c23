//! `vcl`: pretrain, evaluate, ablate, gradient-check and generate data.
//! stdout carries `key=value` lines only; progress and errors go to stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Exit status for each failure class.
pub mod exit {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const NUMERIC: u8 = 3;
    pub const ARTIFACT: u8 = 4;
}

#[derive(Parser)]
#[command(name = "vcl", version, about = "Variational contrastive learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Linear,
    Lowshot,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder; writes resolved-config.json, metrics.jsonl and checkpoint.vclc.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "VCL_OUT_DIR")]
        out: PathBuf,
        /// Replaces the config's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a labeled dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
        /// Labeled fraction for the low-shot protocol.
        #[arg(long)]
        fraction: Option<f64>,
        /// Dataset file, split into train and test parts.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, env = "VCL_OUT_DIR")]
        out: PathBuf,
        /// Run config supplying the probe and fine-tune settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the objective-component and hyperparameter grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "VCL_OUT_DIR")]
        out: PathBuf,
    },
    /// Finite-difference check of every op and loss; nonzero exit on any failure.
    Gradcheck {
        #[arg(long, env = "VCL_OUT_DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negates every analytic gradient, so every check must fail.
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Generate a synthetic dataset, optionally with outliers.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { config, out, seed } => commands::pretrain(&config, &out, seed),
        Command::Eval { checkpoint, protocol, fraction, data, out, config, seed } => {
            let protocol = match protocol {
                ProtocolArg::Linear => vcl_core::eval::Protocol::Linear,
                ProtocolArg::Lowshot => vcl_core::eval::Protocol::Lowshot,
            };
            if protocol == vcl_core::eval::Protocol::Lowshot && fraction.is_none() {
                use clap::CommandFactory;
                Cli::command()
                    .error(clap::error::ErrorKind::MissingRequiredArgument, "--protocol lowshot requires --fraction")
                    .exit();
            }
            commands::eval(&commands::EvalArgs { checkpoint, protocol, fraction, data, out, config, seed })
        }
        Command::Ablate { config, out } => commands::ablate(&config, &out),
        Command::Gradcheck { out, instances, seed, inject_sign_flip } => {
            commands::gradcheck(&out, instances, seed, inject_sign_flip)
        }
        Command::GenData { config, rho, out } => commands::gen_data(&config, rho, &out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
