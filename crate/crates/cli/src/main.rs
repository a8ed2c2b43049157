//! `vmb`: data generation, surrogate and prior training, inversion and
//! imaging from a single TOML run configuration.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "vmb", version, about = "Velocity model building with a time-lag RTM surrogate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML). Without it every setting takes its default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for shot and patch parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the training and validation dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the time-lag operator surrogate.
    TrainOp {
        #[command(flatten)]
        common: Common,
        /// Continue from the rolling checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Train the diffusion prior on the training velocities.
    TrainDdpm {
        #[command(flatten)]
        common: Common,
    },
    /// Draw unconditional samples from the trained prior.
    SampleDdpm {
        #[command(flatten)]
        common: Common,
    },
    /// Invert an observed extended image for velocity.
    Invert {
        #[command(flatten)]
        common: Common,
        /// Refine periodically with the diffusion prior.
        #[arg(long)]
        with_ddpm: bool,
        /// Invert overlapping operator-sized patches and blend them.
        #[arg(long)]
        patched: bool,
    },
    /// Model and migrate, or migrate recorded gathers.
    Rtm {
        #[command(flatten)]
        common: Common,
    },
    /// Vertical-profile wavenumber spectra of a velocity model.
    Spectrum {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match cli.command {
        Command::GenData { common } => commands::run(&common, commands::gen_data),
        Command::TrainOp { common, resume } => commands::run(&common, |c| commands::train_op(c, resume)),
        Command::TrainDdpm { common } => commands::run(&common, commands::train_ddpm),
        Command::SampleDdpm { common } => commands::run(&common, commands::sample_ddpm),
        Command::Invert { common, with_ddpm, patched } => {
            commands::run(&common, |c| commands::invert(c, with_ddpm, patched))
        }
        Command::Rtm { common } => commands::run(&common, commands::rtm),
        Command::Spectrum { common } => commands::run(&common, commands::spectrum),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
