mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_list, ExperimentConfig, LossName, Overrides};

/// Persistent-excitation training, margin bounds and robustness profiles.
///
/// Settings resolve in order: built-in defaults, then the `--config` file,
/// then flags. Each run writes into `<out>/<subcommand>-<config hash>/`.
#[derive(Parser)]
#[command(name = "pexcite", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Parsed as one comma-separated value rather than repeated occurrences.
type RadiusList = Vec<f64>;

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated excitation radii, e.g. `0.005,0.01,0.02`.
    #[arg(long, global = true, value_parser = parse_list)]
    radii: Option<RadiusList>,
    #[arg(long, global = true, value_enum)]
    loss: Option<LossName>,
}

#[derive(Subcommand)]
enum Command {
    /// Train with gradient descent (or SGD) on the configured loss.
    Train,
    /// Train with excitation pairs for every configured radius.
    PeTrain,
    /// PGD margin profiles of checkpoints, or of excitation-trained models.
    Margins {
        /// Checkpoints to profile; trains over the radii when none are given.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Decision-boundary raster and grid margins of a 2-D classifier.
    Boundary,
    /// Lipschitz, margin and support-vector bound reports.
    Bounds,
    /// Singular-value profile of trained weight matrices.
    Rank,
    /// Regularization/inflation equivalence sweep over epsilons.
    Equiv,
    /// Linear stability check of a squared-error equilibrium.
    Stability,
    /// Write the configured dataset as CSV with a metadata sidecar.
    GenData,
    /// Excitation training and margin profiles on a CIFAR-10 class pair.
    Cifar2,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ov = Overrides { seed: cli.common.seed, out: cli.common.out, radii: cli.common.radii, loss: cli.common.loss };
    let result = ExperimentConfig::load(cli.common.config.as_deref(), &ov).and_then(|cfg| match &cli.command {
        Command::Train => commands::train_cmd(&cfg),
        Command::PeTrain => commands::pe_train_cmd(&cfg),
        Command::Margins { checkpoints } => commands::margins_cmd(&cfg, checkpoints),
        Command::Boundary => commands::boundary_cmd(&cfg),
        Command::Bounds => commands::bounds_cmd(&cfg),
        Command::Rank => commands::rank_cmd(&cfg),
        Command::Equiv => commands::equiv_cmd(&cfg),
        Command::Stability => commands::stability_cmd(&cfg),
        Command::GenData => commands::gen_data_cmd(&cfg),
        Command::Cifar2 => commands::cifar2_cmd(&cfg),
    });
    match result {
        Ok(run) => {
            println!("{}", run.dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
