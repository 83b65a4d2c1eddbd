//! `kerl` command-line driver.
//!
//! Exit codes: 0 success, 1 invalid input, 2 usage, 3 I/O, parse error or missing
//! prerequisite, 4 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kerl::KerlError;

pub const EXIT_INVALID: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "kerl", version, about = "Knowledge-embedded fine-grained classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Dataset location and crop mode shared by data-reading commands.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset root in the CUB layout.
    #[arg(long, env = "KERL_DATA")]
    pub data: PathBuf,
    /// Crop every image to its annotated bounding box.
    #[arg(long)]
    pub bbox: bool,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// TOML training config; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// SGD learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the category-attribute graph from training annotations.
    BuildGraph {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Normalize each attribute column separately.
        #[arg(long)]
        per_column_norm: bool,
        /// Also write a Graphviz rendering next to the graph file.
        #[arg(long)]
        dot: bool,
    },
    /// Write a synthetic dataset in the CUB layout.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        /// TOML generator config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        categories: Option<usize>,
        #[arg(long)]
        attributes: Option<usize>,
        #[arg(long)]
        train_per_class: Option<usize>,
        #[arg(long)]
        test_per_class: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Train the baseline and cache its class scores.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Score cache to write (default: checkpoint path with a .scores extension).
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Score training samples out of fold with this many folds (0 = in-sample).
        #[arg(long, default_value_t = 0)]
        folds: usize,
    },
    /// Train one variant.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        /// baseline | self_guided | concat | kerl (default: from config, else kerl).
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Cached class scores from `pretrain`.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Checkpoint whose backbone initializes this model.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Let gradients reach the `--init` baseline, which then scores online.
        #[arg(long)]
        flow_through: bool,
        /// Epochs for the highlighted-region head (0 = none).
        #[arg(long)]
        region_epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report accuracy and localization statistics.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Average in the region-crop classifier.
        #[arg(long)]
        with_regions: bool,
        /// train | test | all
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write per-sample heatmaps, gate maps, region records and an index.
    Visualize {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Samples to render (default: all).
        #[arg(long)]
        limit: Option<usize>,
        /// Nearest-neighbour upsampling factor for the written maps.
        #[arg(long, default_value_t = 1)]
        upsample: usize,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference gradient checks at tiny sizes.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

/// A check that ran but produced numbers outside tolerance.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<NumericFailure>().is_some() {
        return EXIT_NUMERIC;
    }
    match e.downcast_ref::<KerlError>() {
        Some(k) if k.is_numeric() => EXIT_NUMERIC,
        Some(k) if k.is_io() || matches!(k, KerlError::Missing(_)) => EXIT_IO,
        _ if e.downcast_ref::<std::io::Error>().is_some() => EXIT_IO,
        _ => EXIT_INVALID,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::BuildGraph {
            data,
            out,
            per_column_norm,
            dot,
        } => commands::build_graph(&data, &out, per_column_norm, dot),
        Command::GenSynthetic {
            out,
            config,
            seed,
            categories,
            attributes,
            train_per_class,
            test_per_class,
            image_size,
        } => commands::gen_synthetic(
            &out,
            config.as_deref(),
            commands::SyntheticOverrides {
                seed,
                categories,
                attributes,
                train_per_class,
                test_per_class,
                image_size,
            },
        ),
        Command::Pretrain {
            data,
            run,
            out,
            scores,
            folds,
        } => commands::pretrain(&data, &run, &out, scores.as_deref(), folds),
        Command::Train {
            data,
            run,
            variant,
            graph,
            scores,
            init,
            flow_through,
            region_epochs,
            out,
        } => commands::train(commands::TrainArgs {
            data: &data,
            run: &run,
            variant: variant.as_deref(),
            graph: graph.as_deref(),
            scores: scores.as_deref(),
            init: init.as_deref(),
            flow_through,
            region_epochs,
            out: &out,
        }),
        Command::Eval {
            data,
            checkpoint,
            scores,
            with_regions,
            split,
        } => commands::eval(&data, &checkpoint, scores.as_deref(), with_regions, &split),
        Command::Visualize {
            data,
            checkpoint,
            scores,
            out_dir,
            limit,
            upsample,
            split,
        } => commands::visualize(&data, &checkpoint, scores.as_deref(), &out_dir, limit, upsample, &split),
        Command::Gradcheck { seed, tol } => commands::gradcheck(seed, tol),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
