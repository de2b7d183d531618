use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use rpe_core::Kernel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Svg,
    Both,
}

impl Format {
    pub fn csv(self) -> bool {
        self != Format::Svg
    }

    pub fn svg(self) -> bool {
        self != Format::Csv
    }
}

#[derive(Debug, Clone, Parser)]
#[command(name = "rpe-lab", version, about = "Positional bias kernels: convergence, receptive fields and extrapolation")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving artifacts and manifest.json.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads; 1 keeps every run sequential.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = Format::Both)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// List the kernel catalog.
    Catalog,
    /// Analytic and numeric convergence of `sum b_t`.
    Classify {
        /// Kernel spec such as `kerple_log(r=2,k=1)`; repeatable. Defaults to the ten reference configurations.
        #[arg(long = "kernel")]
        kernels: Vec<Kernel>,
    },
    /// Theoretical receptive field over a log grid of epsilon.
    Trf {
        #[arg(long = "kernel")]
        kernels: Vec<Kernel>,
        #[arg(long, default_value_t = 1e-4)]
        eps_min: f64,
        #[arg(long, default_value_t = 1e-1)]
        eps_max: f64,
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = rpe_core::receptive_field::DEFAULT_TRF_HORIZON)]
        horizon: usize,
        /// Length of the bias array fed to the curve drawing routine.
        #[arg(long, default_value_t = 512)]
        draw_len: usize,
    },
    /// Empirical receptive field of random bounded attention instances.
    Erf {
        #[arg(long = "kernel")]
        kernels: Vec<Kernel>,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        /// Norm bound on query and key rows.
        #[arg(long, default_value_t = 1.0)]
        norm: f64,
        #[arg(long, default_value_t = 1e-4)]
        eps_min: f64,
        #[arg(long, default_value_t = 1e-1)]
        eps_max: f64,
        #[arg(long, default_value_t = 20)]
        points: usize,
    },
    /// Windowing error against its bound on random instances.
    SimulateDelta {
        #[arg(long = "kernel")]
        kernels: Vec<Kernel>,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long = "dims", value_delimiter = ',', default_values_t = vec![4usize, 16, 64])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 1.0)]
        norm: f64,
        /// Number of random instances per kernel and dimension.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
    /// Grayscale map of exp(bias) over the causal grid.
    Heatmap {
        #[arg(long)]
        kernel: Kernel,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train a language model from a key=value config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path; defaults to `<out-dir>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Held-out perplexity at several inference lengths.
    EvalPpl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![64usize, 128, 256, 512, 1024])]
        lengths: Vec<usize>,
        /// `nonoverlapping` or `sliding:<w>`.
        #[arg(long, default_value = "nonoverlapping")]
        mode: String,
        #[arg(long, default_value_t = rpe_lm::DEFAULT_DELTA)]
        delta: f64,
        /// Corpus spec overriding the one stored in the checkpoint config.
        #[arg(long)]
        corpus: Option<String>,
    },
    /// Run the subcommands listed in a file, one per line.
    Experiment {
        #[arg(long)]
        config: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Catalog => "catalog",
            Command::Classify { .. } => "classify",
            Command::Trf { .. } => "trf",
            Command::Erf { .. } => "erf",
            Command::SimulateDelta { .. } => "simulate-delta",
            Command::Heatmap { .. } => "heatmap",
            Command::Train { .. } => "train",
            Command::EvalPpl { .. } => "eval-ppl",
            Command::Experiment { .. } => "experiment",
        }
    }

    pub fn kernels(&self) -> Vec<String> {
        match self {
            Command::Classify { kernels }
            | Command::Trf { kernels, .. }
            | Command::Erf { kernels, .. }
            | Command::SimulateDelta { kernels, .. } => kernels.iter().map(ToString::to_string).collect(),
            Command::Heatmap { kernel, .. } => vec![kernel.to_string()],
            _ => Vec::new(),
        }
    }
}
