use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fisher_ngd::trainer::OptimizerKind;
use fisher_ngd::ActivationKind;

/// Environment variable holding the default output directory.
pub const OUT_ENV: &str = "FISHER_NGD_OUT";

#[derive(Debug, Parser)]
#[command(name = "fisher-ngd", version, about = "Fisher information structure and unit-wise natural gradient for random deep nets")]
pub struct Cli {
    /// Output directory [default: $FISHER_NGD_OUT, else ./fisher-ngd-out].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Maximum number of worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mean-field activity and enlargement factors, theory and Monte Carlo.
    Meanfield(MeanfieldArgs),
    /// Monte-Carlo experiments on the Fisher matrix and related products.
    FisherProbe(ProbeArgs),
    /// Train a student net on a teacher-student task.
    Train(TrainArgs),
    /// Closed-form unit Fisher coefficients.
    UnitCoeffs(UnitCoeffsArgs),
    /// Re-run the job recorded in a manifest.
    Replay(ReplayArgs),
}

/// Network description: a config file, inline flags, or both (flags win).
#[derive(Debug, Clone, Args)]
pub struct NetArgs {
    /// Key-value network config file.
    #[arg(long)]
    pub net: Option<PathBuf>,
    /// Layer widths n_0,...,n_L.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub activation: Option<ActivationKind>,
    /// Weight scale σ² (weight variance σ²/fan-in).
    #[arg(long)]
    pub sigma_w2: Option<f64>,
    /// Bias variance.
    #[arg(long)]
    pub sigma_b2: Option<f64>,
    /// Residual mixer scale; implies a residual net.
    #[arg(long)]
    pub sigma_v2: Option<f64>,
    /// Residual skip decay; implies a residual net.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct MeanfieldArgs {
    #[command(flatten)]
    pub net: NetArgs,
    /// Input activity A⁰.
    #[arg(long, default_value_t = 1.0)]
    pub a0: f64,
    /// Number of random nets for the Monte-Carlo column; 0 leaves it empty.
    #[arg(long, default_value_t = 10)]
    pub mc_seeds: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    Full,
    Domino,
    Decay,
    Nonclosure,
    Selfavg,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, value_enum)]
    pub mode: ProbeMode,
    /// Net widths for `full` and `domino`; the scanned widths n for `decay`,
    /// `nonclosure` and `selfavg`.
    #[command(flatten)]
    pub net: NetArgs,
    /// Monte-Carlo samples (mode-specific default).
    #[arg(long)]
    pub samples: Option<usize>,
    /// Domino: the layer m whose activity the Jacobian product starts from.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// Decay: number of weight layers in each scanned net.
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Decay: output width of each scanned plain net.
    #[arg(long, default_value_t = 1)]
    pub output_width: usize,
    /// Decay: sampled entries per stratum.
    #[arg(long, default_value_t = 2000)]
    pub entries: usize,
    /// Full: also write every upper-triangle entry with its standard error.
    #[arg(long)]
    pub dump_matrix: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub net: NetArgs,
    /// Train a residual net (σ_v² = 1, α = 0.5 unless given).
    #[arg(long)]
    pub resnet: bool,
    #[arg(long, default_value = "ungd", value_parser = parse_optimizer)]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.01, allow_negative_numbers = true)]
    pub eta: f64,
    /// Tikhonov damping added to A00 and Ann.
    #[arg(long, default_value_t = 0.0)]
    pub damping: f64,
    /// Average the last this many iterates.
    #[arg(long)]
    pub polyak_window: Option<usize>,
    /// Multiply the bias update by the current bias.
    #[arg(long)]
    pub compat_eq68_w0: bool,
    /// Held-out samples used for the summary losses.
    #[arg(long, default_value_t = 1000)]
    pub eval_samples: usize,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    s.parse().map_err(|e: fisher_ngd::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct UnitCoeffsArgs {
    #[arg(long, default_value = "relu")]
    pub activation: ActivationKind,
    /// Weight norm ‖w‖.
    #[arg(long, default_value_t = 1.0)]
    pub w: f64,
    /// Bias.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub w0: f64,
    #[arg(long, default_value_t = 0.0)]
    pub damping: f64,
    /// Dump coefficients for every unit of a saved parameter file instead.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run. Output defaults to `replay/` next to it.
    #[arg(long)]
    pub manifest: PathBuf,
}
