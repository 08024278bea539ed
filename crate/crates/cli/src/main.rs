//! `tractjoint` command-line interface.

mod commands;
mod error;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "tractjoint",
    version,
    about = "Joint tractogram registration and streamline clustering"
)]
struct Cli {
    /// Worker thread cap. Computation is single-threaded, so any value gives identical results.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic bundle tractogram with ground-truth labels.
    Synth(SynthArgs),
    /// Self-supervised pretraining of the embedding network and keypoint head.
    Pretrain(PretrainArgs),
    /// Joint registration and clustering training from a pretrained checkpoint.
    Train(TrainArgs),
    /// Warp a source tractogram into the space of a target.
    Register(RegisterArgs),
    /// Assign streamlines to clusters.
    Cluster(ClusterArgs),
    /// Compute evaluation metrics into a JSON report.
    Eval(EvalArgs),
    /// Run the end-to-end gradient check battery.
    Gradcheck(GradcheckArgs),
    /// Print the effective configuration.
    DumpConfig(DumpConfigArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Optional `key = value` spec (bundle_count, streamlines_per_bundle,
    /// jitter_sigma, n_points and deform_* keys).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write a copy under a random affine and nonlinear deformation
    /// (drawn with seed + 1000).
    #[arg(long)]
    pub warped_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainingCommon {
    /// Directory of `.tck` files, read in name order.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the epoch count of the config.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the seed of the config (or of the initial checkpoint).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Loss log path; defaults to `<out>.losses.ndjson`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: TrainingCommon,
    /// Continue from a pretraining checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Joint,
    RegistrationOnly,
    ClusteringOnly,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: TrainingCommon,
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long, value_enum, default_value_t = VariantArg::Joint)]
    pub variant: VariantArg,
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub save_transform: Option<PathBuf>,
    /// TPS smoothing.
    #[arg(long, default_value_t = 1e-6)]
    pub lambda: f64,
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out_labels: PathBuf,
    /// Confidence threshold; less confident streamlines get label -1.
    #[arg(long, default_value_t = 0.4)]
    pub thr: f64,
    /// Summary JSON path; printed to standard output when omitted.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted label files, one per tractogram.
    #[arg(long, num_args = 1..)]
    pub pred_labels: Vec<PathBuf>,
    /// Ground-truth label files, parallel to `--pred-labels`.
    #[arg(long, num_args = 1..)]
    pub true_labels: Vec<PathBuf>,
    /// Tractograms the labels refer to.
    #[arg(long, num_args = 1..)]
    pub tractograms: Vec<PathBuf>,
    /// Registered tractograms, paired with `--targets`, for ABD and wDice.
    #[arg(long, num_args = 1..)]
    pub registered: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub targets: Vec<PathBuf>,
    /// Cluster count for WMPG; defaults to the largest label + 1.
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long, default_value_t = tractjoint::metrics::DEFAULT_SPACING)]
    pub spacing: f64,
    #[arg(long, default_value_t = tractjoint::metrics::DEFAULT_MIN_COUNT)]
    pub min_count: usize,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Debug flag: corrupt one backward rule to prove failures are detected.
    #[arg(long)]
    pub corrupt_gradients: bool,
    /// JSON report path; printed to standard output when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DumpConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Train(a) => commands::train(&a),
        Command::Register(a) => commands::register(&a),
        Command::Cluster(a) => commands::cluster(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::DumpConfig(a) => commands::dump_config(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
