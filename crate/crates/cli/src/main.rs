//! `unloadlab`: shape generation, FE dataset sweeps, surrogate training and
//! evaluation from one command.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "unloadlab", version, about = "LV unloading: FE pairs, graph surrogate, evaluation")]
pub struct Cli {
    /// Flat `key = value` file; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic stage (falls back to UNLOADLAB_SEED, then 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for dataset generation and evaluation.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample shape parameters and write shapes.json.
    GenShapes(GenShapesArgs),
    /// Unload and re-inflate every shape over a parameter grid.
    BuildDataset(BuildDatasetArgs),
    /// Inflate an unloaded mesh to a cavity pressure.
    Inflate(FeArgs),
    /// Recover the unloaded mesh of an end-diastolic mesh.
    Unload(FeArgs),
    /// Train the unloading network.
    Train(TrainCmdArgs),
    /// Predict the unloaded mesh with a trained model.
    Predict(PredictArgs),
    /// Node-level metrics of a model on a split.
    Evaluate(EvaluateArgs),
    /// Train and evaluate ablation variants on the same split.
    Ablate(AblateArgs),
    /// Fit and evaluate the linear PCA displacement baseline.
    PcaBaseline(PcaArgs),
}

#[derive(Args, Debug)]
pub struct GenShapesArgs {
    #[arg(long)]
    pub n: Option<usize>,
    /// ellipsoid | pca
    #[arg(long)]
    pub kind: Option<String>,
    /// Mode file for `--kind pca`.
    #[arg(long)]
    pub modes: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct SolverArgs {
    #[arg(long)]
    pub ramp_steps: Option<usize>,
    #[arg(long)]
    pub newton_tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// follower | dead
    #[arg(long)]
    pub load_mode: Option<String>,
    /// Bulk penalty modulus in Pa (default 10·C).
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Reload mismatch tolerance for unloading, cm.
    #[arg(long)]
    pub unload_tol: Option<f64>,
    #[arg(long)]
    pub unload_max_iters: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BuildDatasetArgs {
    /// Shape file (default OUT/shapes.json).
    #[arg(long)]
    pub shapes: Option<PathBuf>,
    /// mini | full
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub modes: Option<PathBuf>,
    /// Fraction of shapes tagged shape-train.
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Overwrite an existing dataset.
    #[arg(long)]
    pub force: bool,
    /// Mesh resolution; setting any of these disables the node-count check.
    #[arg(long)]
    pub n_theta: Option<usize>,
    #[arg(long)]
    pub rings: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug)]
pub struct CaseArgs {
    /// Input mesh (.json native or .vtk legacy ASCII).
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Cavity pressure, mmHg.
    #[arg(long, allow_negative_numbers = true)]
    pub p: Option<f64>,
    /// Material stiffness C, Pa.
    #[arg(long, allow_negative_numbers = true)]
    pub c: Option<f64>,
    /// Endocardial helix angle, degrees.
    #[arg(long, allow_negative_numbers = true)]
    pub theta_endo: Option<f64>,
    /// Epicardial helix angle, degrees.
    #[arg(long, allow_negative_numbers = true)]
    pub theta_epi: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FeArgs {
    #[command(flatten)]
    pub case: CaseArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    /// A0 (full) .. A5.
    #[arg(long)]
    pub variant: Option<String>,
    /// on | off
    #[arg(long)]
    pub cycle: Option<String>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub gat_layers: Option<usize>,
    #[arg(long)]
    pub decoder_hidden: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lambda_cycle: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Supervision ratio: fraction of training cases with labels.
    #[arg(long)]
    pub sr: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainCmdArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// all | shape-train | shape-test | lovo:<P|C|theta_endo|theta_epi>=<value>:<train|test>
    #[arg(long)]
    pub split: Option<String>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub case: CaseArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Checkpoint or PCA baseline file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Defaults to the manifest recorded in the checkpoint.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    /// DSC distance threshold, cm.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Also write per-case error heatmaps (VTK).
    #[arg(long)]
    pub heatmaps: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Comma-separated variant ids.
    #[arg(long)]
    pub variants: Option<String>,
    #[arg(long)]
    pub train_split: Option<String>,
    #[arg(long)]
    pub test_split: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct PcaArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Number of shape and displacement modes.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub train_split: Option<String>,
    #[arg(long)]
    pub test_split: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

fn main() {
    config::init_logging();
    let cli = Cli::parse();
    if let Err(e) = commands::run(cli) {
        eprintln!("{}", config::error_line(&e));
        std::process::exit(e.exit_code());
    }
}
