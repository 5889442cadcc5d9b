use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "imfuse", version, about = "Incomplete-multimodal fusion experiments on synthetic tiles")]
pub struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one config field by dotted path, e.g. `pretrain.epochs=5`.
    /// Values are parsed as JSON, falling back to a plain string.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output root (otherwise `output` from the config, then $IMFUSE_OUT).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Dataset directory (default `<out>/dataset`).
    #[arg(long, global = true, value_name = "DIR")]
    pub dataset: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and its split manifest.
    Synth(SynthArgs),
    /// Masked multimodal pretraining.
    Pretrain(PretrainArgs),
    /// Train a segmentation model.
    Train(TrainArgs),
    /// Evaluate a trained model on every non-empty modality subset.
    Eval(EvalArgs),
    /// Pretrain once, then train and evaluate every ablation variant.
    Ablate(AblateArgs),
    /// Render loss curves and evaluation tables as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Continue from the run's checkpoint if one exists.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many epochs; resume later with `--resume`.
    #[arg(long, value_name = "EPOCHS")]
    pub stop_after: Option<usize>,
    /// Run directory name under the output root.
    #[arg(long, default_value = "pretrain")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// scratch, full-finetune or partial-finetune.
    #[arg(long)]
    pub mode: Option<String>,
    /// Train on the full modality set only.
    #[arg(long)]
    pub no_random: bool,
    #[arg(long)]
    pub no_lstm: bool,
    #[arg(long)]
    pub no_mask: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Pretrained checkpoint (default `<out>/pretrain/checkpoint`).
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory holding the trained model.
    #[arg(long, default_value = "train")]
    pub name: String,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated variants (default: the six ablation columns).
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    #[arg(long, default_value = "ablate")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Loss curves (`epoch term value`) or evaluation/ablation tables.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}
