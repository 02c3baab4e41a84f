//! Flag definitions for every subcommand.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "hieraseg",
    about = "Hierarchical segmentation toolkit: generate data, train, transfer, decode, evaluate",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse a hierarchy document and report its structure.
    ValidateHierarchy {
        /// Path to the document, or a builtin name (mm5b, crop).
        hierarchy: String,
        /// Optional directory for the JSON summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Derive coarse-level label rasters from a finest-level raster.
    DeriveLabels {
        /// Hierarchy document path or builtin name.
        #[arg(long)]
        hierarchy: String,
        /// HTF raster of finest-level class indices.
        #[arg(long)]
        fine: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Transfer a trained checkpoint to a target-task dataset.
    Transfer(TransferArgs),
    /// Decode per-level logit files into label rasters.
    Decode(DecodeArgs),
    /// Score predicted label rasters against ground truth.
    Eval(EvalArgs),
    /// Run an experiment suite over seeds and report trends.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    /// Hierarchy document path or builtin name (mm5b, crop).
    #[arg(long, default_value = "mm5b")]
    pub hierarchy: String,
    /// Task shape: "source" uses the hierarchy directly; "crop" builds the
    /// crop-extension task from a source hierarchy (requires --hierarchy to
    /// be the source document and --crop-hierarchy the target tree).
    #[arg(long, default_value = "source")]
    pub task: String,
    /// Crop-task target tree (path or builtin name).
    #[arg(long, default_value = "crop")]
    pub crop_hierarchy: String,
    /// Fraction of regions drawn from crop classes in the crop task.
    #[arg(long, default_value_t = 0.6)]
    pub crop_bias: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub images: usize,
    /// Square image edge in pixels.
    #[arg(long, default_value_t = 24)]
    pub size: usize,
    /// Voronoi regions per scene.
    #[arg(long, default_value_t = 8)]
    pub regions: usize,
    /// Gaussian noise scale.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Training dataset directory (from gen-data).
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset for metrics (defaults to the training data).
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Head kind: flat | bhccm.
    #[arg(long, default_value = "bhccm")]
    pub head: String,
    /// Fusion directions for the bhccm head: none | c2f | f2c | bidirectional.
    #[arg(long, default_value = "bidirectional")]
    pub fusion: String,
    /// Objective: ce | hce | hsc.
    #[arg(long, default_value = "hsc")]
    pub loss: String,
    /// Per-level cross-entropy weights, comma separated.
    #[arg(long, default_value = "1,1,1")]
    pub lambda: String,
    /// Weight of the path-consistency term.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Encoder stage widths, comma separated.
    #[arg(long, default_value = "6,12,24")]
    pub widths: String,
    /// Decoder output channels.
    #[arg(long, default_value_t = 12)]
    pub cdim: usize,
    /// Decoder convolution kernel (1 or 3).
    #[arg(long, default_value_t = 1)]
    pub dec_kernel: usize,
    /// Decoder used for reported metrics: argmax | jsps.
    #[arg(long, default_value = "argmax")]
    pub decode: String,
    /// Also write per-level logits for the validation images.
    #[arg(long, default_value_t = false)]
    pub dump_logits: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TransferArgs {
    /// Target-task training dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out target dataset for metrics.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Frozen source checkpoint directory.
    #[arg(long)]
    pub branch2: PathBuf,
    /// Source hierarchy document (path or builtin) for hash validation.
    #[arg(long, default_value = "mm5b")]
    pub branch2_hierarchy: String,
    /// Cross-domain mapping document (path or builtin name "crop").
    #[arg(long, default_value = "crop")]
    pub mapping: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 300)]
    pub iters: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Branch 1 starting point: branch2 (copy encoder/decoder) | scratch.
    #[arg(long, default_value = "branch2")]
    pub init: String,
    /// Knowledge sharing through interaction units: on | off.
    #[arg(long, default_value = "on")]
    pub cdks: String,
    /// Semantic alignment through soft masks: on | off.
    #[arg(long, default_value = "on")]
    pub cdsa: String,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value = "argmax")]
    pub decode: String,
}

#[derive(Args, Debug, Clone)]
pub struct DecodeArgs {
    /// Directory holding L1/..Lk subdirectories of per-image logit HTFs.
    #[arg(long)]
    pub logits: PathBuf,
    #[arg(long)]
    pub hierarchy: String,
    /// argmax | jsps.
    #[arg(long, default_value = "jsps")]
    pub mode: String,
    /// Path scoring squash: sigmoid | softmax.
    #[arg(long, default_value = "sigmoid")]
    pub scores: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write an indexed-color PNG per level.
    #[arg(long, default_value_t = false)]
    pub png: bool,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Predicted rasters: directory with L1/..Lk subdirectories.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth rasters: dataset directory or bare labels directory.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub hierarchy: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    /// Which suite: bhccm | transfer.
    #[arg(long, default_value = "bhccm")]
    pub suite: String,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training iterations per suite cell.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Scene edge length.
    #[arg(long, default_value_t = 24)]
    pub size: usize,
}
