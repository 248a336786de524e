mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Prior-guided self-distillation pipeline on patch-tokenized crops.
///
/// Set DIRL_THREADS to cap worker threads (default: all cores) and
/// SOURCE_DATE_EPOCH to pin manifest timestamps.
#[derive(Parser, Debug)]
#[command(name = "dirl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic crop dataset (crops, centroid CSVs, bag manifest).
    GenSynthetic(GenArgs),
    /// Pretrain an encoder with one of the distillation variants.
    Pretrain(PretrainArgs),
    /// Encode every crop with a pretrained extractor into a feature archive.
    ExtractFeatures(ExtractArgs),
    /// Train and evaluate the dual-stream MIL classifier over several seeds.
    Mil(MilArgs),
    /// Bin aggregated attention values and export overlays.
    AnalyzeAttention(AttentionArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Output dataset directory (must be empty or absent).
    #[arg(long)]
    pub out: PathBuf,
    /// Master seed of the generator.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub crops_per_bag: usize,
    #[arg(long, default_value_t = 50)]
    pub bags_per_class: usize,
    /// Square crop side in pixels.
    #[arg(long, default_value_t = 32)]
    pub image_size: u32,
    /// Number of cell types recorded in the centroid files.
    #[arg(long, default_value_t = 2)]
    pub cell_types: usize,
    /// Poisson mean cell count per class, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "4,9")]
    pub density: Vec<f64>,
    /// Clustering factor per class in [0,1], comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,0.8")]
    pub clustering: Vec<f64>,
    /// Overwrite an existing non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Pretraining variant.
    #[arg(long, value_parser = ["baseline", "cellback", "cellback-v2", "dirl"])]
    pub variant: String,
    /// Dataset directory (as written by gen-synthetic).
    #[arg(long)]
    pub data: PathBuf,
    /// Config file of `key = value` lines; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Add the auxiliary per-token cell-count regression loss.
    #[arg(long)]
    pub aux_cell_count: bool,
    /// Attention logit scale: 1/sqrt(d_head) (`head`) or 1/sqrt(d) (`model`).
    #[arg(long, value_parser = ["head", "model"])]
    pub attn_scale: Option<String>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Extractor checkpoint (extractor.ckpt from pretrain).
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; receives features.bin.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MilArgs {
    /// Feature archive (features.bin).
    #[arg(long)]
    pub features: PathBuf,
    /// Bag manifest CSV (`bag_id,label`); its labels replace the archive's.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of MIL seeds; seeds 0..S are used.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 5e-2)]
    pub weight_decay: f64,
    /// Output directory; receives metrics.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AttentionArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; receives profile.json and overlays/.
    #[arg(long)]
    pub out: PathBuf,
    /// Map to analyze.
    #[arg(long, default_value = "agg", value_parser = ["agg", "c", "b", "cc", "bb", "cb", "bc"])]
    pub which: String,
    /// Encoder layer (0-based); defaults to the last.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Also write one profile and overlay per head.
    #[arg(long)]
    pub per_head: bool,
    /// Number of crops (in dataset order) to render overlays for.
    #[arg(long, default_value_t = 4)]
    pub overlays: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = commands::init_threads().and_then(|_| match cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::ExtractFeatures(a) => commands::extract_features(&a),
        Command::Mil(a) => commands::mil(&a),
        Command::AnalyzeAttention(a) => commands::analyze_attention(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
