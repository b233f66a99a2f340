use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::ModelKind;

#[derive(Parser)]
#[command(name = "embedheight", version, about = "Surface heights from 8-bit embedding rasters")]
struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download and verify the files listed in a fetch manifest.
    Fetch(FetchArgs),
    /// Decode a GeoTIFF (local path or URL) into an EGRID file.
    Convert(ConvertArgs),
    /// Generate a synthetic embedding scene with known heights.
    Synth(SynthArgs),
    /// Remap nodata, normalize, align the DSM and write model inputs.
    Preprocess(PreprocessArgs),
    /// Train a U-Net, U-Net++ or Ridge model on the western part of a scene.
    Train(TrainArgs),
    /// Predict heights for a whole scene.
    Infer(InferArgs),
    /// Compute the height-difference statistics as CSV.
    Evaluate(EvaluateArgs),
    /// Write SVG charts: scatter, histograms, loss curves.
    Report(ReportArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct FetchArgs {
    /// Lines of `url length sha256 filename`.
    pub manifest: PathBuf,
    /// Overridden by EMBEDHEIGHT_CACHE.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[arg(long, default_value_t = 3)]
    pub retries: u32,
    /// Delay before the first retry; doubles afterwards.
    #[arg(long, default_value_t = 1000)]
    pub backoff_ms: u64,
}

#[derive(Args)]
pub struct ConvertArgs {
    /// GeoTIFF path or http(s) URL.
    pub input: String,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, short)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub radius: Option<usize>,
    /// linear or nonlinear
    #[arg(long)]
    pub mapping: Option<String>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long)]
    pub height_offset: Option<f64>,
    #[arg(long)]
    pub height_scale: Option<f64>,
    #[arg(long)]
    pub nonlinear_scale: Option<f64>,
    #[arg(long)]
    pub latent_rank: Option<usize>,
    #[arg(long)]
    pub unique_sd: Option<f64>,
    /// Add `shift_offset` metres to every column from this one on.
    #[arg(long, requires = "shift_offset")]
    pub shift_column: Option<usize>,
    #[arg(long, requires = "shift_column")]
    pub shift_offset: Option<f64>,
    /// Fraction of pixels set to the embedding nodata sentinel.
    #[arg(long, default_value_t = 0.0)]
    pub nodata_fraction: f64,
}

#[derive(Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub dsm: PathBuf,
    #[arg(long, short)]
    pub out_dir: PathBuf,
}

/// Flags that override the config file.
#[derive(Args, Default)]
pub struct Overrides {
    /// TOML config, or a run manifest to repeat a run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub dsm: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// First column of the eastern test region.
    #[arg(long)]
    pub boundary_column: Option<usize>,
    #[arg(long, value_enum)]
    pub variant: Option<ModelKind>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Weight initialization seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<u64>,
    #[arg(long)]
    pub plateau_factor: Option<f64>,
    #[arg(long)]
    pub plateau_patience: Option<u64>,
    #[arg(long)]
    pub stop_patience: Option<u64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    #[arg(long)]
    pub ridge_lambda: Option<f64>,
    #[arg(long)]
    pub ridge_subsample: Option<usize>,
    #[arg(long)]
    pub ridge_subsample_seed: Option<u64>,
    /// Inference tile size (defaults to the training patch size, at least four margins).
    #[arg(long)]
    pub infer_patch_size: Option<usize>,
    #[arg(long)]
    pub margin: Option<usize>,
    #[arg(long)]
    pub infer_batch_size: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: Overrides,
    /// Stop after this many epochs in this session; resume later with --resume.
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Continue from last.ckpt and epochs.csv in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub cfg: Overrides,
    /// A network checkpoint or a Ridge model file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// `label=path` or `path`; repeat for several predictions.
    #[arg(long = "pred", required = true)]
    pub preds: Vec<String>,
    #[arg(long)]
    pub reference: PathBuf,
    /// Report `<label>_train` west of this column and `<label>_test` from it on.
    #[arg(long)]
    pub boundary_column: Option<usize>,
    /// CSV destination; stdout when omitted.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long, requires = "reference")]
    pub pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    pub reference: Option<PathBuf>,
    /// epochs.csv from a training run.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value = "prediction")]
    pub label: String,
    /// Histogram bin width in metres.
    #[arg(long, default_value_t = 1.0)]
    pub bin_width: f64,
    #[arg(long, short)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Fetch(a) => commands::fetch(a),
        Command::Convert(a) => commands::convert(a),
        Command::Synth(a) => commands::synth(a),
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Report(a) => commands::report(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
