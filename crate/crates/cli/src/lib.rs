//! The `nowcast` command-line tool.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use nowcast_core::data::Split;
use nowcast_core::ensemble::TieBreak;
use nowcast_core::losses::LossKind;
use nowcast_models::OptimizerKind;

pub mod config;
pub mod data_cmd;
pub mod manifest;
pub mod model_cmd;
pub mod plot;
pub mod score_cmd;

use config::{GridPreset, ModelPreset, RunConfig};
use manifest::RunManifest;

/// A configuration problem detected by the tool itself.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

/// 2 for configuration errors, 3 for everything about the data.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<nowcast_core::Error>() {
            return if e.is_config() { EXIT_CONFIG } else { EXIT_DATA };
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
    }
    EXIT_DATA
}

#[derive(Debug, Parser)]
#[command(name = "nowcast", version, about = "Rain nowcasting from satellite context")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic dataset files.
    Synth(SynthArgs),
    /// Train a model on the dataset files.
    Train(TrainArgs),
    /// Predict rain masks for one split.
    Predict(PredictArgs),
    /// Score a submission against ground truth.
    Eval(EvalArgs),
    /// Find the best probability threshold.
    Sweep(SweepArgs),
    /// Pixelwise majority vote of several submissions.
    Ensemble(EnsembleArgs),
    /// Take each region from the submission that scored best there.
    BestRegion(BestRegionArgs),
    /// Leaderboard table from score files.
    Report(ReportArgs),
    /// Plot one predicted cube as a grid of hourly slots.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_delimiter = ',')]
    pub regions: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub years: Option<Vec<i32>>,
    #[arg(long)]
    pub train_samples: Option<usize>,
    #[arg(long)]
    pub val_samples: Option<usize>,
    #[arg(long)]
    pub max_speed: Option<f64>,
    #[arg(long)]
    pub n_cells: Option<usize>,
    #[arg(long, value_enum)]
    pub grid: Option<GridPreset>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Only use these regions.
    #[arg(long, value_delimiter = ',')]
    pub regions: Option<Vec<String>>,
    #[arg(long, value_enum)]
    pub model: Option<ModelPreset>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossKind>,
    /// Also train on the validation split.
    #[arg(long)]
    pub train_all: bool,
    #[arg(long)]
    pub auto_pos_weight: bool,
    #[arg(long)]
    pub temporal_shift: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint file, or a training output directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Scale probabilities by the val/train climatology ratio.
    #[arg(long)]
    pub calibrate: bool,
    /// Submission name; defaults to the checkpoint's name.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub submission: PathBuf,
    /// Ground truth as a submission directory.
    #[arg(long, conflicts_with = "data")]
    pub truth: Option<PathBuf>,
    /// Ground truth from dataset targets.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    /// Average per-slot IoUs instead of pooling counts.
    #[arg(long)]
    pub per_slot: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Prediction directory holding `probs/`.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Member submission directories.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub members: Vec<PathBuf>,
    /// Named member set resolved under `--runs`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[arg(long, value_parser = parse_tie_break)]
    pub tie_break: Option<TieBreak>,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct BestRegionArgs {
    #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
    pub members: Vec<PathBuf>,
    /// Score CSV files covering every member.
    #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
    pub scores: Vec<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
    pub scores: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Submission directory.
    #[arg(long)]
    pub submission: PathBuf,
    #[arg(long)]
    pub region: String,
    #[arg(long)]
    pub year: i32,
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    #[arg(long, default_value_t = 1)]
    pub stride_hours: usize,
    #[arg(long, default_value_t = 8)]
    pub hours: usize,
}

fn parse_json_enum<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    parse_json_enum(s)
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    parse_json_enum(s)
}

fn parse_tie_break(s: &str) -> std::result::Result<TieBreak, String> {
    parse_json_enum(s)
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: nowcast_core::Error| e.to_string())
}

/// Loaded configuration with `--seed` applied, plus what the manifest needs.
pub struct Session {
    pub cfg: RunConfig,
    pub config_path: Option<PathBuf>,
}

impl Session {
    pub fn new(common: &Common) -> Result<Self> {
        let (mut cfg, _) = RunConfig::load(common.config.as_deref())?;
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        cfg.train.options.seed = cfg.seed;
        Ok(Session { cfg, config_path: common.config.clone() })
    }

    /// Called once flags are folded into `cfg`.
    pub fn manifest(&self, command: &str) -> Result<RunManifest> {
        Ok(RunManifest::start(command, self.config_path.as_deref(), self.cfg.seed, &self.cfg.to_toml()?))
    }
}

pub fn default_out(common: &Common, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command))
}

pub fn run(cli: Cli) -> Result<()> {
    let session = Session::new(&cli.common)?;
    let c = &cli.common;
    match &cli.command {
        Command::Synth(a) => data_cmd::synth(session, c, a),
        Command::Train(a) => model_cmd::train(session, c, a),
        Command::Predict(a) => model_cmd::predict(session, c, a),
        Command::Eval(a) => score_cmd::eval(session, c, a),
        Command::Sweep(a) => score_cmd::sweep(session, c, a),
        Command::Ensemble(a) => score_cmd::ensemble(session, c, a),
        Command::BestRegion(a) => score_cmd::best_region(session, c, a),
        Command::Report(a) => score_cmd::report(session, c, a),
        Command::Plot(a) => plot::plot(session, c, a),
    }
}
