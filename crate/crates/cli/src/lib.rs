//! Command-line front end for `pseudolabel-kit`.
//!
//! Every subcommand is a file-to-file stage with a `--seed`; randomness is
//! drawn from per-image (or per-instance) streams derived from that seed, so
//! results do not depend on the worker count set by `PSEUDOLABEL_KIT_THREADS`.

mod commands;
mod table;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pseudolabel_kit::synth::{DetectorNoise, SceneConfig};
use pseudolabel_kit::Error;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "PSEUDOLABEL_KIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "pseudolabel-kit", version, about = "Pseudo-label generation and weak-supervision toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset, its ground truth and simulated detections.
    Synth(SynthArgs),
    /// Turn detections on weakly-annotated images into pseudo labels.
    Generate(GenerateArgs),
    /// Score a pseudo-label file against ground truth.
    Evaluate(EvaluateArgs),
    /// Compare labeling strategies on identical detections.
    Compare(CompareArgs),
    /// Tabulate exact, sampled, max and threshold estimates of the EM objective.
    EmStudy(EmStudyArgs),
    /// Image-label probabilities and loss for random proposal scores.
    Wsl(WslArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyName {
    Rps,
    Threshold,
    Top1,
}

#[derive(Debug, Clone, Args)]
pub struct SceneArgs {
    /// Number of scenes.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 640)]
    pub width: u32,
    #[arg(long, default_value_t = 480)]
    pub height: u32,
    #[arg(long, default_value_t = 1)]
    pub min_instances: usize,
    #[arg(long, default_value_t = 6)]
    pub max_instances: usize,
    /// Smallest box side in pixels.
    #[arg(long, default_value_t = 24.0)]
    pub min_size: f64,
    /// Largest box side in pixels.
    #[arg(long, default_value_t = 120.0)]
    pub max_size: f64,
    /// Allow instances to overlap freely.
    #[arg(long)]
    pub allow_overlap: bool,
}

impl SceneArgs {
    pub fn config(&self) -> SceneConfig {
        SceneConfig {
            width: self.width,
            height: self.height,
            instance_count: (self.min_instances, self.max_instances),
            num_classes: self.classes,
            box_size: (self.min_size, self.max_size),
            overlap_allowed: self.allow_overlap,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct NoiseArgs {
    /// Corner jitter standard deviation in pixels.
    #[arg(long, default_value_t = 3.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    pub miss_rate: f64,
    /// Mean number of spurious detections per image.
    #[arg(long, default_value_t = 0.5)]
    pub fp_rate: f64,
    #[arg(long, default_value_t = 0.3)]
    pub dup_rate: f64,
    /// Logit-space slope applied to true-positive scores.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub calibration_slope: f64,
    /// Logit-space offset applied to true-positive scores.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub calibration_offset: f64,
}

impl NoiseArgs {
    pub fn noise(&self) -> DetectorNoise {
        DetectorNoise {
            localization_sigma: self.sigma,
            score_calibration: (self.calibration_slope, self.calibration_offset),
            false_positive_rate: self.fp_rate,
            miss_rate: self.miss_rate,
            duplicate_rate: self.dup_rate,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub noise: NoiseArgs,
    /// Fraction of images whose boxes are dropped, leaving image labels only.
    #[arg(long, default_value_t = 0.5)]
    pub weak_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = "synth")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    /// Annotation file with fully and weakly annotated images.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Detections of the agent detector.
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long, value_enum, default_value = "rps")]
    pub strategy: StrategyName,
    /// Confidence threshold of the threshold strategy.
    #[arg(long, default_value_t = 0.9)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.5)]
    pub iou_thr: f64,
    /// Number of RPS label sets drawn per image.
    #[arg(long, default_value_t = 1)]
    pub b_prime: usize,
    /// Let the threshold strategy keep classes absent from the image labels.
    #[arg(long)]
    pub ignore_weak_labels: bool,
    /// Label every image, not only the weakly annotated ones.
    #[arg(long)]
    pub all_images: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "pseudo_labels.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Fully annotated ground truth.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub pseudo_labels: PathBuf,
    /// Minimum IoU for a pseudo label to count as a true positive.
    #[arg(long, default_value_t = 0.5)]
    pub iou_thr: f64,
    /// Accepted for uniformity; evaluation draws no random numbers.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV report path; a JSON mirror is written next to it. Defaults to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    /// Ground truth to compare on instead of synthetic scenes.
    #[arg(long, requires = "detections")]
    pub annotations: Option<PathBuf>,
    /// Fixed detections for `--annotations`; otherwise the detector is simulated.
    #[arg(long, requires = "annotations")]
    pub detections: Option<PathBuf>,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub noise: NoiseArgs,
    /// Strategies to compare (repeatable); all three by default.
    #[arg(long, value_enum)]
    pub strategy: Vec<StrategyName>,
    #[arg(long, default_value_t = 0.9)]
    pub tau: f64,
    /// IoU threshold for suppression inside the strategies.
    #[arg(long, default_value_t = 0.5)]
    pub iou_thr: f64,
    /// IoU threshold for matching against ground truth.
    #[arg(long, default_value_t = 0.5)]
    pub match_iou: f64,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV table path; a JSON mirror is written next to it. Defaults to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EmStudyArgs {
    /// Proposals per random instance.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Number of random instances.
    #[arg(long, default_value_t = 1)]
    pub instances: usize,
    /// Largest Monte-Carlo sample size; the grid runs over powers of ten up to it.
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    /// Additional Monte-Carlo sample size to report.
    #[arg(long, default_value_t = 1)]
    pub b_prime: usize,
    /// Comma-separated prior foreground probabilities (overrides random instances).
    #[arg(long, value_delimiter = ',', requires = "model")]
    pub prior: Option<Vec<f64>>,
    /// Comma-separated model foreground probabilities.
    #[arg(long, value_delimiter = ',', requires = "prior")]
    pub model: Option<Vec<f64>>,
    /// Prior probability at or above which the threshold estimator marks foreground.
    #[arg(long, default_value_t = 0.9)]
    pub p_t: f64,
    /// Weight of the weakly-annotated terms in the pooled objective rows.
    #[arg(long, default_value_t = 2.0)]
    pub lambda_u: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV table path; a JSON mirror is written next to it. Defaults to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct WslArgs {
    /// Number of proposals.
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Proposals subsampled for the objectness-weighted probability.
    #[arg(long, default_value_t = 512)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV table path; a JSON mirror is written next to it. Defaults to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 2 for usage or validation errors, 1
/// for runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let pool = match thread_pool() {
        Ok(pool) => pool,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 2;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        2
    } else {
        1
    }
}

fn thread_pool() -> Result<rayon::ThreadPool, String> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| e.to_string())
}

fn dispatch(command: Command) -> pseudolabel_kit::Result<()> {
    match command {
        Command::Synth(a) => commands::synth(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::EmStudy(a) => commands::em_study(&a),
        Command::Wsl(a) => commands::wsl(&a),
    }
}
