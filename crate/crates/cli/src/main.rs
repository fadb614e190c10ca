//! `fusionsight` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
//! violation.

mod commands;
mod detect;
mod fail;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fusionsight::annunciator::Policy;
use fusionsight::train::LrSchedule;
use fusionsight::{FusionMode, HeadVariant};

#[derive(Debug, Parser)]
#[command(name = "fusionsight", version, about = "Multi-column object detection with laser distances and spoken-style announcements")]
pub struct Cli {
    /// Seed for every random choice (data synthesis, initialization, shuffling).
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic shapes dataset (PGM images plus train/test manifests).
    Synth(SynthArgs),
    /// Train a detector with three-way split training and weight averaging.
    Train(TrainArgs),
    /// Run a trained detector on images and write JSON-lines detections.
    Detect(DetectArgs),
    /// Report ROI classification accuracy on a labelled manifest.
    Eval(EvalArgs),
    /// Ray-cast a laser scan of a simple world into a scan CSV.
    SimulateScan(SimulateArgs),
    /// Compare analytic and finite-difference gradients of the composed detector.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 240)]
    pub images: usize,
    /// Comma-separated class names; class k is drawn as disc, rectangle, triangle for k mod 3.
    #[arg(long, value_delimiter = ',', default_value = "person,car,sign")]
    pub classes: Vec<String>,
    /// Fraction of images listed in train.txt; the rest go to test.txt.
    #[arg(long, default_value_t = 0.75)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
}

/// Settings stored in the model configuration.
#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value = "scale")]
    pub fusion: FusionMode,
    #[arg(long, default_value = "cnn1c")]
    pub head: HeadVariant,
    #[arg(long, value_delimiter = ',', default_value = "person,car,sign")]
    pub classes: Vec<String>,
    /// Canny low hysteresis threshold, as a fraction of the maximum gradient.
    #[arg(long, default_value_t = 0.1)]
    pub canny_low: f64,
    /// Canny high hysteresis threshold, as a fraction of the maximum gradient.
    #[arg(long, default_value_t = 0.2)]
    pub canny_high: f64,
    /// Horn-Schunck smoothness weight (alpha squared).
    #[arg(long, default_value_t = 100.0)]
    pub hs_alpha2: f64,
    #[arg(long, default_value_t = 100)]
    pub hs_iters: usize,
    /// Promote the best anchor of each ground-truth box to positive when none passes 0.7 IoU.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub gt_fallback: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest of `image label x1 y1 x2 y2` lines.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model file; `.json` selects the JSON form.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch metrics CSV (default: next to the model).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Per-layer gradient statistics CSV (default: next to the model).
    #[arg(long)]
    pub grad_stats: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long, default_value = "step")]
    pub lr_schedule: LrSchedule,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Images to process in order.
    pub images: Vec<PathBuf>,
    /// Also process images appearing in this directory until it stays idle.
    #[arg(long)]
    pub watch_dir: Option<PathBuf>,
    /// Seconds without a new image before watching stops.
    #[arg(long, default_value_t = 5.0)]
    pub idle_timeout: f64,
    /// Laser scan CSV (`angle_deg,range_mm`).
    #[arg(long, requires = "calib")]
    pub scan: Option<PathBuf>,
    /// Camera-grid to laser-band calibration (`row col -> band` lines).
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// interval:SECONDS, once[:TIMEOUT] or tooclose[:MM].
    #[arg(long, default_value = "once")]
    pub policy: Policy,
    /// Command run per announcement; `{text}` is replaced by the message, else it is appended.
    #[arg(long)]
    pub speak_cmd: Option<String>,
    /// Append announcement texts to this file.
    #[arg(long)]
    pub announce_file: Option<PathBuf>,
    /// JSON-lines output (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seconds between consecutive images.
    #[arg(long, default_value_t = 1.0)]
    pub frame_interval: f64,
    /// Use the previous image as the first flow frame instead of a synthetic shift.
    #[arg(long)]
    pub frame_pairs: bool,
    /// Drop proposals below this objectness; by default the top proposals
    /// after NMS all reach the head.
    #[arg(long, default_value_t = 0.0)]
    pub min_objectness: f64,
    /// Minimum head probability of the winning class.
    #[arg(long, default_value_t = 0.5)]
    pub min_score: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Also train a linear SVM on pooled features from this manifest and compare.
    #[arg(long)]
    pub svm_train: Option<PathBuf>,
    /// Train the SVM on the evaluated manifest itself.
    #[arg(long, conflicts_with = "svm_train")]
    pub svm_on_test: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scan CSV (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Wall across the heading at this distance in mm (repeatable).
    #[arg(long)]
    pub wall: Vec<f64>,
    /// Axis-aligned box `x1,y1,x2,y2` in mm (repeatable).
    #[arg(long = "box", value_parser = parse_box)]
    pub boxes: Vec<[f64; 4]>,
    /// Circle `cx,cy,r` in mm (repeatable).
    #[arg(long = "circle", value_parser = parse_circle)]
    pub circles: Vec<[f64; 3]>,
    /// Sensor pose `x,y,heading_deg`.
    #[arg(long, value_parser = parse_pose, default_value = "0,0,0")]
    pub pose: [f64; 3],
    /// Also write the default 3x3 calibration table here.
    #[arg(long)]
    pub write_calib: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Fusion mode to check (default: edges, flow and scale).
    #[arg(long)]
    pub fusion: Option<FusionMode>,
    #[arg(long, default_value = "cnn1c")]
    pub head: HeadVariant,
    /// Coordinates per mode.
    #[arg(long, default_value_t = 100)]
    pub coords: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("'{t}' is not a number")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", v.len()))
}

fn parse_box(s: &str) -> Result<[f64; 4], String> {
    let b = parse_floats::<4>(s)?;
    if b[2] <= b[0] || b[3] <= b[1] {
        return Err("box needs x2 > x1 and y2 > y1".into());
    }
    Ok(b)
}

fn parse_circle(s: &str) -> Result<[f64; 3], String> {
    let c = parse_floats::<3>(s)?;
    if c[2] <= 0.0 {
        return Err("circle radius must be positive".into());
    }
    Ok(c)
}

fn parse_pose(s: &str) -> Result<[f64; 3], String> {
    parse_floats::<3>(s)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let seed = cli.seed;
    let res = match cli.command {
        Command::Synth(a) => commands::synth(&a, seed),
        Command::Train(a) => commands::train(&a, seed),
        Command::Detect(a) => detect::run(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::SimulateScan(a) => commands::simulate_scan(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a, seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.kind.exit_code())
        }
    }
}
