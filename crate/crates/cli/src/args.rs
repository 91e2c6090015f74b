use std::path::PathBuf;

use bsbseg_core::bsb::BsbVariant;
use bsbseg_core::data::synth::MIN_EXTENT;
use bsbseg_core::decoder::{BoxPrompt, Point};
use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bsbseg", version, about = "Prompted segmentation with bidirectional selective-scan blocks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model and write its best checkpoint and history.
    Train(TrainArgs),
    /// Predict a class map for one image.
    Infer(InferArgs),
    /// Region and boundary metrics on a dataset split.
    Eval(EvalArgs),
    /// Train a grid of block variants and decoder settings over seeds.
    Ablate(AblateArgs),
    /// Operation counts and wall-clock scaling over resolutions.
    Bench(BenchArgs),
    /// Finite-difference checks of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub count: usize,
    /// `HxW`, each at least 32.
    #[arg(long, value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing non-empty directory.
    #[arg(long)]
    pub force: bool,
}

fn variant_names() -> PossibleValuesParser {
    PossibleValuesParser::new(BsbVariant::ALL.map(|v| v.name()))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Flat `key=value` file of training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured sequence-block variant (default dual_gate).
    #[arg(long, value_parser = variant_names())]
    pub variant: Option<String>,
    /// Drop the 4× and 8× encoder features from the decoder.
    #[arg(long)]
    pub no_ldf: bool,
    /// History CSV path; defaults to the checkpoint path with `.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Point prompts `row,col,+` (foreground) or `row,col,-` (background).
    #[arg(long, num_args = 1.., value_parser = parse_point)]
    pub points: Vec<Point>,
    /// Box prompt `r0,c0,r1,c1` (inclusive); may be repeated.
    #[arg(long = "box", value_parser = parse_box)]
    pub boxes: Vec<BoxPrompt>,
    #[arg(long)]
    pub tta: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = ["train", "val", "test"], default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub tta: bool,
    /// Gaussian noise deviation on the 0–255 pixel scale.
    #[arg(long, default_value_t = 0.0, value_parser = parse_non_negative)]
    pub noise_std: f64,
    /// Uniform random rotation range in degrees.
    #[arg(long, default_value_t = 0.0, value_parser = parse_non_negative)]
    pub rotate_range: f64,
    /// Seed of prompts and perturbations.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Flat `key=value` file of training settings shared by every run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Block variants to train; all five by default.
    #[arg(long, value_delimiter = ',', value_parser = variant_names())]
    pub variants: Vec<String>,
    /// Decoder settings to train: `on`, `off` or `both`.
    #[arg(long, value_parser = ["on", "off", "both"], default_value = "both")]
    pub ldf: String,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// CSV table of the individual runs.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Model to time; a freshly initialised default model when omitted.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = parse_resolution,
          default_value = "320x240,640x480,1024x768,1536x1152")]
    pub resolutions: Vec<(usize, usize)>,
    /// Time one sequence block over token lengths instead of the model.
    #[arg(long)]
    pub seq_only: bool,
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192,16384,32768,65536")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_parser = ["ssm", "bsb", "model"])]
    pub module: Option<String>,
    /// Relative-error tolerance; defaults to 1e-4 (ssm, bsb) and 1e-3 (model).
    #[arg(long)]
    pub tol: Option<f64>,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let a = a.trim().parse().map_err(|_| format!("bad extent in {s:?}"))?;
    let b = b.trim().parse().map_err(|_| format!("bad extent in {s:?}"))?;
    Ok((a, b))
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = parse_pair(s)?;
    if h < MIN_EXTENT || w < MIN_EXTENT {
        return Err(format!("{h}x{w} is below the {MIN_EXTENT}x{MIN_EXTENT} minimum"));
    }
    Ok((h, w))
}

/// Benchmark resolutions are written `WxH` (320x240 is landscape).
fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = parse_pair(s)?;
    if w == 0 || h == 0 {
        return Err(format!("empty resolution {s:?}"));
    }
    Ok((w, h))
}

fn parse_non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a non-negative number, got {s:?}")),
    }
}

fn parse_point(s: &str) -> Result<Point, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [r, c, sign] = parts[..] else {
        return Err(format!("expected row,col,+ or row,col,-, got {s:?}"));
    };
    let positive = match sign {
        "+" => true,
        "-" => false,
        _ => return Err(format!("point polarity must be + or -, got {sign:?}")),
    };
    Ok(Point {
        row: r.parse().map_err(|_| format!("bad row in {s:?}"))?,
        col: c.parse().map_err(|_| format!("bad column in {s:?}"))?,
        positive,
    })
}

fn parse_box(s: &str) -> Result<BoxPrompt, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad box coordinate in {s:?}")))
        .collect::<Result<_, _>>()?;
    let [r0, c0, r1, c1] = v[..] else {
        return Err(format!("expected r0,c0,r1,c1, got {s:?}"));
    };
    Ok(BoxPrompt { r0, c0, r1, c1 })
}
