//! The `depthvo` command line.
//!
//! Every subcommand accepts `--config FILE`, a `key=value` file whose keys are
//! long flag names. Its entries are applied before the command-line flags, so
//! explicit flags win. Each run writes the fully resolved flags to
//! `config.txt` in its output directory; passing that file back through
//! `--config` repeats the run.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use depthvo_core::features::FeatureKind;
use depthvo_core::losses::{LossWeights, Supervision};
use depthvo_core::synthetic::Preset;

use crate::dataio::calib::parse_key_values;
use crate::error::{self, Error, Result};

mod commands;

pub const CONFIG_FILE: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(name = "depthvo", version, about = "Stereo-supervised depth and visual odometry by view synthesis")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic stereo sequence with ground truth.
    Synth(SynthArgs),
    /// Optimize per-instance inverse depth and pose directly.
    Optimize(OptimizeArgs),
    /// Train the depth and pose networks.
    Train(TrainArgs),
    /// Depth error metrics of predicted against ground-truth PFM maps.
    EvalDepth(EvalDepthArgs),
    /// Odometry drift of a predicted against a ground-truth pose file.
    EvalOdom(EvalOdomArgs),
    /// Photometric and feature matching cost curves along a stereo scanline.
    MatchCompare(MatchCompareArgs),
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// key=value file of flag defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct LossArgs {
    #[arg(long, default_value_t = 1.0)]
    pub lambda_ir: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_fr: f64,
    #[arg(long, default_value_t = 10.0)]
    pub lambda_ds: f64,
    /// full (stereo + temporal), monocular or stereo-only.
    #[arg(long, default_value = "full", value_parser = parse_supervision)]
    pub mode: Supervision,
    /// identity, gradient-descriptor or random-conv.
    #[arg(long, default_value = "gradient-descriptor", value_parser = parse_features)]
    pub features: FeatureKind,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
}

impl LossArgs {
    pub fn weights(&self) -> Result<LossWeights> {
        Ok(LossWeights::new(self.lambda_ir, self.lambda_fr, self.lambda_ds)?)
    }
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// plane, slanted, smooth or textureless-band.
    #[arg(long, default_value = "plane", value_parser = parse_preset)]
    pub preset: Preset,
    #[arg(long, default_value_t = 6)]
    pub frames: usize,
    /// Image width; intrinsics are rescaled from the 96x64 preset.
    #[arg(long, default_value_t = 96)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
}

#[derive(Args, Debug, Clone)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    /// Sequence directory.
    #[arg(long)]
    pub sequence: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Initial depth guess in meters; inverse depth starts constant at its reciprocal.
    #[arg(long, default_value_t = 10.0)]
    pub init_depth: f64,
    /// Optimize at most this many instances.
    #[arg(long)]
    pub max_instances: Option<usize>,
    /// Depth cap in meters for metrics against ground truth.
    #[arg(long, default_value_t = 80.0)]
    pub cap: f64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    /// Training sequence directories, comma separated or repeated.
    #[arg(long, required = true, value_delimiter = ',')]
    pub sequence: Vec<PathBuf>,
    /// Held-out sequence directories.
    #[arg(long, value_delimiter = ',')]
    pub heldout: Vec<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Learning rate; on resume the checkpoint's rate is kept unless given.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from a checkpoint file.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Train with the feature reconstruction term switched off.
    #[arg(long)]
    pub no_feature_loss: bool,
    /// Train twice, with and without the feature term, and tabulate both.
    #[arg(long)]
    pub paired: bool,
    #[arg(long, default_value_t = 80.0)]
    pub cap: f64,
}

#[derive(Args, Debug, Clone)]
pub struct EvalDepthArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Predicted depth PFM, or a directory of them.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth depth PFM, or a directory with matching file names.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value = "50,80", value_delimiter = ',')]
    pub cap: Vec<f64>,
    /// Single-channel PFM; nonzero pixels are evaluated.
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalOdomArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Sub-sequence start stride in frames.
    #[arg(long, default_value_t = 10)]
    pub stride: usize,
    #[arg(long, default_value = "100,200,300,400,500,600,700,800", value_delimiter = ',')]
    pub lengths: Vec<f64>,
    /// Rescale predicted translations to the ground truth first (monocular runs).
    #[arg(long)]
    pub align_scale: bool,
    /// Ignore frames before this index.
    #[arg(long, default_value_t = 0)]
    pub start_frame: usize,
}

#[derive(Args, Debug, Clone)]
pub struct MatchCompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Sequence directory; a preset is rendered when absent.
    #[arg(long)]
    pub sequence: Option<PathBuf>,
    #[arg(long, default_value = "textureless-band", value_parser = parse_preset)]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// Probe row; defaults to the image centre.
    #[arg(long)]
    pub row: Option<usize>,
    #[arg(long)]
    pub col: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub min_disparity: i64,
    #[arg(long, default_value_t = 8)]
    pub max_disparity: i64,
    /// Support window radius for the feature cost.
    #[arg(long, default_value_t = 10)]
    pub radius: usize,
    /// Support window radius for the photometric cost.
    #[arg(long, default_value_t = 0)]
    pub photometric_radius: usize,
    #[arg(long, default_value = "gradient-descriptor", value_parser = parse_features)]
    pub features: FeatureKind,
}

fn parse_supervision(s: &str) -> std::result::Result<Supervision, String> {
    Supervision::parse(s).ok_or_else(|| format!("unknown mode {s:?}; expected full, monocular or stereo-only"))
}

fn parse_features(s: &str) -> std::result::Result<FeatureKind, String> {
    FeatureKind::parse(s).ok_or_else(|| format!("unknown features {s:?}; expected identity, gradient-descriptor or random-conv"))
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    Preset::parse(s).ok_or_else(|| format!("unknown preset {s:?}"))
}

/// Splices the entries of a `--config` file in right after the subcommand name.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = args.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else { return Ok(args) };
    if args.len() < 2 {
        return Ok(args);
    }
    let entries = parse_key_values(&error::read_text(&path)?, &path)?;
    let mut injected = Vec::new();
    for (key, (_, value)) in entries {
        let flag = key.replace('_', "-");
        if flag == "config" {
            continue;
        }
        match value.as_str() {
            "true" => injected.push(OsString::from(format!("--{flag}"))),
            "false" => {}
            _ => injected.push(OsString::from(format!("--{flag}={value}"))),
        }
    }
    let mut out = args[..2].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[2..]);
    Ok(out)
}

/// Resolved flags of the chosen subcommand, one `key=value` per line in flag order.
pub fn resolved_config(matches: &ArgMatches) -> String {
    let Some((name, sub)) = matches.subcommand() else { return String::new() };
    let root = Cli::command();
    let Some(cmd) = root.find_subcommand(name) else { return String::new() };
    let mut lines = String::new();
    for arg in cmd.get_arguments() {
        let id = arg.get_id().as_str();
        let Some(long) = arg.get_long() else { continue };
        if matches!(long, "config" | "out" | "help" | "version") {
            continue;
        }
        let Some(raw) = sub.get_raw(id) else { continue };
        let values: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
        lines.push_str(&format!("{long}={}\n", values.join(",")));
    }
    lines
}

/// Parses, resolves the config file and runs one command.
pub fn run(args: impl IntoIterator<Item = impl Into<OsString>>) -> Result<()> {
    let args = expand_config(args.into_iter().map(Into::into).collect())?;
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{}", e.render());
            return Ok(());
        }
        Err(e) => return Err(usage(e)),
    };
    let cli = Cli::from_arg_matches(&matches).map_err(usage)?;
    let config = resolved_config(&matches);
    let started = std::time::Instant::now();
    let out = match &cli.command {
        Command::Synth(a) => &a.run.out,
        Command::Optimize(a) => &a.run.out,
        Command::Train(a) => &a.run.out,
        Command::EvalDepth(a) => &a.run.out,
        Command::EvalOdom(a) => &a.run.out,
        Command::MatchCompare(a) => &a.run.out,
    };
    write_config(out, &config)?;
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Optimize(a) => commands::optimize(&a),
        Command::Train(a) => commands::train(&a),
        Command::EvalDepth(a) => commands::eval_depth(&a),
        Command::EvalOdom(a) => commands::eval_odom(&a),
        Command::MatchCompare(a) => commands::match_compare(&a),
    }?;
    eprintln!("wall_time_s={:.3}", started.elapsed().as_secs_f64());
    Ok(())
}

fn usage(e: clap::Error) -> Error {
    Error::Usage(e.render().to_string())
}

fn write_config(out: &Path, config: &str) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    error::write(&out.join(CONFIG_FILE), config)
}

/// Entry point for the binary: runs and maps the outcome to an exit code.
pub fn main_with_args(args: impl IntoIterator<Item = impl Into<OsString>>) -> i32 {
    match run(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
