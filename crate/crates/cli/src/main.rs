mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "epiflow", version, about = "Epipolar-supervised flow, flow-guided matching and two-view fitting")]
pub struct Cli {
    /// Worker thread cap (falls back to EPIFLOW_THREADS, then all cores).
    #[arg(long, global = true, env = "EPIFLOW_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Symmetric epipolar distance of a B<-A flow under known geometry.
    SedEval(SedEvalArgs),
    /// Fit the four triplet flows under the configured losses.
    Optimize(OptimizeArgs),
    /// Two-stage flow-guided keypoint matching.
    Match(MatchArgs),
    /// Flow, match or pose metrics.
    Eval(EvalArgs),
    /// Robust homography, fundamental matrix or pose from matches.
    Fit(FitArgs),
    /// Write a synthetic planar triplet fixture.
    Synth(SynthArgs),
    /// Backward-warp a PGM/PPM image with a flow field.
    Warp(WarpArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("geometry").required(true).args(["pose", "fmat"])))]
pub struct SedEvalArgs {
    /// Flow from image A into image B (.flo).
    #[arg(long)]
    pub flow: PathBuf,
    /// Two intrinsics records; required with --pose.
    #[arg(long, requires = "pose")]
    pub cams: Option<PathBuf>,
    #[arg(long, conflicts_with = "fmat")]
    pub pose: Option<PathBuf>,
    #[arg(long)]
    pub fmat: Option<PathBuf>,
    /// key=value loss settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub cams: PathBuf,
    #[arg(long)]
    pub pose: PathBuf,
    /// Synthetic B -> B' transform record.
    #[arg(long)]
    pub transform: PathBuf,
    /// Image size as WxH.
    #[arg(long, value_parser = parse_size)]
    pub size: (usize, usize),
    /// key=value loss and optimizer settings, plus `spacing`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory with initial b_from_a.flo, a_from_b.flo, bp_from_b.flo, b_from_bp.flo.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Gaussian noise (pixels) added to the initial lattice nodes.
    #[arg(long, default_value_t = 0.0)]
    pub init_noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory with ground-truth flows; adds AEPE columns to the trace.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub kpts_a: PathBuf,
    #[arg(long)]
    pub kpts_b: PathBuf,
    /// Flow from A into B.
    #[arg(long)]
    pub flow_ba: PathBuf,
    /// Flow from B into A.
    #[arg(long)]
    pub flow_ab: PathBuf,
    #[arg(long, default_value_t = epiflow::matcher::DEFAULT_RADIUS)]
    pub radius: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["pred", "matches", "est_pose"])))]
pub struct EvalArgs {
    #[arg(long, requires = "gt")]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, requires = "gt_h")]
    pub matches: Option<PathBuf>,
    #[arg(long)]
    pub gt_h: Option<PathBuf>,
    /// Estimated homography for corner correctness; fitted from the matches when absent.
    #[arg(long)]
    pub est_h: Option<PathBuf>,
    #[arg(long, requires = "gt_pose")]
    pub est_pose: Option<PathBuf>,
    #[arg(long)]
    pub gt_pose: Option<PathBuf>,
    /// Comma-separated list; defaults depend on the mode.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<String>,
    /// Image size as WxH, for corner correctness.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    /// Keypoint count for the MMA table; defaults to the match count.
    #[arg(long)]
    pub num_features: Option<usize>,
    #[arg(long, default_value_t = 3.0)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Homography,
    Fundamental,
    Pose,
}

impl ModelKind {
    fn name(self) -> &'static str {
        match self {
            ModelKind::Homography => "homography",
            ModelKind::Fundamental => "fundamental",
            ModelKind::Pose => "pose",
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub matches: PathBuf,
    #[arg(long, value_enum)]
    pub model: ModelKind,
    /// Required for --model pose.
    #[arg(long, required_if_eq("model", "pose"))]
    pub cams: Option<PathBuf>,
    /// Inlier threshold in pixels.
    #[arg(long, default_value_t = 3.0)]
    pub threshold: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = 0.9999)]
    pub confidence: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = parse_size, default_value = "48x40")]
    pub size: (usize, usize),
    /// Add a fronto-parallel occluding plate in front of the background.
    #[arg(long)]
    pub occluder: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Flow sampled at each output pixel: output(x) = image(x + f(x)).
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got '{s}'"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in '{s}'"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in '{s}'"))?;
    if w == 0 || h == 0 {
        return Err(format!("size must be positive, got '{s}'"));
    }
    Ok((w, h))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot size the worker pool: {e}")))?;
    }
    match cli.command {
        Command::SedEval(a) => commands::sed_eval(&a),
        Command::Optimize(a) => commands::optimize(&a),
        Command::Match(a) => commands::match_cmd(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Warp(a) => commands::warp(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("epiflow: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
