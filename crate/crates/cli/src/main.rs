//! `gsr`: compress Gaussian-splatting scenes, restore their renders and refine them.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use gsr_core::pipeline::Axis;
use gsr_core::Error;

/// Exit codes.
const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "gsr", version, about = "Restoration-augmented compression for 3D Gaussian splatting")]
#[command(args_override_self = true)]
pub struct Cli {
    /// TOML file with default flag values; top-level keys apply to every
    /// subcommand, `[name]` tables to one. Command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// More logging (-v info, -vv debug). Threads: set GSR_THREADS.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CompressArgs {
    /// Bits per position coordinate.
    #[arg(long, default_value_t = 16)]
    pub pos_bits: u8,
    /// Bits for log-scale, rotation and opacity.
    #[arg(long, default_value_t = 8)]
    pub scalar_bits: u8,
    /// Bits for the DC colour coefficients.
    #[arg(long, default_value_t = 8)]
    pub dc_bits: u8,
    /// Entries in the higher-order SH codebook (power of two).
    #[arg(long, default_value_t = 1024)]
    pub codebook_size: u32,
    #[arg(long, default_value_t = 20)]
    pub kmeans_iters: u32,
    /// Seed for codebook initialisation.
    #[arg(long, default_value_t = 0)]
    pub kmeans_seed: u64,
    /// Use the alternate bit allocation (12/6/6 bits, 256 entries); ignores the other compression flags.
    #[arg(long)]
    pub alternate: bool,
}

#[derive(Args, Debug, Clone)]
pub struct PipelineArgs {
    /// Original cloud (.ply); ground truth views are its renders.
    #[arg(long)]
    pub cloud: PathBuf,
    /// Camera list (.json).
    #[arg(long)]
    pub cameras: PathBuf,
    /// Restorer checkpoint (.gsrn); required unless --no-prior.
    #[arg(long)]
    pub restorer: Option<PathBuf>,
    #[command(flatten)]
    pub compress: CompressArgs,
    /// Residual codec quality (1..=10).
    #[arg(long, default_value_t = 6)]
    pub quality: u8,
    /// Disable the learned restorer: targets are degraded + decoded residual.
    #[arg(long)]
    pub no_prior: bool,
    /// Disable side information: no residuals are coded.
    #[arg(long)]
    pub no_sideinfo: bool,
    /// Also supervise unsampled training views, restored without side information.
    #[arg(long)]
    pub include_unsampled: bool,
    /// Fraction of views held out for evaluation.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    /// Fraction of training views that carry side information.
    #[arg(long, default_value_t = 0.4)]
    pub ratio: f64,
    /// Refinement iterations.
    #[arg(long, default_value_t = 5000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.2)]
    pub lambda_ssim: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Background colour r,g,b.
    #[arg(long, value_delimiter = ',', num_args = 3, default_value = "0,0,0")]
    pub background: Vec<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a random toy cloud.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        /// Half-width of the cube the Gaussians are placed in.
        #[arg(long, default_value_t = 1.0)]
        extent: f64,
        #[arg(long, default_value_t = 3)]
        sh_degree: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a ring of orbit cameras looking at a point.
    Cameras {
        #[arg(long, default_value_t = 40)]
        count: usize,
        #[arg(long, default_value_t = 2.5)]
        radius: f64,
        #[arg(long, value_delimiter = ',', num_args = 3, default_value = "0,0,0")]
        look_at: Vec<f64>,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Horizontal field of view in degrees.
        #[arg(long, default_value_t = 40.0)]
        fov: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a cloud (.ply or .gscc) to view_NNNN.png files.
    Render {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Only these view indices (default: all).
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', num_args = 3, default_value = "0,0,0")]
        background: Vec<f64>,
    },
    /// Compress a .ply cloud into a .gscc container.
    Compress {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        args: CompressArgs,
    },
    /// Decode a .gscc container back into a .ply cloud.
    Decompress {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a restorer training set from clouds rendered before and after compression.
    Pairs {
        /// Comma-separated .ply clouds.
        #[arg(long, value_delimiter = ',', required = true)]
        clouds: Vec<PathBuf>,
        #[arg(long)]
        cameras: PathBuf,
        /// Residual quality of the stored side information.
        #[arg(long, default_value_t = 3)]
        quality: u8,
        #[command(flatten)]
        compress: CompressArgs,
        #[arg(long, value_delimiter = ',', num_args = 3, default_value = "0,0,0")]
        background: Vec<f64>,
        /// Output .gspd file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the restoration network on one or more .gspd files.
    TrainRestorer {
        #[arg(long, value_delimiter = ',', required = true)]
        pairs: Vec<PathBuf>,
        /// Output checkpoint (.gsrn).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        depth: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 20000)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Patch side, a multiple of 8.
        #[arg(long, default_value_t = 64)]
        patch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1e-5)]
        lr_min: f64,
        #[arg(long, default_value_t = 0.1)]
        lambda_grad: f64,
        /// Lowest and highest quality used to re-code side information.
        #[arg(long, value_delimiter = ',', num_args = 2, default_value = "2,8")]
        augment_quality: Vec<u8>,
        /// Probability of zeroing a sample's side information.
        #[arg(long, default_value_t = 0.1)]
        side_dropout: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Loss curve CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Code the residual between an original and a degraded image.
    EncodeResidual {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        degraded: PathBuf,
        #[arg(long, default_value_t = 6)]
        quality: u8,
        /// Output .gsrs bitstream.
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore a degraded image, optionally with a residual bitstream.
    Restore {
        #[arg(long)]
        degraded: PathBuf,
        /// Side-information bitstream (.gsrs); zero side information if absent.
        #[arg(long)]
        residual: Option<PathBuf>,
        /// Restorer checkpoint; without it the output is degraded + residual.
        #[arg(long)]
        restorer: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine a compressed cloud against target images view_NNNN.png.
    Refine {
        /// Starting cloud (.gscc or .ply).
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        targets_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        iterations: usize,
        #[arg(long, default_value_t = 0.2)]
        lambda_ssim: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', num_args = 3, default_value = "0,0,0")]
        background: Vec<f64>,
        /// Loss curve CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compare renders of a cloud with renders of a reference cloud.
    Eval {
        /// Cloud under test (.ply or .gscc).
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', num_args = 3, default_value = "0,0,0")]
        background: Vec<f64>,
        /// Per-view report CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-view squared-error maps.
        #[arg(long)]
        error_maps: Option<PathBuf>,
    },
    /// Run the pipeline at several residual qualities and write rd.csv.
    RdSweep {
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long, value_delimiter = ',', default_value = "2,4,6,8")]
        qualities: Vec<u8>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation grid over prior, sideinfo, ratio and compressor axes.
    Ablate {
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long, value_delimiter = ',', default_value = "prior,sideinfo")]
        axes: Vec<Axis>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw rd.csv files as an SVG chart.
    Plot {
        #[arg(long, value_delimiter = ',', required = true)]
        rd: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole pipeline and write every artifact.
    Run {
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Cameras { .. } => "cameras",
            Command::Render { .. } => "render",
            Command::Compress { .. } => "compress",
            Command::Decompress { .. } => "decompress",
            Command::Pairs { .. } => "pairs",
            Command::TrainRestorer { .. } => "train-restorer",
            Command::EncodeResidual { .. } => "encode-residual",
            Command::Restore { .. } => "restore",
            Command::Refine { .. } => "refine",
            Command::Eval { .. } => "eval",
            Command::RdSweep { .. } => "rd-sweep",
            Command::Ablate { .. } => "ablate",
            Command::Plot { .. } => "plot",
            Command::Run { .. } => "run",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Numeric(_) | Error::Diverged { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Index of the subcommand name and the `--config` value, found without a
/// full parse so that required flags may come from the file.
fn locate(args: &[OsString]) -> (Option<usize>, Option<PathBuf>) {
    let names: Vec<String> = Cli::command().get_subcommands().map(|c| c.get_name().to_string()).collect();
    let mut sub = None;
    let mut config = None;
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy();
        if s == "--config" {
            config = args.get(i + 1).map(PathBuf::from);
            i += 1;
        } else if let Some(v) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else if sub.is_none() && !s.starts_with('-') && names.iter().any(|n| *n == s) {
            sub = Some(i);
        }
        i += 1;
    }
    (sub, config)
}

/// Parses `args`, merging in the config file if one is named.
fn parse(args: Vec<OsString>) -> Result<Cli, clap::Error> {
    let (Some(index), Some(path)) = locate(&args) else {
        return Cli::try_parse_from(&args);
    };
    let name = args[index].to_string_lossy().into_owned();
    let extra = config::config_flags(&path, &name)
        .map_err(|m| clap::Error::raw(clap::error::ErrorKind::InvalidValue, format!("{m}\n")))?;
    Cli::try_parse_from(config::splice_after_subcommand(&args, index, extra))
}

fn main() -> ExitCode {
    let args: Vec<OsString> = std::env::args_os().collect();
    let cli = match parse(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Ok(n) = std::env::var("GSR_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: GSR_THREADS must be a positive integer, got {n:?}");
                return ExitCode::from(EXIT_USAGE);
            }
        }
    }
    let name = cli.command.name();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {name}: {e}");
            if let Error::Diverged { last_good: Some(p), .. } = e.root() {
                eprintln!("last good checkpoint: {}", p.display());
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
