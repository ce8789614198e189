//! `planeseg` command-line driver.
//!
//! Exit status is 0 on success, 2 when a run produces no planes and 1 on
//! any error. Diagnostics go to stderr; stdout carries one JSON summary line
//! per command (or the requested table when no output file is given).

mod commands;
mod mesh;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use planeseg::pipeline::{PipelineConfig, PipelineError, SuiteKind};
use planeseg::ransac::EstimatorVariant;
use planeseg_io::IoError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Usage(String),
}

/// Successful command outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Done,
    Empty,
}

#[derive(Parser, Debug)]
#[command(
    name = "planeseg",
    version,
    about = "Plane segmentation from monocular depth and normal maps"
)]
struct Cli {
    /// Pipeline configuration (TOML); unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RANSAC seed; for `synth`, the first scene seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
    /// Skip dense CRF refinement.
    #[arg(long, global = true)]
    no_crf: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment one view.
    Single(SingleArgs),
    /// Segment two posed views and fuse their planes.
    TwoView(TwoViewArgs),
    /// Score predictions against ground truth (JSON lines).
    Eval(EvalArgs),
    /// Run a variant x parameter grid over a scene suite (CSV).
    Ablate(AblateArgs),
    /// Render synthetic scenes with ground truth.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Seq,
    Gc,
    Prox,
}

impl From<VariantArg> for EstimatorVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Seq => EstimatorVariant::SequentialRansac,
            VariantArg::Gc => EstimatorVariant::GraphCutRansac,
            VariantArg::Prox => EstimatorVariant::ProximityGraphCutRansac,
        }
    }
}

#[derive(Args, Debug)]
pub struct SingleArgs {
    /// View directory with rgb.png, depth.pfm, normals.pfm, intrinsics.json.
    #[arg(long)]
    pub view: Option<PathBuf>,
    #[arg(long)]
    pub rgb: Option<PathBuf>,
    #[arg(long)]
    pub depth: Option<PathBuf>,
    #[arg(long)]
    pub normals: Option<PathBuf>,
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
    /// Also write mesh.ply regardless of the config.
    #[arg(long)]
    pub ply: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TwoViewArgs {
    /// Two-view directory: view0/, view1/, poses.json, tracks.json.
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// One subdirectory per scene.
    #[arg(long)]
    pub pred: PathBuf,
    /// One subdirectory per scene; a `gt/` subdirectory is used when present.
    #[arg(long)]
    pub gt: PathBuf,
    /// Report planes pardoned by the geometric tolerance protocol.
    #[arg(long)]
    pub tolerance: bool,
    /// Score fused two-view planes by average precision.
    #[arg(long)]
    pub two_view: bool,
    /// Write JSON lines here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CrfArg {
    On,
    Off,
    Both,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Directory of synthetic scenes as written by `synth`.
    #[arg(long, conflicts_with = "suite")]
    pub scenes: Option<PathBuf>,
    /// Generate the suite in memory instead.
    #[arg(long)]
    pub suite: Option<SuiteKind>,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Variants to compare (default: --variant, else all three).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub variants: Vec<VariantArg>,
    #[arg(long, value_enum)]
    pub crf: Option<CrfArg>,
    /// `dotted.key=v1,v2,...`; repeated sweeps form a cross product.
    #[arg(long)]
    pub sweep: Vec<String>,
    /// Leave out the wall-time column so reruns compare equal.
    #[arg(long)]
    pub no_wall_time: bool,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value = "noiseless")]
    pub suite: SuiteKind,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Scene spec (TOML); writes that one scene directly into --out.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Options shared by every command after config resolution.
pub struct Global {
    pub config: PipelineConfig,
    pub seed: Option<u64>,
    pub variant: Option<VariantArg>,
    pub no_crf: bool,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = planeseg_io::read_file(path)?;
            let text = String::from_utf8(text)
                .map_err(|_| CliError::Usage(format!("{}: not utf-8", path.display())))?;
            PipelineConfig::from_toml_str(&text)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.ransac.seed = seed;
    }
    if let Some(v) = cli.variant {
        config.variant = v.into();
    }
    if cli.no_crf {
        config.use_crf = false;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let global = Global {
        config: load_config(&cli)?,
        seed: cli.seed,
        variant: cli.variant,
        no_crf: cli.no_crf,
    };
    match &cli.command {
        Command::Single(a) => commands::single(&global, a),
        Command::TwoView(a) => commands::two_view(&global, a),
        Command::Eval(a) => commands::eval(&global, a),
        Command::Ablate(a) => commands::ablate(&global, a),
        Command::Synth(a) => commands::synth(&global, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Empty) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
