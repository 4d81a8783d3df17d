//! Command-line flags and their resolution into a fully materialized job.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use deeptile::image::Rect;
use deeptile::optim::Precision;
use deeptile::{Alpha, Direction, ExpansionPlan, LayerId, LossConfig, OptimConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "deeptile", version, about = "Seamless texture tiles by Gram-matrix feature matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a tile next to the input texture
    Tile(TileArgs),
    /// Fill a rectangular hole in the input texture
    Fill(FillArgs),
    /// Grow the input texture by a sequence of tiles
    Expand(ExpandArgs),
    /// Validate a weight file and list its layers
    CheckWeights(CheckWeightsArgs),
    /// Repeat a run recorded in a manifest.json
    Rerun(RerunArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 100000 iterations, learning rate 0.0005
    Paper,
    /// 1000 iterations, learning rate 0.01, 64x64 input
    Desk,
}

/// Side of the exemplar the desk profile crops to.
pub const DESK_SIDE: usize = 64;

impl Profile {
    pub fn optim(self) -> OptimConfig {
        match self {
            Profile::Paper => OptimConfig::default(),
            Profile::Desk => OptimConfig::desk(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Single,
    Double,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Input PNG
    #[arg(long)]
    pub input: PathBuf,
    /// Weight file in the VGGW format
    #[arg(long, conflicts_with = "random_weights", required_unless_present = "random_weights")]
    pub weights: Option<PathBuf>,
    /// Use randomly initialized weights with this seed instead of a weight file
    #[arg(long, value_name = "SEED")]
    pub random_weights: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Preset for iterations and learning rate
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seed for noise initialization
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated contributing layers
    #[arg(long, value_delimiter = ',', default_value = "layer1,pool1,pool2,pool3,pool4")]
    pub layers: Vec<LayerId>,
    /// Comma-separated layer weights (defaults to equal weights summing to 1)
    #[arg(long, value_delimiter = ',')]
    pub layer_weights: Option<Vec<f64>>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Worker threads (default: all cores)
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_enum, default_value = "single")]
    pub precision: PrecisionArg,
}

#[derive(Debug, Args)]
pub struct TileArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub direction: Direction,
    #[arg(long, default_value_t = 1.0)]
    pub factor_w: f64,
    #[arg(long, default_value_t = 1.0)]
    pub factor_h: f64,
    /// Initialize the tile with an attenuated mirror of the exemplar
    #[arg(long)]
    pub seam_removal: bool,
    /// Mirror decay rate in (0, 1), or `auto`
    #[arg(long, default_value = "auto")]
    pub alpha: Alpha,
}

#[derive(Debug, Args)]
pub struct FillArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Hole rectangle as TOP,LEFT,HEIGHT,WIDTH
    #[arg(long, value_parser = parse_hole)]
    pub hole: Rect,
}

#[derive(Debug, Args)]
pub struct ExpandArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// JSON expansion plan
    #[arg(long)]
    pub plan: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckWeightsArgs {
    #[arg(long)]
    pub weights: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_hole(s: &str) -> Result<Rect, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("hole must be TOP,LEFT,HEIGHT,WIDTH: {e}"))?;
    match parts[..] {
        [top, left, height, width] => Ok(Rect::new(top, left, height, width)),
        _ => Err(format!("hole needs 4 values, got {}", parts.len())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum WeightsSource {
    File { path: PathBuf },
    Random { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Job {
    Tile {
        direction: Direction,
        factor_w: f64,
        factor_h: f64,
        seam_removal: bool,
        alpha: Alpha,
    },
    Fill {
        hole: Rect,
    },
    Expand {
        plan: ExpansionPlan,
    },
}

/// Every parameter of a run with all defaults filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub job: Job,
    pub input: PathBuf,
    pub weights: WeightsSource,
    pub profile: Profile,
    /// Crop the input to `crop_to × crop_to` (desk profile).
    pub crop_to: Option<usize>,
    pub seed: u64,
    pub layers: Vec<LayerId>,
    pub layer_weights: Vec<f64>,
    pub optim: OptimConfig,
    pub threads: Option<usize>,
}

impl ResolvedConfig {
    pub fn loss_config(&self) -> anyhow::Result<LossConfig> {
        Ok(LossConfig::new(self.layers.clone(), self.layer_weights.clone())?)
    }
}

fn resolve_common(common: &CommonArgs, job: Job) -> anyhow::Result<ResolvedConfig> {
    let profile = common.profile.unwrap_or(Profile::Paper);
    let mut optim = profile.optim();
    if let Some(n) = common.iterations {
        optim.iterations = n;
    }
    if let Some(lr) = common.lr {
        optim.learning_rate = lr;
    }
    if let Some(n) = common.log_every {
        optim.log_every = n;
    }
    optim.checkpoint_every = common.checkpoint_every;
    optim.seed = common.seed;
    optim.precision = match common.precision {
        PrecisionArg::Single => Precision::Single,
        PrecisionArg::Double => Precision::Double,
    };
    optim.validate()?;

    let layer_weights = match &common.layer_weights {
        Some(w) => w.clone(),
        None => vec![1.0 / common.layers.len() as f64; common.layers.len()],
    };
    LossConfig::new(common.layers.clone(), layer_weights.clone())?;

    let weights = match (&common.weights, common.random_weights) {
        (Some(path), None) => WeightsSource::File { path: path.clone() },
        (None, Some(seed)) => WeightsSource::Random { seed },
        _ => bail!("exactly one of --weights and --random-weights is required"),
    };
    if common.threads == Some(0) {
        bail!("--threads must be at least 1");
    }
    let crop_to = match (profile, &job) {
        (Profile::Desk, Job::Tile { .. } | Job::Expand { .. }) => Some(DESK_SIDE),
        _ => None,
    };
    Ok(ResolvedConfig {
        job,
        input: common.input.clone(),
        weights,
        profile,
        crop_to,
        seed: common.seed,
        layers: common.layers.clone(),
        layer_weights,
        optim,
        threads: common.threads,
    })
}

/// Resolves a run command; `None` for commands that are not synthesis jobs.
pub fn resolve(command: &Command) -> anyhow::Result<Option<ResolvedConfig>> {
    let cfg = match command {
        Command::Tile(t) => {
            if let Alpha::Value(v) = t.alpha {
                if !(v > 0.0 && v < 1.0) {
                    bail!("--alpha must lie in (0, 1)");
                }
            }
            resolve_common(
                &t.common,
                Job::Tile {
                    direction: t.direction,
                    factor_w: t.factor_w,
                    factor_h: t.factor_h,
                    seam_removal: t.seam_removal,
                    alpha: t.alpha,
                },
            )?
        }
        Command::Fill(f) => resolve_common(&f.common, Job::Fill { hole: f.hole })?,
        Command::Expand(e) => {
            let text = std::fs::read_to_string(&e.plan)
                .with_context(|| format!("reading plan {}", e.plan.display()))?;
            let plan = ExpansionPlan::from_json(&text)?;
            resolve_common(&e.common, Job::Expand { plan })?
        }
        Command::CheckWeights(_) | Command::Rerun(_) => return Ok(None),
    };
    Ok(Some(cfg))
}
