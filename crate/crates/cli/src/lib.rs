//! Front end for the `deeptile` binary.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

pub mod config;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::Parser;
use deeptile::image::Rect;
use deeptile::tiling::{fill_hole_with, tile_with};
use deeptile::{
    expand, load_image, load_weights, random_weights, save_image, HoleSpec, NetworkWeights,
    OptimTrace, TextureImage, TileRequest,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{Cli, Command, Job, Profile, ResolvedConfig, WeightsSource};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Provenance record written next to every run's outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: ResolvedConfig,
    pub input_sha256: String,
    pub weights_sha256: Option<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub final_loss: Option<f64>,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn center_crop(img: &TextureImage, side: usize) -> anyhow::Result<TextureImage> {
    if img.height() < side || img.width() < side {
        anyhow::bail!(
            "desk profile needs an input of at least {side}x{side}, got {}x{}",
            img.height(),
            img.width()
        );
    }
    let rect = Rect::new((img.height() - side) / 2, (img.width() - side) / 2, side, side);
    Ok(img.crop(rect)?)
}

fn write_trace(trace: &OptimTrace, path: &Path) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    trace.write_csv(BufWriter::new(file))?;
    Ok(())
}

fn load_network(source: &WeightsSource) -> anyhow::Result<(NetworkWeights, Option<String>)> {
    Ok(match source {
        WeightsSource::File { path } => (
            load_weights(path).with_context(|| format!("loading weights {}", path.display()))?,
            Some(sha256_file(path)?),
        ),
        WeightsSource::Random { seed } => (random_weights(*seed), None),
    })
}

fn build_pool(threads: Option<usize>) {
    if let Some(n) = threads {
        // only the first call in a process takes effect
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("global thread pool already initialized");
        }
    }
}

/// Runs a resolved job, writing all outputs into `out`.
pub fn run_job(cfg: &ResolvedConfig, out: &Path) -> anyhow::Result<RunManifest> {
    let started = now_ms();
    build_pool(cfg.threads);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let input_sha256 = sha256_file(&cfg.input)?;
    let mut input = load_image(&cfg.input)
        .with_context(|| format!("loading {}", cfg.input.display()))?;
    if let Some(side) = cfg.crop_to {
        input = center_crop(&input, side)?;
    } else if cfg.profile == Profile::Desk && (input.height() < config::DESK_SIDE || input.width() < config::DESK_SIDE) {
        anyhow::bail!(
            "desk profile needs an input of at least {0}x{0}",
            config::DESK_SIDE
        );
    }
    let (weights, weights_sha256) = load_network(&cfg.weights)?;
    let loss_cfg = cfg.loss_config()?;
    let ckpt_dir: PathBuf = out.to_path_buf();
    let mut checkpoint = |it: usize, img: &TextureImage| -> deeptile::Result<()> {
        save_image(img, ckpt_dir.join(format!("ckpt_{it}.png")))
    };

    let trace = match &cfg.job {
        Job::Tile {
            direction,
            factor_w,
            factor_h,
            seam_removal,
            alpha,
        } => {
            let req = TileRequest {
                direction: *direction,
                factor_w: *factor_w,
                factor_h: *factor_h,
                seam_removal: *seam_removal,
                alpha: *alpha,
                seed: cfg.seed,
            };
            let outcome = tile_with(&input, &req, &weights, &loss_cfg, &cfg.optim, &mut checkpoint)?;
            save_image(outcome.merged.image(), out.join("merged.png"))?;
            save_image(&outcome.tile, out.join("tile.png"))?;
            outcome.trace
        }
        Job::Fill { hole } => {
            let hole = HoleSpec::new(*hole, input.height(), input.width())?;
            let (filled, trace) = fill_hole_with(
                &input,
                &hole,
                &weights,
                &loss_cfg,
                &cfg.optim,
                cfg.seed,
                &mut checkpoint,
            )?;
            save_image(&filled, out.join("merged.png"))?;
            trace
        }
        Job::Expand { plan } => {
            let (canvas, traces) = expand(&input, plan, &weights, &loss_cfg, &cfg.optim)?;
            save_image(&canvas, out.join("merged.png"))?;
            let mut all = OptimTrace::default();
            traces.iter().for_each(|t| all.extend_shifted(t));
            all
        }
    };
    write_trace(&trace, &out.join("trace.csv"))?;

    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        input_sha256,
        weights_sha256,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        final_loss: trace.final_loss(),
    };
    let path = out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(manifest)
}

fn check_weights(path: &Path) -> anyhow::Result<()> {
    let weights = load_weights(path).with_context(|| format!("loading {}", path.display()))?;
    for layer in weights.layers() {
        let (lo, hi) = layer
            .kernel
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        println!(
            "{:8} kernel {:?} bias [{}] range [{lo:.4}, {hi:.4}]",
            layer.name,
            layer.kernel_shape(),
            layer.out_channels
        );
    }
    println!("ok: {} layers", weights.layers().len());
    Ok(())
}

fn report(err: &anyhow::Error) {
    eprintln!("error: {err:#}");
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let resolved = match config::resolve(&cli.command) {
        Ok(r) => r,
        Err(e) => {
            report(&e);
            return EXIT_USAGE;
        }
    };
    let result = match (&cli.command, resolved) {
        (Command::CheckWeights(args), _) => check_weights(&args.weights),
        (Command::Rerun(args), _) => fs::read_to_string(&args.manifest)
            .with_context(|| format!("reading {}", args.manifest.display()))
            .and_then(|text| Ok(serde_json::from_str::<RunManifest>(&text)?))
            .and_then(|m| run_job(&m.config, &args.out))
            .map(|_| ()),
        (cmd, Some(cfg)) => {
            let out = match cmd {
                Command::Tile(a) => &a.common.out,
                Command::Fill(a) => &a.common.out,
                Command::Expand(a) => &a.common.out,
                _ => unreachable!("non-job commands handled above"),
            };
            run_job(&cfg, out).map(|_| ())
        }
        (_, None) => unreachable!("every job command resolves"),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            report(&e);
            EXIT_RUNTIME
        }
    }
}
