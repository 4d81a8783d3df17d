//! Directional tiling, hole filling and multi-step expansion.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gram::LossConfig;
use crate::image::{
    alpha_optimal, build_merged_canvas, make_seam_init, make_white_noise, CanvasRegion, Direction,
    MergedCanvas, Rect, SeamNoiseConfig, TextureImage, TileGeometry,
};
use crate::image::scaled_extent;
use crate::network::MIN_INPUT_SIDE;
use crate::optim::{synthesize_with, OptimConfig, OptimTrace};
use crate::weights::NetworkWeights;

/// Seam-removal decay rate: explicit, or derived from the exemplar extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AlphaRepr", into = "AlphaRepr")]
pub enum Alpha {
    Auto,
    Value(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AlphaRepr {
    Value(f64),
    Keyword(String),
}

impl TryFrom<AlphaRepr> for Alpha {
    type Error = String;

    fn try_from(r: AlphaRepr) -> std::result::Result<Self, String> {
        match r {
            AlphaRepr::Value(v) => Ok(Alpha::Value(v)),
            AlphaRepr::Keyword(k) if k == "auto" => Ok(Alpha::Auto),
            AlphaRepr::Keyword(k) => Err(format!("alpha must be a number or \"auto\", got {k:?}")),
        }
    }
}

impl From<Alpha> for AlphaRepr {
    fn from(a: Alpha) -> Self {
        match a {
            Alpha::Auto => AlphaRepr::Keyword("auto".into()),
            Alpha::Value(v) => AlphaRepr::Value(v),
        }
    }
}

impl std::str::FromStr for Alpha {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(Alpha::Auto);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| format!("alpha must be a number or `auto`, got `{s}`"))?;
        if !(v > 0.0 && v < 1.0) {
            return Err(format!("alpha must lie in (0, 1), got {v}"));
        }
        Ok(Alpha::Value(v))
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alpha::Auto => f.write_str("auto"),
            Alpha::Value(v) => write!(f, "{v}"),
        }
    }
}

impl Alpha {
    /// Concrete α for an exemplar extent `c` perpendicular to the seam.
    pub fn resolve(self, c: usize) -> Result<f64> {
        match self {
            Alpha::Auto => alpha_optimal(c),
            Alpha::Value(v) if v > 0.0 && v < 1.0 => Ok(v),
            Alpha::Value(v) => Err(Error::AlphaOutOfRange(v)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileRequest {
    pub direction: Direction,
    pub factor_w: f64,
    pub factor_h: f64,
    pub seam_removal: bool,
    pub alpha: Alpha,
    pub seed: u64,
}

impl TileRequest {
    /// Factor-1 white-noise tile.
    pub fn new(direction: Direction) -> Self {
        TileRequest {
            direction,
            factor_w: 1.0,
            factor_h: 1.0,
            seam_removal: false,
            alpha: Alpha::Auto,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for f in [self.factor_w, self.factor_h] {
            if !(f.is_finite() && f > 0.0) {
                return Err(Error::InvalidRequest(format!(
                    "tiling factors must be positive, got {f}"
                )));
            }
        }
        if let Alpha::Value(v) = self.alpha {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::AlphaOutOfRange(v));
            }
        }
        Ok(())
    }
}

/// Tiling steps applied in order, each to the canvas grown by the last.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExpansionPlan(pub Vec<TileRequest>);

impl ExpansionPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: ExpansionPlan = serde_json::from_str(text)
            .map_err(|e| Error::InvalidRequest(format!("expansion plan: {e}")))?;
        plan.0.iter().try_for_each(TileRequest::validate)?;
        Ok(plan)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    /// Canvas size after every step for a `height × width` exemplar.
    pub fn final_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.0.iter().try_fold((height, width), |(h, w), req| {
            let g = step_geometry(req, req.direction, h, w, (height, width))?;
            Ok((g.canvas_height(), g.canvas_width()))
        })
    }
}

/// A rectangle of missing pixels inside a canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoleSpec {
    rect: Rect,
}

impl HoleSpec {
    pub fn new(rect: Rect, canvas_height: usize, canvas_width: usize) -> Result<Self> {
        if rect.area() == 0 {
            return Err(Error::InvalidHole(format!("{rect} is empty")));
        }
        if rect.top + rect.height > canvas_height || rect.left + rect.width > canvas_width {
            return Err(Error::InvalidHole(format!(
                "{rect} exceeds the {canvas_height}x{canvas_width} canvas"
            )));
        }
        if rect.area() == canvas_height * canvas_width {
            return Err(Error::InvalidHole("hole covers the whole canvas".into()));
        }
        Ok(HoleSpec { rect })
    }

    pub fn rect(&self) -> Rect {
        self.rect
    }
}

/// Result of a single tiling job.
#[derive(Clone, Debug)]
pub struct TileOutcome {
    pub tile: TextureImage,
    pub merged: MergedCanvas,
    pub trace: OptimTrace,
}

/// Receives `(iteration, in-progress canvas)` during optimization.
pub type CheckpointFn<'a> = dyn FnMut(usize, &TextureImage) -> Result<()> + 'a;

fn check_side(img: &TextureImage) -> Result<()> {
    if img.height() < MIN_INPUT_SIDE || img.width() < MIN_INPUT_SIDE {
        return Err(Error::ImageTooSmall {
            height: img.height(),
            width: img.width(),
            min: MIN_INPUT_SIDE,
        });
    }
    Ok(())
}

/// Geometry of a tile against a `height × width` canvas whose extent
/// perpendicular to the seam is `factor ×` the matching side of `reference`.
fn step_geometry(
    req: &TileRequest,
    direction: Direction,
    height: usize,
    width: usize,
    reference: (usize, usize),
) -> Result<TileGeometry> {
    let (tile_h, tile_w) = if direction.is_horizontal() {
        (height, scaled_extent(req.factor_w, reference.1))
    } else {
        (scaled_extent(req.factor_h, reference.0), width)
    };
    let mut g = TileGeometry::from_tile_dims(direction, height, width, tile_h, tile_w)?;
    g.factor_w = req.factor_w;
    g.factor_h = req.factor_h;
    Ok(g)
}

/// Synthesizes a tile on one side of `original`.
pub fn tile(
    original: &TextureImage,
    req: &TileRequest,
    weights: &NetworkWeights,
    loss_cfg: &LossConfig,
    opt_cfg: &OptimConfig,
) -> Result<TileOutcome> {
    tile_with(original, req, weights, loss_cfg, opt_cfg, &mut |_, _| Ok(()))
}

/// [`tile`] with a checkpoint callback.
///
/// Left and down tiles are produced by mirroring the exemplar, tiling to
/// the right or up, and mirroring the result back.
pub fn tile_with(
    original: &TextureImage,
    req: &TileRequest,
    weights: &NetworkWeights,
    loss_cfg: &LossConfig,
    opt_cfg: &OptimConfig,
    on_checkpoint: &mut CheckpointFn<'_>,
) -> Result<TileOutcome> {
    let reference = (original.height(), original.width());
    tile_scaled(original, req, reference, weights, loss_cfg, opt_cfg, on_checkpoint)
}

/// [`tile_with`] with tiling factors applied to the `reference` size
/// instead of the size of `original`.
fn tile_scaled(
    original: &TextureImage,
    req: &TileRequest,
    reference: (usize, usize),
    weights: &NetworkWeights,
    loss_cfg: &LossConfig,
    opt_cfg: &OptimConfig,
    on_checkpoint: &mut CheckpointFn<'_>,
) -> Result<TileOutcome> {
    check_side(original)?;
    req.validate()?;
    let (base, base_dir, unflip): (TextureImage, Direction, fn(&TextureImage) -> TextureImage) =
        match req.direction {
            Direction::Left => (original.flip_horizontal(), Direction::Right, TextureImage::flip_horizontal),
            Direction::Down => (original.flip_vertical(), Direction::Up, TextureImage::flip_vertical),
            d => (original.clone(), d, TextureImage::clone),
        };
    let geometry = step_geometry(req, base_dir, base.height(), base.width(), reference)?;
    let init = if req.seam_removal {
        let c = geometry.perpendicular_extent();
        let cfg = SeamNoiseConfig::new(req.alpha.resolve(c)?, req.seed, c)?;
        make_seam_init(&base, &geometry, &cfg)?
    } else {
        make_white_noise(geometry.tile_height, geometry.tile_width, req.seed)?
    };
    let canvas = build_merged_canvas(&base, &init, base_dir)?;
    let mut checkpoint = |it: usize, img: &TextureImage| on_checkpoint(it, &unflip(img));
    let (result, trace) = synthesize_with(&base, &canvas, weights, loss_cfg, opt_cfg, &mut checkpoint)?;

    let merged_img = unflip(result.image());
    let final_geometry = step_geometry(req, req.direction, original.height(), original.width(), reference)?;
    let tile = merged_img.crop(final_geometry.tile_rect())?;
    let merged = build_merged_canvas(original, &tile, req.direction)?;
    debug_assert_eq!(merged.image(), &merged_img);
    Ok(TileOutcome { tile, merged, trace })
}

/// Largest rectangle of `height × width` that avoids `hole` and is at least
/// `min × min`. Ties go to the topmost, then leftmost, then widest.
pub fn largest_hole_free_rect(height: usize, width: usize, hole: Rect, min: usize) -> Option<Rect> {
    // any rectangle disjoint from the hole lies entirely in one of these bands
    let below = hole.top + hole.height;
    let right = hole.left + hole.width;
    let candidates = [
        Rect::new(0, 0, hole.top, width),
        Rect::new(below, 0, height - below, width),
        Rect::new(0, 0, height, hole.left),
        Rect::new(0, right, height, width - right),
    ];
    candidates
        .into_iter()
        .filter(|r| r.height >= min && r.width >= min)
        .min_by_key(|r| (std::cmp::Reverse(r.area()), r.top, r.left, std::cmp::Reverse(r.width)))
}

/// Fills `hole` so it matches the statistics of the largest hole-free
/// rectangle of `canvas`. Pixels outside the hole are never modified.
pub fn fill_hole(
    canvas: &TextureImage,
    hole: &HoleSpec,
    weights: &NetworkWeights,
    loss_cfg: &LossConfig,
    opt_cfg: &OptimConfig,
    seed: u64,
) -> Result<(TextureImage, OptimTrace)> {
    fill_hole_with(canvas, hole, weights, loss_cfg, opt_cfg, seed, &mut |_, _| Ok(()))
}

/// [`fill_hole`] with a checkpoint callback.
pub fn fill_hole_with(
    canvas: &TextureImage,
    hole: &HoleSpec,
    weights: &NetworkWeights,
    loss_cfg: &LossConfig,
    opt_cfg: &OptimConfig,
    seed: u64,
    on_checkpoint: &mut CheckpointFn<'_>,
) -> Result<(TextureImage, OptimTrace)> {
    check_side(canvas)?;
    let rect = HoleSpec::new(hole.rect, canvas.height(), canvas.width())?.rect;
    let exemplar_rect = largest_hole_free_rect(canvas.height(), canvas.width(), rect, MIN_INPUT_SIDE)
        .ok_or_else(|| {
            Error::InvalidHole(format!(
                "no hole-free {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE} region around {rect}"
            ))
        })?;
    let exemplar = canvas.crop(exemplar_rect)?;
    let noise = make_white_noise(rect.height, rect.width, seed)?;
    let w = canvas.width();
    let mut mask = vec![true; canvas.height() * w];
    let mut init = canvas.clone();
    for r in 0..rect.height {
        for c in 0..rect.width {
            mask[(rect.top + r) * w + rect.left + c] = false;
            init.set_pixel(rect.top + r, rect.left + c, noise.pixel(r, c));
        }
    }
    let merged = MergedCanvas::new(init, mask, CanvasRegion::Hole(rect))?;
    let (out, trace) = synthesize_with(&exemplar, &merged, weights, loss_cfg, opt_cfg, on_checkpoint)?;
    Ok((out.into_image(), trace))
}

/// Grows `original` by applying each step of `plan` to the current canvas.
/// Tiling factors scale the size of `original`, so two factor-1 right
/// steps triple the width. Returns the final canvas and one trace per step.
pub fn expand(
    original: &TextureImage,
    plan: &ExpansionPlan,
    weights: &NetworkWeights,
    loss_cfg: &LossConfig,
    opt_cfg: &OptimConfig,
) -> Result<(TextureImage, Vec<OptimTrace>)> {
    let mut canvas = original.clone();
    let mut traces = Vec::with_capacity(plan.0.len());
    for (step, req) in plan.0.iter().enumerate() {
        log::info!(
            "expansion step {}/{}: {} on {}x{}",
            step + 1,
            plan.0.len(),
            req.direction,
            canvas.height(),
            canvas.width()
        );
        let reference = (original.height(), original.width());
        let outcome = tile_scaled(&canvas, req, reference, weights, loss_cfg, opt_cfg, &mut |_, _| Ok(()))?;
        canvas = outcome.merged.into_image();
        traces.push(outcome.trace);
    }
    Ok((canvas, traces))
}
