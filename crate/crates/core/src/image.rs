//! Raster images, PNG I/O, canvas geometry and the tile initializers.
//!
//! Pixel values live in the display range `[0, 255]` as `f64` and are stored
//! row-major with interleaved RGB channels. During optimization values may
//! leave that range; they are only clamped when encoded.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Cursor, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Largest α handed out by [`alpha_optimal`] for very narrow exemplars.
pub const ALPHA_CLAMP: f64 = 0.999;

/// An `H × W × 3` floating-point RGB raster.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl TextureImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions(format!(
                "{height}x{width} image has a zero dimension"
            )));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::InvalidDimensions(format!(
                "{height}x{width}x{CHANNELS} image needs {} values, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        Ok(TextureImage {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    /// Builds an image by evaluating `f(row, col)` for every pixel.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn offset(&self, row: usize, col: usize) -> usize {
        (row * self.width + col) * CHANNELS
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let o = self.offset(row, col);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let o = self.offset(row, col);
        self.data[o..o + CHANNELS].copy_from_slice(&rgb);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the sub-rectangle `rect`.
    pub fn crop(&self, rect: Rect) -> Result<Self> {
        if rect.height == 0
            || rect.width == 0
            || rect.top + rect.height > self.height
            || rect.left + rect.width > self.width
        {
            return Err(Error::Geometry(format!(
                "crop {rect} outside {}x{} image",
                self.height, self.width
            )));
        }
        Self::from_fn(rect.height, rect.width, |r, c| {
            self.pixel(rect.top + r, rect.left + c)
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        Self::from_fn(self.height, w, |r, c| self.pixel(r, w - 1 - c))
            .expect("flip keeps dimensions")
    }

    pub fn flip_vertical(&self) -> Self {
        let h = self.height;
        Self::from_fn(h, self.width, |r, c| self.pixel(h - 1 - r, c))
            .expect("flip keeps dimensions")
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Rect {
            top,
            left,
            height,
            width,
        }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top
            && row < self.top + self.height
            && col >= self.left
            && col < self.left + self.width
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[top {}, left {}, {}x{}]",
            self.top, self.left, self.height, self.width
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Up,
        Direction::Down,
        Direction::Left,
        Direction::Right,
    ];

    /// True when the tile is appended along the horizontal axis.
    pub fn is_horizontal(self) -> bool {
        matches!(self, Direction::Left | Direction::Right)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "up" => Ok(Direction::Up),
            "down" => Ok(Direction::Down),
            "left" => Ok(Direction::Left),
            "right" => Ok(Direction::Right),
            other => Err(format!(
                "unknown direction `{other}` (expected up, down, left or right)"
            )),
        }
    }
}

/// Where a tile sits relative to its exemplar and how big it is.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileGeometry {
    pub direction: Direction,
    pub factor_w: f64,
    pub factor_h: f64,
    pub original_height: usize,
    pub original_width: usize,
    pub tile_height: usize,
    pub tile_width: usize,
    /// First row (vertical tiling) or column (horizontal tiling) past the
    /// seam in merged-canvas coordinates.
    pub seam_axis: usize,
}

/// `round(factor · dim)` with half-away-from-zero rounding, at least 1.
pub(crate) fn scaled_extent(factor: f64, dim: usize) -> usize {
    ((factor * dim as f64).round() as usize).max(1)
}

impl TileGeometry {
    pub fn new(
        direction: Direction,
        factor_w: f64,
        factor_h: f64,
        original_height: usize,
        original_width: usize,
    ) -> Result<Self> {
        if !(factor_w.is_finite() && factor_w > 0.0 && factor_h.is_finite() && factor_h > 0.0) {
            return Err(Error::Geometry(format!(
                "tiling factors must be positive, got {factor_w} x {factor_h}"
            )));
        }
        if original_height == 0 || original_width == 0 {
            return Err(Error::Geometry("empty exemplar".into()));
        }
        let (tile_height, tile_width) = if direction.is_horizontal() {
            (original_height, scaled_extent(factor_w, original_width))
        } else {
            (scaled_extent(factor_h, original_height), original_width)
        };
        let seam_axis = match direction {
            Direction::Right => original_width,
            Direction::Left => tile_width,
            Direction::Down => original_height,
            Direction::Up => tile_height,
        };
        Ok(TileGeometry {
            direction,
            factor_w,
            factor_h,
            original_height,
            original_width,
            tile_height,
            tile_width,
            seam_axis,
        })
    }

    /// Geometry implied by a concrete tile size.
    pub fn from_tile_dims(
        direction: Direction,
        original_height: usize,
        original_width: usize,
        tile_height: usize,
        tile_width: usize,
    ) -> Result<Self> {
        if tile_height == 0 || tile_width == 0 {
            return Err(Error::Geometry("empty tile".into()));
        }
        let (factor_w, factor_h) = if direction.is_horizontal() {
            if tile_height != original_height {
                return Err(Error::Geometry(format!(
                    "{direction} tile height {tile_height} does not match exemplar height {original_height}"
                )));
            }
            (tile_width as f64 / original_width as f64, 1.0)
        } else {
            if tile_width != original_width {
                return Err(Error::Geometry(format!(
                    "{direction} tile width {tile_width} does not match exemplar width {original_width}"
                )));
            }
            (1.0, tile_height as f64 / original_height as f64)
        };
        let mut g = Self::new(direction, factor_w, factor_h, original_height, original_width)?;
        g.tile_height = tile_height;
        g.tile_width = tile_width;
        g.seam_axis = match direction {
            Direction::Right => original_width,
            Direction::Left => tile_width,
            Direction::Down => original_height,
            Direction::Up => tile_height,
        };
        Ok(g)
    }

    pub fn canvas_height(&self) -> usize {
        if self.direction.is_horizontal() {
            self.original_height
        } else {
            self.original_height + self.tile_height
        }
    }

    pub fn canvas_width(&self) -> usize {
        if self.direction.is_horizontal() {
            self.original_width + self.tile_width
        } else {
            self.original_width
        }
    }

    pub fn exemplar_rect(&self) -> Rect {
        let (top, left) = match self.direction {
            Direction::Right | Direction::Down => (0, 0),
            Direction::Left => (0, self.tile_width),
            Direction::Up => (self.tile_height, 0),
        };
        Rect::new(top, left, self.original_height, self.original_width)
    }

    pub fn tile_rect(&self) -> Rect {
        let (top, left) = match self.direction {
            Direction::Left | Direction::Up => (0, 0),
            Direction::Right => (0, self.original_width),
            Direction::Down => (self.original_height, 0),
        };
        Rect::new(top, left, self.tile_height, self.tile_width)
    }

    /// Exemplar extent perpendicular to the seam; the `c` of [`alpha_optimal`].
    pub fn perpendicular_extent(&self) -> usize {
        if self.direction.is_horizontal() {
            self.original_width
        } else {
            self.original_height
        }
    }
}

/// What the free region of a canvas is.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CanvasRegion {
    Tile(TileGeometry),
    Hole(Rect),
}

/// An image split into a fixed (exemplar/context) part and a free part.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedCanvas {
    image: TextureImage,
    fixed_mask: Vec<bool>,
    region: CanvasRegion,
}

impl MergedCanvas {
    /// Wraps `image` with a per-pixel fixed mask (row-major, one flag per pixel).
    pub fn new(image: TextureImage, fixed_mask: Vec<bool>, region: CanvasRegion) -> Result<Self> {
        if fixed_mask.len() != image.height() * image.width() {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} entries for a {}x{} canvas",
                fixed_mask.len(),
                image.height(),
                image.width()
            )));
        }
        let fixed = fixed_mask.iter().filter(|&&f| f).count();
        if fixed == 0 || fixed == fixed_mask.len() {
            return Err(Error::Geometry(
                "canvas needs both fixed and free pixels".into(),
            ));
        }
        Ok(MergedCanvas {
            image,
            fixed_mask,
            region,
        })
    }

    pub fn image(&self) -> &TextureImage {
        &self.image
    }

    pub fn into_image(self) -> TextureImage {
        self.image
    }

    pub fn fixed_mask(&self) -> &[bool] {
        &self.fixed_mask
    }

    pub fn region(&self) -> CanvasRegion {
        self.region
    }

    pub fn is_fixed(&self, row: usize, col: usize) -> bool {
        self.fixed_mask[row * self.image.width() + col]
    }

    /// Same mask and region, new pixel values.
    pub fn with_image(&self, image: TextureImage) -> Result<Self> {
        if image.height() != self.image.height() || image.width() != self.image.width() {
            return Err(Error::DimensionMismatch(format!(
                "replacement image {}x{} for {}x{} canvas",
                image.height(),
                image.width(),
                self.image.height(),
                self.image.width()
            )));
        }
        Ok(MergedCanvas {
            image,
            fixed_mask: self.fixed_mask.clone(),
            region: self.region,
        })
    }

    /// Bounding rectangle of the free region.
    pub fn free_rect(&self) -> Rect {
        match self.region {
            CanvasRegion::Tile(g) => g.tile_rect(),
            CanvasRegion::Hole(r) => r,
        }
    }
}

/// Concatenates `original` and `tile_init` so the tile sits on the
/// `direction` side of the exemplar.
pub fn build_merged_canvas(
    original: &TextureImage,
    tile_init: &TextureImage,
    direction: Direction,
) -> Result<MergedCanvas> {
    let geometry = TileGeometry::from_tile_dims(
        direction,
        original.height(),
        original.width(),
        tile_init.height(),
        tile_init.width(),
    )?;
    let ex = geometry.exemplar_rect();
    let tr = geometry.tile_rect();
    let (h, w) = (geometry.canvas_height(), geometry.canvas_width());
    let mut mask = vec![false; h * w];
    let image = TextureImage::from_fn(h, w, |r, c| {
        if ex.contains(r, c) {
            mask[r * w + c] = true;
            original.pixel(r - ex.top, c - ex.left)
        } else {
            tile_init.pixel(r - tr.top, c - tr.left)
        }
    })?;
    MergedCanvas::new(image, mask, CanvasRegion::Tile(geometry))
}

/// Seeds the crate-wide generator: ChaCha with 8 rounds, keyed from the
/// 64-bit seed through `rand_core`'s `seed_from_u64` (PCG32 expansion).
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A uniform sample in `[0, 255)`: the generator's 53-bit `f64` in `[0, 1)`
/// scaled by 255.
#[inline]
fn random_level(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>() * 255.0
}

#[inline]
fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [random_level(rng), random_level(rng), random_level(rng)]
}

/// Uniform white noise over `[0, 255]` per channel, drawn in row-major
/// pixel order, channels R, G, B.
pub fn make_white_noise(height: usize, width: usize, seed: u64) -> Result<TextureImage> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDimensions(format!(
            "white noise of size {height}x{width}"
        )));
    }
    let mut rng = seeded_rng(seed);
    TextureImage::from_fn(height, width, |_, _| random_color(&mut rng))
}

/// `50 ln 2 / c`, the α at which the mirrored exemplar has faded to half
/// strength after `c / 50` pixels. Values at or above 1 are clamped to
/// [`ALPHA_CLAMP`] with a warning.
pub fn alpha_optimal(c: usize) -> Result<f64> {
    if c == 0 {
        return Err(Error::InvalidDimensions(
            "exemplar extent c must be at least 1".into(),
        ));
    }
    let alpha = 50.0 * std::f64::consts::LN_2 / c as f64;
    if alpha >= 1.0 {
        log::warn!("optimal alpha {alpha:.4} for c = {c} is not below 1; clamping to {ALPHA_CLAMP}");
        return Ok(ALPHA_CLAMP);
    }
    Ok(alpha)
}

/// Mirror weight `w₁ = e^{−αj}` at distance `j` from the seam.
#[inline]
pub fn seam_weight(alpha: f64, j: usize) -> f64 {
    (-alpha * j as f64).exp()
}

/// Settings for the seam-removal initializer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeamNoiseConfig {
    pub alpha: f64,
    pub seed: u64,
    /// Exemplar extent perpendicular to the seam.
    pub c: usize,
}

impl SeamNoiseConfig {
    pub fn new(alpha: f64, seed: u64, c: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::AlphaOutOfRange(alpha));
        }
        Ok(SeamNoiseConfig { alpha, seed, c })
    }

    /// α chosen by [`alpha_optimal`] for extent `c`.
    pub fn auto(seed: u64, c: usize) -> Result<Self> {
        Self::new(alpha_optimal(c)?, seed, c)
    }
}

/// Distance into the exemplar, measured from the seam, that mirrors a tile
/// pixel `j` steps past the seam. Reflects repeatedly once `j` runs past the
/// exemplar extent.
#[inline]
fn reflect(j: usize, extent: usize) -> usize {
    let k = j % (2 * extent);
    if k < extent {
        k
    } else {
        2 * extent - 1 - k
    }
}

/// Tile initializer blending a mirrored exemplar into random color with a
/// weight that decays exponentially away from the seam.
///
/// For a tile pixel `j` steps from the seam (`j = 0` touches it) the value
/// is `w₁·mirror + (1 − w₁)·random`, `w₁ = e^{−αj}`. Random colors are drawn
/// in row-major tile order.
pub fn make_seam_init(
    original: &TextureImage,
    geometry: &TileGeometry,
    cfg: &SeamNoiseConfig,
) -> Result<TextureImage> {
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::AlphaOutOfRange(cfg.alpha));
    }
    let (oh, ow) = (original.height(), original.width());
    if geometry.original_height != oh || geometry.original_width != ow {
        return Err(Error::Geometry(format!(
            "geometry built for a {}x{} exemplar, got {oh}x{ow}",
            geometry.original_height, geometry.original_width
        )));
    }
    let (th, tw) = (geometry.tile_height, geometry.tile_width);
    if th == 0 || tw == 0 {
        return Err(Error::Geometry("empty tile".into()));
    }
    let mut rng = seeded_rng(cfg.seed);
    TextureImage::from_fn(th, tw, |r, c| {
        let (j, src) = match geometry.direction {
            Direction::Right => (c, (r, ow - 1 - reflect(c, ow))),
            Direction::Left => {
                let j = tw - 1 - c;
                (j, (r, reflect(j, ow)))
            }
            Direction::Down => (r, (oh - 1 - reflect(r, oh), c)),
            Direction::Up => {
                let j = th - 1 - r;
                (j, (reflect(j, oh), c))
            }
        };
        let w1 = seam_weight(cfg.alpha, j);
        let w2 = 1.0 - w1;
        let mirror = original.pixel(src.0, src.1);
        let noise = random_color(&mut rng);
        [
            w1 * mirror[0] + w2 * noise[0],
            w1 * mirror[1] + w2 * noise[1],
            w1 * mirror[2] + w2 * noise[2],
        ]
    })
}

/// Decodes a PNG (8/16-bit, RGB or RGBA; palettes are expanded) into RGB.
pub fn decode_png(bytes: &[u8]) -> Result<TextureImage> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    let bytes = &buf[..info.buffer_size()];
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => {
            return Err(Error::RgbRequired)
        }
        other => return Err(Error::UnsupportedFormat(format!("color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = Vec::with_capacity(h * w * CHANNELS);
    match info.bit_depth {
        png::BitDepth::Eight => {
            for px in bytes.chunks_exact(stride) {
                data.extend(px[..CHANNELS].iter().map(|&b| f64::from(b)));
            }
        }
        png::BitDepth::Sixteen => {
            for px in bytes.chunks_exact(stride * 2) {
                data.extend(
                    px[..CHANNELS * 2]
                        .chunks_exact(2)
                        .map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) * 255.0 / 65535.0),
                );
            }
        }
        other => return Err(Error::UnsupportedFormat(format!("bit depth {other:?}"))),
    }
    TextureImage::new(h, w, data)
}

/// Clamps to `[0, 255]` and rounds half away from zero.
pub fn quantize(value: f64) -> u8 {
    value.clamp(0.0, 255.0).round() as u8
}

/// Encodes as an 8-bit RGB PNG.
pub fn encode_png(img: &TextureImage, writer: impl Write) -> Result<()> {
    if !img.is_finite() {
        return Err(Error::NonFinite("image data"));
    }
    let mut encoder = png::Encoder::new(writer, img.width() as u32, img.height() as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(e) => e,
        other => std::io::Error::other(other),
    };
    let mut w = encoder
        .write_header()
        .map_err(|e| Error::io("<png stream>", to_io(e)))?;
    w.write_image_data(&bytes)
        .map_err(|e| Error::io("<png stream>", to_io(e)))?;
    w.finish().map_err(|e| Error::io("<png stream>", to_io(e)))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<TextureImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes)
}

pub fn save_image(img: &TextureImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if !img.is_finite() {
        return Err(Error::NonFinite("image data"));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    encode_png(img, &mut out).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    out.flush().map_err(|e| Error::io(path, e))
}
