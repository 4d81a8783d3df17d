//! VGG19 (blocks 1–4) with average pooling, used as a fixed feature
//! extractor, plus the reverse pass from feature-space gradients back to
//! input pixels.
//!
//! Tensors are planar `C × H × W`. Convolutions are 3×3, stride 1, zero
//! padded, and lowered to matrix products via `im2col`. Pooling is 2×2
//! stride-2 averaging that drops a trailing odd row or column.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{TextureImage, CHANNELS};
use crate::weights::NetworkWeights;

/// Canonical VGG training means, RGB.
pub const VGG_MEANS: [f64; 3] = [123.68, 116.779, 103.939];

/// Smallest input side for which `pool4` is non-empty.
pub const MIN_INPUT_SIDE: usize = 16;

/// Floating-point element type the network can run in.
pub trait Real:
    num_traits::Float + Default + Send + Sync + fmt::Debug + std::iter::Sum + 'static
{
    /// `C ← A·B + beta·C` for an `m×k` matrix `A` given by row/column strides
    /// and row-major `k×n` `B` and `m×n` `C`.
    ///
    /// # Safety
    /// `a` must address `m×k` elements under the given strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: &[f32],
        beta: f32,
        c: &mut [f32],
    ) {
        debug_assert!(b.len() >= k * n && c.len() >= m * n);
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a,
            rsa,
            csa,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: &[f64],
        beta: f64,
        c: &mut [f64],
    ) {
        debug_assert!(b.len() >= k * n && c.len() >= m * n);
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a,
            rsa,
            csa,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output rows handed to one worker. Fixed so results do not depend on the
/// thread count.
const GEMM_ROW_BLOCK: usize = 64;

/// Row-parallel `C = A·B` where `A` is `m×k` with strides `(rsa, csa)`.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], rsa: usize, csa: usize, b: &[T], c: &mut [T]) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    c.par_chunks_mut(GEMM_ROW_BLOCK * n)
        .enumerate()
        .for_each(|(blk, c_blk)| {
            let r0 = blk * GEMM_ROW_BLOCK;
            let rows = c_blk.len() / n;
            // SAFETY: rows r0..r0+rows of A lie inside `a` by the assert above.
            unsafe {
                T::gemm_raw(
                    rows,
                    k,
                    n,
                    a.as_ptr().add(r0 * rsa),
                    rsa as isize,
                    csa as isize,
                    b,
                    T::zero(),
                    c_blk,
                )
            }
        });
}

/// A `C × H × W` planar tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Planes<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Planes<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Planes {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }
}

/// VGG input conditioning: per-channel mean subtraction, RGB order kept,
/// no scaling. Output is planar.
pub fn preprocess<T: Real>(img: &TextureImage) -> Planes<T> {
    let (h, w) = (img.height(), img.width());
    let hw = h * w;
    let mut out = Planes::zeros(CHANNELS, h, w);
    for (p, px) in img.data().chunks_exact(CHANNELS).enumerate() {
        for ch in 0..CHANNELS {
            out.data[ch * hw + p] = T::from(px[ch] - VGG_MEANS[ch]).expect("finite pixel");
        }
    }
    out
}

/// Inverse of [`preprocess`].
pub fn deprocess<T: Real>(planes: &Planes<T>) -> Result<TextureImage> {
    let hw = planes.plane_len();
    let mut data = Vec::with_capacity(hw * CHANNELS);
    for p in 0..hw {
        for (ch, mean) in VGG_MEANS.iter().enumerate() {
            data.push(planes.data[ch * hw + p].to_f64().unwrap_or(f64::NAN) + mean);
        }
    }
    TextureImage::new(planes.height, planes.width, data)
}

/// Interleaves a planar gradient into an `H × W × 3` image-shaped buffer.
pub fn planar_to_image<T: Real>(planes: &Planes<T>) -> Result<TextureImage> {
    let hw = planes.plane_len();
    let mut data = Vec::with_capacity(hw * CHANNELS);
    for p in 0..hw {
        for ch in 0..CHANNELS {
            data.push(planes.data[ch * hw + p].to_f64().unwrap_or(f64::NAN));
        }
    }
    TextureImage::new(planes.height, planes.width, data)
}

/// Layers whose activations feed the texture statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerId {
    /// `conv1_1` after ReLU.
    Layer1,
    Pool1,
    Pool2,
    Pool3,
    Pool4,
}

impl LayerId {
    pub const ALL: [LayerId; 5] = [
        LayerId::Layer1,
        LayerId::Pool1,
        LayerId::Pool2,
        LayerId::Pool3,
        LayerId::Pool4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerId::Layer1 => "layer1",
            LayerId::Pool1 => "pool1",
            LayerId::Pool2 => "pool2",
            LayerId::Pool3 => "pool3",
            LayerId::Pool4 => "pool4",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            LayerId::Layer1 | LayerId::Pool1 => 64,
            LayerId::Pool2 => 128,
            LayerId::Pool3 => 256,
            LayerId::Pool4 => 512,
        }
    }

    /// Cumulative spatial stride.
    pub fn stride(self) -> usize {
        match self {
            LayerId::Layer1 => 1,
            LayerId::Pool1 => 2,
            LayerId::Pool2 => 4,
            LayerId::Pool3 => 8,
            LayerId::Pool4 => 16,
        }
    }

    /// Index in [`STAGES`] whose output this layer taps.
    fn stage(self) -> usize {
        match self {
            LayerId::Layer1 => 0,
            LayerId::Pool1 => 2,
            LayerId::Pool2 => 5,
            LayerId::Pool3 => 10,
            LayerId::Pool4 => 15,
        }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        LayerId::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown layer `{s}` (expected layer1, pool1..pool4)"))
    }
}

#[derive(Clone, Copy, Debug)]
enum Stage {
    /// Index into the conv layer list.
    Conv(usize),
    Pool,
}

const STAGES: [Stage; 16] = [
    Stage::Conv(0),
    Stage::Conv(1),
    Stage::Pool,
    Stage::Conv(2),
    Stage::Conv(3),
    Stage::Pool,
    Stage::Conv(4),
    Stage::Conv(5),
    Stage::Conv(6),
    Stage::Conv(7),
    Stage::Pool,
    Stage::Conv(8),
    Stage::Conv(9),
    Stage::Conv(10),
    Stage::Conv(11),
    Stage::Pool,
];

/// One layer's activations reshaped to `n_f × vs_f`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatures<T> {
    pub n_f: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `n_f × (height·width)`.
    pub values: Vec<T>,
}

impl<T> LayerFeatures<T> {
    pub fn new(n_f: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != n_f * height * width {
            return Err(Error::DimensionMismatch(format!(
                "{n_f}x{height}x{width} features need {} values, got {}",
                n_f * height * width,
                values.len()
            )));
        }
        Ok(LayerFeatures {
            n_f,
            height,
            width,
            values,
        })
    }

    /// Flattened spatial size.
    pub fn vs_f(&self) -> usize {
        self.height * self.width
    }
}

pub type FeatureMaps<T> = BTreeMap<LayerId, LayerFeatures<T>>;

/// Gradient of a scalar with respect to each layer's `n_f × vs_f` features.
pub type FeatureGrads<T> = BTreeMap<LayerId, Vec<T>>;

/// Value and feature-space gradient of a scalar function of feature maps.
#[derive(Clone, Debug)]
pub struct ObjectiveEval<T> {
    pub value: f64,
    pub per_layer: BTreeMap<LayerId, f64>,
    pub grads: FeatureGrads<T>,
}

/// A differentiable scalar function of feature maps.
pub trait FeatureObjective<T: Real>: Sync {
    /// Layers the objective reads.
    fn layers(&self) -> Vec<LayerId>;

    fn evaluate(&self, features: &FeatureMaps<T>) -> Result<ObjectiveEval<T>>;
}

/// An objective that ignores its input.
pub struct Constant(pub f64);

impl<T: Real> FeatureObjective<T> for Constant {
    fn layers(&self) -> Vec<LayerId> {
        vec![LayerId::Layer1]
    }

    fn evaluate(&self, _: &FeatureMaps<T>) -> Result<ObjectiveEval<T>> {
        Ok(ObjectiveEval {
            value: self.0,
            per_layer: BTreeMap::new(),
            grads: BTreeMap::new(),
        })
    }
}

/// `scale · inner`.
pub struct Scaled<O> {
    pub scale: f64,
    pub inner: O,
}

impl<T: Real, O: FeatureObjective<T>> FeatureObjective<T> for Scaled<O> {
    fn layers(&self) -> Vec<LayerId> {
        self.inner.layers()
    }

    fn evaluate(&self, features: &FeatureMaps<T>) -> Result<ObjectiveEval<T>> {
        let mut eval = self.inner.evaluate(features)?;
        let s = T::from(self.scale).expect("finite scale");
        eval.value *= self.scale;
        eval.per_layer.values_mut().for_each(|v| *v *= self.scale);
        for g in eval.grads.values_mut() {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
        Ok(eval)
    }
}

struct Conv<T> {
    cin: usize,
    cout: usize,
    /// `cout × (cin·9)`, row-major.
    kernel: Vec<T>,
    bias: Vec<T>,
}

/// Network weights converted to element type `T`. Immutable; evaluations
/// allocate their own activation storage, so one instance may serve many
/// threads.
pub struct FeatureNetwork<T> {
    convs: Vec<Conv<T>>,
}

/// Activations recorded on the forward pass.
struct Trace<T> {
    /// `outputs[i]` is the output of stage `i`.
    outputs: Vec<Planes<T>>,
}

fn im2col<T: Real>(x: &Planes<T>) -> Vec<T> {
    let (h, w) = (x.height, x.width);
    let hw = h * w;
    let mut cols = vec![T::zero(); x.channels * 9 * hw];
    cols.par_chunks_mut(9 * hw)
        .zip(x.data.par_chunks(hw))
        .for_each(|(dst, src)| {
            for ky in 0..3 {
                for kx in 0..3 {
                    let tap = &mut dst[(ky * 3 + kx) * hw..(ky * 3 + kx + 1) * hw];
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let s = &src[(sy - 1) * w..sy * w];
                        let d = &mut tap[y * w..(y + 1) * w];
                        match kx {
                            0 => d[1..].copy_from_slice(&s[..w - 1]),
                            1 => d.copy_from_slice(s),
                            _ => d[..w - 1].copy_from_slice(&s[1..]),
                        }
                    }
                }
            }
        });
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Real>(cols: &[T], channels: usize, h: usize, w: usize) -> Planes<T> {
    let hw = h * w;
    let mut out = Planes::zeros(channels, h, w);
    out.data
        .par_chunks_mut(hw)
        .zip(cols.par_chunks(9 * hw))
        .for_each(|(dst, src)| {
            for ky in 0..3 {
                for kx in 0..3 {
                    let tap = &src[(ky * 3 + kx) * hw..(ky * 3 + kx + 1) * hw];
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let s = &tap[y * w..(y + 1) * w];
                        let d = &mut dst[(sy - 1) * w..sy * w];
                        let (d, s) = match kx {
                            0 => (&mut d[..w - 1], &s[1..]),
                            1 => (&mut d[..], s),
                            _ => (&mut d[1..], &s[..w - 1]),
                        };
                        d.iter_mut().zip(s).for_each(|(a, &b)| *a = *a + b);
                    }
                }
            }
        });
    out
}

fn avg_pool<T: Real>(x: &Planes<T>) -> Planes<T> {
    let (h2, w2) = (x.height / 2, x.width / 2);
    let (h, w) = (x.height, x.width);
    let quarter = T::from(0.25).expect("0.25");
    let mut out = Planes::zeros(x.channels, h2, w2);
    out.data
        .par_chunks_mut(h2 * w2)
        .zip(x.data.par_chunks(h * w))
        .for_each(|(dst, src)| {
            for i in 0..h2 {
                let r0 = &src[2 * i * w..(2 * i + 1) * w];
                let r1 = &src[(2 * i + 1) * w..(2 * i + 2) * w];
                for j in 0..w2 {
                    dst[i * w2 + j] =
                        (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]) * quarter;
                }
            }
        });
    out
}

fn avg_pool_backward<T: Real>(g: &Planes<T>, h: usize, w: usize) -> Planes<T> {
    let (h2, w2) = (g.height, g.width);
    let quarter = T::from(0.25).expect("0.25");
    let mut out = Planes::zeros(g.channels, h, w);
    out.data
        .par_chunks_mut(h * w)
        .zip(g.data.par_chunks(h2 * w2))
        .for_each(|(dst, src)| {
            for i in 0..h2 {
                for j in 0..w2 {
                    let v = src[i * w2 + j] * quarter;
                    dst[2 * i * w + 2 * j] = v;
                    dst[2 * i * w + 2 * j + 1] = v;
                    dst[(2 * i + 1) * w + 2 * j] = v;
                    dst[(2 * i + 1) * w + 2 * j + 1] = v;
                }
            }
        });
    out
}

impl<T: Real> Conv<T> {
    /// Convolution, bias and ReLU.
    fn forward(&self, x: &Planes<T>) -> Planes<T> {
        let hw = x.plane_len();
        let cols = im2col(x);
        let k = self.cin * 9;
        let mut out = Planes::zeros(self.cout, x.height, x.width);
        gemm(self.cout, k, hw, &self.kernel, k, 1, &cols, &mut out.data);
        out.data
            .par_chunks_mut(hw)
            .zip(&self.bias)
            .for_each(|(plane, &b)| {
                plane.iter_mut().for_each(|v| *v = (*v + b).max(T::zero()));
            });
        out
    }

    /// Gradient with respect to the input given the gradient at the ReLU
    /// output `out`.
    fn backward(&self, out: &Planes<T>, mut g: Planes<T>) -> Planes<T> {
        let hw = out.plane_len();
        g.data
            .par_chunks_mut(hw)
            .zip(out.data.par_chunks(hw))
            .for_each(|(gp, op)| {
                gp.iter_mut()
                    .zip(op)
                    .for_each(|(gv, &ov)| {
                        if ov <= T::zero() {
                            *gv = T::zero();
                        }
                    });
            });
        let k = self.cin * 9;
        let mut cols = vec![T::zero(); k * hw];
        // kernelᵀ is k × cout: row stride 1, column stride k
        gemm(k, self.cout, hw, &self.kernel, 1, k, &g.data, &mut cols);
        col2im(&cols, self.cin, out.height, out.width)
    }
}

impl<T: Real> FeatureNetwork<T> {
    pub fn new(weights: &NetworkWeights) -> Self {
        let cast = |v: &[f32]| -> Vec<T> {
            v.iter()
                .map(|&x| T::from(x).expect("finite weight"))
                .collect()
        };
        let convs = weights
            .layers()
            .iter()
            .map(|l| Conv {
                cin: l.in_channels,
                cout: l.out_channels,
                kernel: cast(&l.kernel),
                bias: cast(&l.bias),
            })
            .collect();
        FeatureNetwork { convs }
    }

    fn check_input(x: &Planes<T>, layers: &[LayerId]) -> Result<usize> {
        if layers.is_empty() {
            return Err(Error::NoLayers);
        }
        if x.height < MIN_INPUT_SIDE || x.width < MIN_INPUT_SIDE {
            return Err(Error::ImageTooSmall {
                height: x.height,
                width: x.width,
                min: MIN_INPUT_SIDE,
            });
        }
        if x.channels != CHANNELS {
            return Err(Error::DimensionMismatch(format!(
                "network input needs {CHANNELS} channels, got {}",
                x.channels
            )));
        }
        Ok(layers.iter().map(|l| l.stage()).max().expect("non-empty"))
    }

    fn run(&self, x: &Planes<T>, last_stage: usize) -> Trace<T> {
        let mut outputs: Vec<Planes<T>> = Vec::with_capacity(last_stage + 1);
        for stage in &STAGES[..=last_stage] {
            let input = outputs.last().unwrap_or(x);
            let out = match *stage {
                Stage::Conv(i) => self.convs[i].forward(input),
                Stage::Pool => avg_pool(input),
            };
            outputs.push(out);
        }
        Trace { outputs }
    }

    fn collect(trace: &Trace<T>, layers: &[LayerId]) -> FeatureMaps<T> {
        layers
            .iter()
            .map(|&l| {
                let p = &trace.outputs[l.stage()];
                (
                    l,
                    LayerFeatures {
                        n_f: p.channels,
                        height: p.height,
                        width: p.width,
                        values: p.data.clone(),
                    },
                )
            })
            .collect()
    }

    /// Activations of `layers` for a preprocessed input.
    pub fn features(&self, x: &Planes<T>, layers: &[LayerId]) -> Result<FeatureMaps<T>> {
        let last = Self::check_input(x, layers)?;
        let trace = self.run(x, last);
        Ok(Self::collect(&trace, layers))
    }

    /// Activations of `layers` for an image.
    pub fn forward_features(&self, img: &TextureImage, layers: &[LayerId]) -> Result<FeatureMaps<T>> {
        self.features(&preprocess(img), layers)
    }

    /// Objective value and its gradient with respect to the preprocessed
    /// input `x`. Since preprocessing is a shift, this is also the gradient
    /// with respect to raw pixel values.
    pub fn value_and_gradient(
        &self,
        x: &Planes<T>,
        objective: &dyn FeatureObjective<T>,
    ) -> Result<(ObjectiveEval<T>, Planes<T>)> {
        let layers = objective.layers();
        let last = Self::check_input(x, &layers)?;
        let trace = self.run(x, last);
        let features = Self::collect(&trace, &layers);
        let mut eval = objective.evaluate(&features)?;
        let grads = std::mem::take(&mut eval.grads);

        let mut g: Option<Planes<T>> = None;
        for s in (0..=last).rev() {
            if let Some((&layer, tap)) = grads.iter().find(|(l, _)| l.stage() == s) {
                let out = &trace.outputs[s];
                if tap.len() != out.data.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "gradient for {layer} has {} values, features have {}",
                        tap.len(),
                        out.data.len()
                    )));
                }
                match g.as_mut() {
                    Some(acc) => acc.data.iter_mut().zip(tap).for_each(|(a, &b)| *a = *a + b),
                    None => {
                        g = Some(Planes {
                            channels: out.channels,
                            height: out.height,
                            width: out.width,
                            data: tap.clone(),
                        })
                    }
                }
            }
            let Some(grad) = g.take() else { continue };
            let input = if s == 0 { x } else { &trace.outputs[s - 1] };
            g = Some(match STAGES[s] {
                Stage::Conv(i) => self.convs[i].backward(&trace.outputs[s], grad),
                Stage::Pool => avg_pool_backward(&grad, input.height, input.width),
            });
        }
        let grad = g.unwrap_or_else(|| Planes::zeros(x.channels, x.height, x.width));
        Ok((eval, grad))
    }

    /// Per-pixel gradient of `objective` for an image, shaped like the image.
    pub fn input_gradient(
        &self,
        img: &TextureImage,
        objective: &dyn FeatureObjective<T>,
    ) -> Result<TextureImage> {
        let (_, grad) = self.value_and_gradient(&preprocess(img), objective)?;
        planar_to_image(&grad)
    }
}

/// Double-precision feature extraction.
pub fn forward_features(
    weights: &NetworkWeights,
    img: &TextureImage,
    layers: &[LayerId],
) -> Result<FeatureMaps<f64>> {
    FeatureNetwork::<f64>::new(weights).forward_features(img, layers)
}

/// Double-precision input gradient.
pub fn input_gradient(
    weights: &NetworkWeights,
    img: &TextureImage,
    objective: &dyn FeatureObjective<f64>,
) -> Result<TextureImage> {
    FeatureNetwork::<f64>::new(weights).input_gradient(img, objective)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::make_white_noise;
    use crate::weights::random_weights;

    fn planes(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Planes<f64> {
        Planes {
            channels: c,
            height: h,
            width: w,
            data: (0..c * h * w).map(f).collect(),
        }
    }

    /// Direct 3×3 zero-padded cross-correlation.
    fn naive_conv(x: &Planes<f64>, kernel: &[f64], bias: &[f64], cout: usize) -> Planes<f64> {
        let (h, w, cin) = (x.height, x.width, x.channels);
        let mut out = Planes::zeros(cout, h, w);
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += kernel[((co * cin + ci) * 3 + ky) * 3 + kx]
                                    * x.data[(ci * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out.data[(co * h + y) * w + xx] = acc.max(0.0);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (cin, cout, h, w) = (3, 5, 7, 6);
        let x = planes(cin, h, w, |i| ((i * 37 % 11) as f64) - 5.0);
        let kernel: Vec<f64> = (0..cout * cin * 9).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.1).collect();
        let bias: Vec<f64> = (0..cout).map(|i| i as f64 * 0.1 - 0.2).collect();
        let conv = Conv {
            cin,
            cout,
            kernel: kernel.clone(),
            bias: bias.clone(),
        };
        let got = conv.forward(&x);
        let want = naive_conv(&x, &kernel, &bias, cout);
        for (a, b) in got.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let x = planes(2, 5, 4, |i| (i as f64).sin());
        let cols = im2col(&x);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.7).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, 2, 5, 4);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn average_not_max_pooling() {
        let x = planes(1, 2, 2, |i| (i + 1) as f64);
        let p = avg_pool(&x);
        assert_eq!(p.data, vec![2.5]);
    }

    #[test]
    fn pooling_drops_trailing_odd_row_and_column() {
        let x = planes(1, 5, 3, |i| i as f64);
        let p = avg_pool(&x);
        assert_eq!((p.height, p.width), (2, 1));
        assert_eq!(p.data, vec![(0.0 + 1.0 + 3.0 + 4.0) / 4.0, (6.0 + 7.0 + 9.0 + 10.0) / 4.0]);
        let g = avg_pool_backward(&Planes { channels: 1, height: 2, width: 1, data: vec![4.0, 8.0] }, 5, 3);
        assert_eq!(g.data, vec![1., 1., 0., 1., 1., 0., 2., 2., 0., 2., 2., 0., 0., 0., 0.]);
    }

    #[test]
    fn preprocess_subtracts_means_and_inverts() {
        let img = TextureImage::new(1, 2, vec![123.68, 116.779, 103.939, 0.0, 0.0, 0.0]).unwrap();
        let p: Planes<f64> = preprocess(&img);
        assert_eq!(p.data, vec![0.0, -123.68, 0.0, -116.779, 0.0, -103.939]);
        let noise = make_white_noise(3, 4, 1).unwrap();
        let back = deprocess(&preprocess::<f64>(&noise)).unwrap();
        for (a, b) in back.data().iter().zip(noise.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_shapes_follow_strides() {
        let net = FeatureNetwork::<f32>::new(&random_weights(0));
        let img = make_white_noise(64, 64, 0).unwrap();
        let feats = net.forward_features(&img, &LayerId::ALL).unwrap();
        let shapes: Vec<_> = feats.iter().map(|(l, f)| (*l, f.n_f, f.vs_f())).collect();
        assert_eq!(
            shapes,
            vec![
                (LayerId::Layer1, 64, 4096),
                (LayerId::Pool1, 64, 1024),
                (LayerId::Pool2, 128, 256),
                (LayerId::Pool3, 256, 64),
                (LayerId::Pool4, 512, 16),
            ]
        );
        for f in feats.values() {
            assert!(f.values.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn small_or_empty_requests_rejected() {
        let net = FeatureNetwork::<f32>::new(&random_weights(0));
        let img = make_white_noise(8, 8, 0).unwrap();
        assert!(matches!(
            net.forward_features(&img, &[LayerId::Layer1]),
            Err(Error::ImageTooSmall { .. })
        ));
        let img = make_white_noise(16, 16, 0).unwrap();
        assert!(matches!(net.forward_features(&img, &[]), Err(Error::NoLayers)));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = FeatureNetwork::<f32>::new(&random_weights(2));
        let img = make_white_noise(20, 24, 5).unwrap();
        let a = net.forward_features(&img, &LayerId::ALL).unwrap();
        let b = net.forward_features(&img, &LayerId::ALL).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let net = FeatureNetwork::<f64>::new(&random_weights(1));
        let img = make_white_noise(16, 16, 3).unwrap();
        let g = net.input_gradient(&img, &Constant(4.2)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_ids_parse() {
        assert_eq!("pool3".parse::<LayerId>().unwrap(), LayerId::Pool3);
        assert!("conv1_1".parse::<LayerId>().is_err());
    }
}
