//! Gram-matrix texture statistics and the weighted multi-layer loss.
//!
//! Each network instance's Gram matrix is divided by its own spatial size
//! `vs_f`, so an exemplar and a larger merged canvas produce comparable
//! statistics. The per-layer loss is then `w / (4 n_f²) · Σ (Ĝ_a − Ĝ_b)²`.
//! All accumulation happens in `f64` regardless of the network precision.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{
    FeatureMaps, FeatureNetwork, FeatureObjective, LayerFeatures, LayerId, ObjectiveEval, Real,
};
use crate::image::TextureImage;

/// Symmetric `n × n` filter correlation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    n: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl GramMatrix {
    pub fn from_rows(n: usize, data: Vec<f64>, normalized: bool) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::DimensionMismatch(format!(
                "{n}x{n} Gram matrix from {} values",
                data.len()
            )));
        }
        Ok(GramMatrix {
            n,
            data,
            normalized,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Whether the raw sum was divided by `vs_f`.
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n + c]
    }
}

fn to_f64<T: Real>(values: &[T]) -> Vec<f64> {
    values
        .iter()
        .map(|v| v.to_f64().unwrap_or(f64::NAN))
        .collect()
}

fn gram_impl<T: Real>(f: &LayerFeatures<T>, normalize: bool) -> Result<GramMatrix> {
    let (n, vs) = (f.n_f, f.vs_f());
    if n == 0 || vs == 0 {
        return Err(Error::DimensionMismatch(format!(
            "Gram matrix of empty features ({n}x{vs})"
        )));
    }
    let x = to_f64(&f.values);
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("feature activations"));
    }
    let mut g = vec![0.0; n * n];
    // F · Fᵀ; Fᵀ is read through strides, rows are the fixed `vs` sum.
    unsafe {
        matrixmultiply::dgemm(
            n,
            vs,
            n,
            1.0,
            x.as_ptr(),
            vs as isize,
            1,
            x.as_ptr(),
            1,
            vs as isize,
            0.0,
            g.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    let scale = if normalize { 1.0 / vs as f64 } else { 1.0 };
    for r in 0..n {
        for c in r..n {
            let v = g[r * n + c] * scale;
            g[r * n + c] = v;
            g[c * n + r] = v;
        }
    }
    GramMatrix::from_rows(n, g, normalize)
}

/// `(1/vs_f) · F·Fᵀ`.
pub fn gram_matrix<T: Real>(features: &LayerFeatures<T>) -> Result<GramMatrix> {
    gram_impl(features, true)
}

/// The unnormalized sum `Σ_i F_ri F_ci`.
pub fn gram_matrix_raw<T: Real>(features: &LayerFeatures<T>) -> Result<GramMatrix> {
    gram_impl(features, false)
}

fn check_pair(a: &GramMatrix, b: &GramMatrix, n_f: usize) -> Result<()> {
    if a.n != n_f || b.n != n_f {
        return Err(Error::DimensionMismatch(format!(
            "Gram sizes {} and {} for n_f = {n_f}",
            a.n, b.n
        )));
    }
    if a.normalized != b.normalized {
        return Err(Error::DimensionMismatch(
            "comparing normalized and raw Gram matrices".into(),
        ));
    }
    Ok(())
}

/// `w / (4 n_f²) · Σ_{r,c} (a − b)²`.
pub fn layer_loss(a: &GramMatrix, b: &GramMatrix, n_f: usize, w: f64) -> Result<f64> {
    check_pair(a, b, n_f)?;
    let sq: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(w / (4.0 * (n_f * n_f) as f64) * sq)
}

/// Contributing layers and their weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    layers: Vec<LayerId>,
    weights: Vec<f64>,
}

impl Default for LossConfig {
    /// `layer1, pool1..pool4`, each weighted 1/5.
    fn default() -> Self {
        LossConfig {
            layers: LayerId::ALL.to_vec(),
            weights: vec![0.2; LayerId::ALL.len()],
        }
    }
}

impl LossConfig {
    pub fn new(layers: Vec<LayerId>, weights: Vec<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::LossConfig("no layers".into()));
        }
        if layers.len() != weights.len() {
            return Err(Error::LossConfig(format!(
                "{} layers but {} weights",
                layers.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::LossConfig(
                "weights must be finite and non-negative".into(),
            ));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::LossConfig("all weights are zero".into()));
        }
        let mut seen = layers.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != layers.len() {
            return Err(Error::LossConfig("duplicate layer".into()));
        }
        Ok(LossConfig { layers, weights })
    }

    /// Equal weights summing to one.
    pub fn uniform(layers: Vec<LayerId>) -> Result<Self> {
        let w = 1.0 / layers.len().max(1) as f64;
        let n = layers.len();
        Self::new(layers, vec![w; n])
    }

    pub fn layers(&self) -> &[LayerId] {
        &self.layers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `N^L`.
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (LayerId, f64)> + '_ {
        self.layers.iter().copied().zip(self.weights.iter().copied())
    }
}

fn layer_entry<T>(feats: &FeatureMaps<T>, layer: LayerId) -> Result<&LayerFeatures<T>> {
    feats.get(&layer).ok_or(Error::MissingFeatures(layer))
}

/// Per-layer and total loss between two feature sets.
pub fn loss_breakdown<T: Real>(
    original: &FeatureMaps<T>,
    merged: &FeatureMaps<T>,
    cfg: &LossConfig,
) -> Result<BTreeMap<LayerId, f64>> {
    cfg.pairs()
        .map(|(layer, w)| {
            let a = layer_entry(original, layer)?;
            let b = layer_entry(merged, layer)?;
            if a.n_f != b.n_f {
                return Err(Error::DimensionMismatch(format!(
                    "{layer}: n_f {} vs {}",
                    a.n_f, b.n_f
                )));
            }
            Ok((layer, layer_loss(&gram_matrix(a)?, &gram_matrix(b)?, a.n_f, w)?))
        })
        .collect()
}

/// Weighted sum of per-layer Gram losses.
pub fn total_loss<T: Real>(
    original: &FeatureMaps<T>,
    merged: &FeatureMaps<T>,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(loss_breakdown(original, merged, cfg)?.values().sum())
}

/// Exemplar statistics, computed once and then read-only.
#[derive(Clone, Debug, PartialEq)]
pub struct GramTargets {
    grams: BTreeMap<LayerId, GramMatrix>,
}

impl GramTargets {
    pub fn from_features<T: Real>(feats: &FeatureMaps<T>, cfg: &LossConfig) -> Result<Self> {
        let grams = cfg
            .layers()
            .iter()
            .map(|&l| Ok((l, gram_matrix(layer_entry(feats, l)?)?)))
            .collect::<Result<_>>()?;
        Ok(GramTargets { grams })
    }

    pub fn from_image<T: Real>(
        net: &FeatureNetwork<T>,
        img: &TextureImage,
        cfg: &LossConfig,
    ) -> Result<Self> {
        let feats = net.forward_features(img, cfg.layers())?;
        Self::from_features(&feats, cfg)
    }

    pub fn get(&self, layer: LayerId) -> Option<&GramMatrix> {
        self.grams.get(&layer)
    }

    /// FNV-1a over the bit patterns of every entry.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for g in self.grams.values() {
            for v in &g.data {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// The synthesis objective: Gram distance to fixed exemplar statistics.
pub struct GramObjective<'a> {
    pub targets: &'a GramTargets,
    pub cfg: &'a LossConfig,
}

impl<T: Real> FeatureObjective<T> for GramObjective<'_> {
    fn layers(&self) -> Vec<LayerId> {
        self.cfg.layers().to_vec()
    }

    /// For `L = c Σ (Ĝ − T)²` with `Ĝ = F Fᵀ / vs` and `c = w / (4 n²)`, the
    /// feature gradient is `(w / (n² vs)) · (Ĝ − T) F`.
    fn evaluate(&self, features: &FeatureMaps<T>) -> Result<ObjectiveEval<T>> {
        let terms = self
            .cfg
            .pairs()
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|(layer, w)| {
                let f = layer_entry(features, layer)?;
                let target = self.targets.get(layer).ok_or(Error::MissingFeatures(layer))?;
                let g = gram_matrix(f)?;
                let loss = layer_loss(target, &g, f.n_f, w)?;
                let (n, vs) = (f.n_f, f.vs_f());
                let diff: Vec<f64> = g.data.iter().zip(&target.data).map(|(a, b)| a - b).collect();
                let x = to_f64(&f.values);
                let mut grad = vec![0.0; n * vs];
                unsafe {
                    matrixmultiply::dgemm(
                        n,
                        n,
                        vs,
                        w / ((n * n) as f64 * vs as f64),
                        diff.as_ptr(),
                        n as isize,
                        1,
                        x.as_ptr(),
                        vs as isize,
                        1,
                        0.0,
                        grad.as_mut_ptr(),
                        vs as isize,
                        1,
                    );
                }
                let grad: Vec<T> = grad.into_iter().map(|v| T::from(v).unwrap_or(T::nan())).collect();
                Ok((layer, loss, grad))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut eval = ObjectiveEval {
            value: 0.0,
            per_layer: BTreeMap::new(),
            grads: BTreeMap::new(),
        };
        for (layer, loss, grad) in terms {
            eval.value += loss;
            eval.per_layer.insert(layer, loss);
            eval.grads.insert(layer, grad);
        }
        Ok(eval)
    }
}
