//! Adam minimization of the Gram loss over the free pixels of a canvas.
//!
//! The optimizer works on intensities divided by [`INTENSITY_SCALE`], so a
//! learning rate is a step size in units of the full `[0, 255]` range.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gram::{GramObjective, GramTargets, LossConfig};
use crate::image::{MergedCanvas, TextureImage, CHANNELS};
use crate::network::{
    preprocess, FeatureNetwork, FeatureObjective, LayerId, Planes, Real, VGG_MEANS,
};
use crate::weights::NetworkWeights;

/// Display units per optimizer unit.
pub const INTENSITY_SCALE: f64 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub checkpoint_every: Option<usize>,
    pub log_every: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            iterations: 100_000,
            learning_rate: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            checkpoint_every: None,
            log_every: 100,
            seed: 0,
            precision: Precision::Single,
        }
    }
}

impl OptimConfig {
    /// Small CPU-friendly settings: 1000 iterations at learning rate 0.01.
    pub fn desk() -> Self {
        OptimConfig {
            iterations: 1000,
            learning_rate: 0.01,
            log_every: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::OptimConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::OptimConfig(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::OptimConfig("epsilon must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::OptimConfig("log_every must be at least 1".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::OptimConfig(
                "checkpoint_every must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    cfg: &OptimConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::DimensionMismatch(format!(
            "adam: {} params, {} grads, {}/{} moments",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    state.t += 1;
    let t = state.t as i32;
    let c = |x: f64| T::from(x).expect("finite constant");
    let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
    let (one_b1, one_b2) = (c(1.0 - cfg.beta1), c(1.0 - cfg.beta2));
    let bc1 = c(1.0 - cfg.beta1.powi(t));
    let bc2 = c(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (c(cfg.learning_rate), c(cfg.epsilon));
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub total_loss: f64,
    pub per_layer: BTreeMap<LayerId, f64>,
    pub ms: u128,
}

/// Loss history of one synthesis run. The record for iteration `i` is the
/// loss before the `i`-th update; the last record is the final loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimTrace {
    pub records: Vec<TraceRecord>,
}

pub const TRACE_HEADER: &str =
    "iteration,total_loss,loss_layer1,loss_pool1,loss_pool2,loss_pool3,loss_pool4,ms";

impl OptimTrace {
    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.total_loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.total_loss)
    }

    /// Appends `other` with its iterations shifted past the last record.
    pub fn extend_shifted(&mut self, other: &OptimTrace) {
        let offset = self.records.last().map_or(0, |r| r.iteration + 1);
        self.records.extend(other.records.iter().map(|r| TraceRecord {
            iteration: r.iteration + offset,
            ..r.clone()
        }));
    }

    /// CSV with one row per record. Layers outside the loss config are left
    /// empty.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{TRACE_HEADER}")?;
        for r in &self.records {
            write!(out, "{},{}", r.iteration, r.total_loss)?;
            for layer in LayerId::ALL {
                match r.per_layer.get(&layer) {
                    Some(v) => write!(out, ",{v}")?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out, ",{}", r.ms)?;
        }
        Ok(())
    }
}

/// Flat planar indices (`c·H·W + p`) of every free channel value.
fn free_indices(canvas: &MergedCanvas) -> Vec<usize> {
    let hw = canvas.fixed_mask().len();
    (0..CHANNELS)
        .flat_map(|ch| {
            canvas
                .fixed_mask()
                .iter()
                .enumerate()
                .filter(|(_, &fixed)| !fixed)
                .map(move |(p, _)| ch * hw + p)
        })
        .collect()
}

/// Gram-matching optimizer over one canvas. The exemplar statistics are
/// fixed at construction.
pub struct Synthesizer<'a, T> {
    net: &'a FeatureNetwork<T>,
    targets: &'a GramTargets,
    loss_cfg: &'a LossConfig,
}

impl<'a, T: Real> Synthesizer<'a, T> {
    pub fn new(net: &'a FeatureNetwork<T>, targets: &'a GramTargets, loss_cfg: &'a LossConfig) -> Self {
        Synthesizer {
            net,
            targets,
            loss_cfg,
        }
    }

    /// Runs `cfg.iterations` Adam steps on the free pixels of `canvas`.
    /// `on_checkpoint` receives the in-progress canvas every
    /// `cfg.checkpoint_every` steps.
    pub fn run(
        &self,
        canvas: &MergedCanvas,
        cfg: &OptimConfig,
        on_checkpoint: &mut dyn FnMut(usize, &TextureImage) -> Result<()>,
    ) -> Result<(MergedCanvas, OptimTrace)> {
        cfg.validate()?;
        let objective = GramObjective {
            targets: self.targets,
            cfg: self.loss_cfg,
        };
        let start = Instant::now();
        let free = free_indices(canvas);
        let mut x: Planes<T> = preprocess(canvas.image());
        let scale = T::from(INTENSITY_SCALE).expect("finite scale");
        let mut params: Vec<T> = free.iter().map(|&i| x.data[i] / scale).collect();
        let mut state = AdamState::new(params.len());
        let mut trace = OptimTrace::default();
        let mut grads = vec![T::zero(); params.len()];

        let record = |trace: &mut OptimTrace, iteration: usize, value: f64, per_layer: BTreeMap<LayerId, f64>| {
            log::info!("iteration {iteration}: loss {value:.6e}");
            trace.records.push(TraceRecord {
                iteration,
                total_loss: value,
                per_layer,
                ms: start.elapsed().as_millis(),
            });
        };

        for it in 0..cfg.iterations {
            let (eval, grad) = self.net.value_and_gradient(&x, &objective)?;
            if !eval.value.is_finite() {
                return Err(Error::Diverged {
                    iteration: it,
                    detail: format!("loss {} (per layer {:?})", eval.value, eval.per_layer),
                });
            }
            if it % cfg.log_every == 0 {
                record(&mut trace, it, eval.value, eval.per_layer);
            }
            // fixed pixels never enter `params`, so their gradient is dropped
            for (g, &i) in grads.iter_mut().zip(&free) {
                *g = grad.data[i] * scale;
            }
            adam_step(&mut params, &grads, &mut state, cfg).map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged {
                    iteration: it,
                    detail: format!("non-finite {what}"),
                },
                other => other,
            })?;
            for (&p, &i) in params.iter().zip(&free) {
                x.data[i] = p * scale;
            }
            if let Some(every) = cfg.checkpoint_every {
                if (it + 1) % every == 0 {
                    let img = self.materialize(canvas, &free, &params)?;
                    on_checkpoint(it + 1, &img)?;
                }
            }
        }

        let feats = self.net.features(&x, self.loss_cfg.layers())?;
        let eval = objective.evaluate(&feats)?;
        if !eval.value.is_finite() {
            return Err(Error::Diverged {
                iteration: cfg.iterations,
                detail: format!("final loss {}", eval.value),
            });
        }
        record(&mut trace, cfg.iterations, eval.value, eval.per_layer);

        let out = if state.t == 0 {
            canvas.clone()
        } else {
            canvas.with_image(self.materialize(canvas, &free, &params)?)?
        };
        Ok((out, trace))
    }

    /// Canvas image with the fixed pixels copied from `canvas` and the free
    /// pixels taken from `params`.
    fn materialize(&self, canvas: &MergedCanvas, free: &[usize], params: &[T]) -> Result<TextureImage> {
        let hw = canvas.fixed_mask().len();
        let mut data = canvas.image().data().to_vec();
        for (&p, &i) in params.iter().zip(free) {
            let (ch, pix) = (i / hw, i % hw);
            let value = (p * T::from(INTENSITY_SCALE).expect("finite scale")).to_f64();
            data[pix * CHANNELS + ch] = value.unwrap_or(f64::NAN) + VGG_MEANS[ch];
        }
        TextureImage::new(canvas.image().height(), canvas.image().width(), data)
    }
}

fn check_canvas(canvas: &MergedCanvas) -> Result<()> {
    let img = canvas.image();
    let min = crate::network::MIN_INPUT_SIDE;
    if img.height() < min || img.width() < min {
        return Err(Error::ImageTooSmall {
            height: img.height(),
            width: img.width(),
            min,
        });
    }
    Ok(())
}

fn synthesize_in<T: Real>(
    original: &TextureImage,
    canvas: &MergedCanvas,
    weights: &NetworkWeights,
    loss_cfg: &LossConfig,
    opt_cfg: &OptimConfig,
    on_checkpoint: &mut dyn FnMut(usize, &TextureImage) -> Result<()>,
) -> Result<(MergedCanvas, OptimTrace)> {
    let net = FeatureNetwork::<T>::new(weights);
    let targets = GramTargets::from_image(&net, original, loss_cfg)?;
    Synthesizer::new(&net, &targets, loss_cfg).run(canvas, opt_cfg, on_checkpoint)
}

/// Optimizes the free region of `canvas` so its Gram statistics match
/// those of `original`.
pub fn synthesize(
    original: &TextureImage,
    canvas: &MergedCanvas,
    weights: &NetworkWeights,
    loss_cfg: &LossConfig,
    opt_cfg: &OptimConfig,
) -> Result<(MergedCanvas, OptimTrace)> {
    synthesize_with(original, canvas, weights, loss_cfg, opt_cfg, &mut |_, _| Ok(()))
}

/// [`synthesize`] with a checkpoint callback.
pub fn synthesize_with(
    original: &TextureImage,
    canvas: &MergedCanvas,
    weights: &NetworkWeights,
    loss_cfg: &LossConfig,
    opt_cfg: &OptimConfig,
    on_checkpoint: &mut dyn FnMut(usize, &TextureImage) -> Result<()>,
) -> Result<(MergedCanvas, OptimTrace)> {
    opt_cfg.validate()?;
    check_canvas(canvas)?;
    match opt_cfg.precision {
        Precision::Single => {
            synthesize_in::<f32>(original, canvas, weights, loss_cfg, opt_cfg, on_checkpoint)
        }
        Precision::Double => {
            synthesize_in::<f64>(original, canvas, weights, loss_cfg, opt_cfg, on_checkpoint)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(lr: f64) -> OptimConfig {
        OptimConfig {
            learning_rate: lr,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn first_step_hand_value() {
        let mut p = vec![0.0f64];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[2.0], &mut s, &cfg(0.001)).unwrap();
        // m̂ = 2, v̂ = 4 → step lr·2/(2+ε)
        let want = -0.001 * 2.0 / (2.0 + 1e-8);
        assert!((p[0] - want).abs() < 1e-15);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = vec![1.5f64, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &cfg(0.1)).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn errors() {
        let mut p = vec![0.0f64; 2];
        let mut s = AdamState::new(2);
        assert!(matches!(
            adam_step(&mut p, &[1.0], &mut s, &cfg(0.1)),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            adam_step(&mut p, &[1.0, f64::NAN], &mut s, &cfg(0.1)),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(s.t, 0);
        assert!(cfg(0.0).validate().is_err());
        assert!(OptimConfig { beta2: 1.0, ..cfg(0.1) }.validate().is_err());
        assert!(OptimConfig { log_every: 0, ..cfg(0.1) }.validate().is_err());
    }

    #[test]
    fn moments_stay_non_negative() {
        let mut rng = crate::image::seeded_rng(4);
        let mut p = vec![0.0f32; 16];
        let mut s = AdamState::new(16);
        for _ in 0..50 {
            let g: Vec<f32> = (0..16).map(|_| rng.random::<f32>() - 0.5).collect();
            adam_step(&mut p, &g, &mut s, &cfg(0.01)).unwrap();
        }
        assert!(s.v.iter().all(|&v| v >= 0.0));
        assert!(s.m.iter().chain(&s.v).all(|v| v.is_finite()));
    }

    #[test]
    fn trace_csv_layout() {
        let mut per_layer = BTreeMap::new();
        per_layer.insert(LayerId::Pool1, 0.5);
        let trace = OptimTrace {
            records: vec![TraceRecord {
                iteration: 3,
                total_loss: 0.5,
                per_layer,
                ms: 12,
            }],
        };
        let mut out = Vec::new();
        trace.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            format!("{TRACE_HEADER}\n3,0.5,,0.5,,,,12\n")
        );
    }

    #[test]
    fn extend_shifted_keeps_iterations_increasing() {
        let rec = |i| TraceRecord {
            iteration: i,
            total_loss: 1.0,
            per_layer: BTreeMap::new(),
            ms: 0,
        };
        let mut a = OptimTrace { records: vec![rec(0), rec(10)] };
        a.extend_shifted(&OptimTrace { records: vec![rec(0), rec(10)] });
        let its: Vec<_> = a.records.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![0, 10, 11, 21]);
    }
}
