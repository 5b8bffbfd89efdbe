//! Training protocol: class-balanced pixel sampling, the symmetric
//! binary-change loss, Adam with decoupled weight decay, cosine decay, and
//! full-image steps.

use std::f64::consts::PI;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ChangeProbabilityPair, ForwardVars, GlobalMindModel};
use crate::params::ParamStore;
use crate::raster::{HyperCube, LabelRaster, CHANGED, UNCHANGED};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Probability clamp applied before taking logs in the loss.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    /// Apply weight decay as `w ← w − lr·λ·w` instead of adding `λ·w` to the
    /// gradient.
    pub decoupled_weight_decay: bool,
    pub n_changed: usize,
    pub n_unchanged: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr0: 5e-4,
            weight_decay: 1e-3,
            decoupled_weight_decay: true,
            n_changed: 500,
            n_unchanged: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Requested per-class counts, shrunk to `floor(0.4·population)` for
    /// scenes too small to supply them.
    pub fn sample_counts(&self, labels: &LabelRaster) -> (usize, usize) {
        let cap = |n: usize, pop: usize| n.min(pop * 2 / 5);
        (
            cap(self.n_changed, labels.count(CHANGED)),
            cap(self.n_unchanged, labels.count(UNCHANGED)),
        )
    }
}

/// `lr0 · ½(1 + cos(π·t/epochs))`.
pub fn cosine_lr(lr0: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return lr0;
    }
    let t = epoch.min(epochs) as f64 / epochs as f64;
    lr0 * 0.5 * (1.0 + (PI * t).cos())
}

/// Training pixels (flat row-major indices, ascending) and their labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleMask {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<usize>,
    pub labels: Vec<u8>,
}

impl SampleMask {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn to_bool_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.height * self.width];
        for &p in &self.pixels {
            m[p] = true;
        }
        m
    }
}

/// Draws `n_changed` changed and `n_unchanged` unchanged pixels uniformly
/// without replacement. Unlabeled pixels are never drawn.
pub fn sample_training_pixels(
    labels: &LabelRaster,
    n_changed: usize,
    n_unchanged: usize,
    seed: u64,
) -> Result<SampleMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<(usize, u8)> = Vec::with_capacity(n_changed + n_unchanged);
    for (class, name, n) in [(CHANGED, "changed", n_changed), (UNCHANGED, "unchanged", n_unchanged)] {
        let pool: Vec<usize> = labels
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == class)
            .map(|(i, _)| i)
            .collect();
        if pool.len() < n {
            return Err(Error::Input(format!(
                "requested {n} {name} pixels but only {} are available",
                pool.len()
            )));
        }
        picked.extend(index::sample(&mut rng, pool.len(), n).into_iter().map(|i| (pool[i], class)));
    }
    picked.sort_unstable();
    Ok(SampleMask {
        height: labels.height(),
        width: labels.width(),
        pixels: picked.iter().map(|p| p.0).collect(),
        labels: picked.iter().map(|p| p.1).collect(),
    })
}

/// Symmetric binary-change loss on a tape: mean cross-entropy of the changed
/// probability over the masked pixels, summed over both maps.
pub fn bcd_loss_tape<T: Scalar>(tape: &mut Tape<T>, out: ForwardVars, mask: &SampleMask) -> Result<Var> {
    let eps = T::lit(PROB_EPS);
    let a = tape.binary_cross_entropy(out.phi1, &mask.pixels, &mask.labels, eps)?;
    let b = tape.binary_cross_entropy(out.phi2, &mask.pixels, &mask.labels, eps)?;
    tape.add(a, b)
}

/// [`bcd_loss_tape`] evaluated on a finished probability pair.
pub fn bcd_loss<T: Scalar>(pair: &ChangeProbabilityPair<T>, mask: &SampleMask) -> Result<T> {
    let mut tape = Tape::new();
    let phi1 = tape.constant(pair.phi1.clone())?;
    let phi2 = tape.constant(pair.phi2.clone())?;
    let l = bcd_loss_tape(&mut tape, ForwardVars { phi1, phi2 }, mask)?;
    Ok(tape.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: true,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One Adam update with bias correction. Refuses to move anything if any
/// gradient is non-finite.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>, lr: f64) -> Result<()> {
    if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient in parameter {}", p.name)));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = T::lit(1.0 - c.beta1.powi(t));
    let bc2 = T::lit(1.0 - c.beta2.powi(t));
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (lr_t, eps, wd) = (T::lit(lr), T::lit(c.eps), T::lit(c.weight_decay));
    let decay = T::one() - lr_t * wd;
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let value = p.value.data_mut();
        let grad = p.grad.data();
        for i in 0..value.len() {
            let mut g = grad[i];
            if c.decoupled {
                value[i] = value[i] * decay;
            } else {
                g = g + wd * value[i];
            }
            let mi = b1 * m.data()[i] + (T::one() - b1) * g;
            let vi = b2 * v.data()[i] + (T::one() - b2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            value[i] = value[i] - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub model: GlobalMindModel<f32>,
    pub history: Vec<EpochRecord>,
    pub mask: SampleMask,
}

/// Trains on the full bi-temporal scene for `cfg.epochs` steps. Each step is
/// one forward pass over both whole cubes, the loss on the sampled pixels,
/// backward, and an Adam update at the cosine learning rate of that epoch.
pub fn train(
    mut model: GlobalMindModel<f32>,
    x: &HyperCube,
    y: &HyperCube,
    labels: &LabelRaster,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(&mut model, x, y, labels, cfg, |_| {}).map(|(history, mask)| TrainOutcome {
        model,
        history,
        mask,
    })
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &mut GlobalMindModel<f32>,
    x: &HyperCube,
    y: &HyperCube,
    labels: &LabelRaster,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Vec<EpochRecord>, SampleMask)> {
    if x.dims() != y.dims() {
        return Err(Error::Input(format!(
            "bi-temporal cubes differ in shape: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    if (labels.height(), labels.width()) != (x.height(), x.width()) {
        return Err(Error::Input(format!(
            "labels are {}×{} but the cubes are {}×{}",
            labels.height(),
            labels.width(),
            x.height(),
            x.width()
        )));
    }
    let (nc, nu) = cfg.sample_counts(labels);
    let mask = sample_training_pixels(labels, nc, nu, cfg.seed)?;
    let mut state = OptimizerState::new(
        &model.params,
        AdamConfig {
            weight_decay: cfg.weight_decay,
            decoupled: cfg.decoupled_weight_decay,
            ..AdamConfig::default()
        },
    );
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr0, epoch, cfg.epochs);
        let at_epoch = |e: Error| match e {
            Error::NonFinite { op } => {
                Error::Numeric(format!("{op} produced a non-finite value at epoch {epoch}"))
            }
            Error::Numeric(m) => Error::Numeric(format!("{m} at epoch {epoch}")),
            other => other,
        };
        model.params.zero_grad();
        let mut tape = Tape::new();
        let xv = tape.constant(x.tensor().clone())?;
        let yv = tape.constant(y.tensor().clone())?;
        let out = model.forward_tape(&mut tape, xv, yv).map_err(at_epoch)?;
        let loss_var = bcd_loss_tape(&mut tape, out, &mask).map_err(at_epoch)?;
        let loss = tape.value(loss_var).item() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at epoch {epoch}")));
        }
        tape.backward(loss_var, &mut model.params)?;
        drop(tape);
        adam_step(&mut model.params, &mut state, lr).map_err(at_epoch)?;
        let rec = EpochRecord { epoch, lr, loss };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok((history, mask))
}

/// Writes one JSON object per line: `{"epoch":..,"lr":..,"loss":..}`.
pub fn write_loss_history(history: &[EpochRecord], mut w: impl std::io::Write) -> Result<()> {
    for rec in history {
        serde_json::to_writer(&mut w, rec).map_err(|e| Error::Io(e.into()))?;
        writeln!(w)?;
    }
    Ok(())
}
