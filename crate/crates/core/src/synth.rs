//! Seeded synthetic bi-temporal scenes with planted change regions.
//!
//! The first date is a linear mixture of a few smooth background endmember
//! spectra with spatially smooth abundances. The second date copies it and
//! overwrites every planted region with a distinct "change" endmember.
//! Independent Gaussian noise is then added to both dates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{HyperCube, LabelRaster, CHANGED, UNCHANGED};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionShape {
    Square,
    /// Disc inscribed in the `size×size` box.
    Circle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeRegion {
    pub shape: RegionShape,
    pub size: usize,
    /// Top-left corner of the bounding box; drawn from the seed when absent.
    #[serde(default)]
    pub origin: Option<(usize, usize)>,
}

impl ChangeRegion {
    pub fn square(size: usize) -> Self {
        Self {
            shape: RegionShape::Square,
            size,
            origin: None,
        }
    }

    fn contains(&self, dr: usize, dc: usize) -> bool {
        match self.shape {
            RegionShape::Square => true,
            RegionShape::Circle => {
                let c = self.size as f64 / 2.0;
                let (y, x) = (dr as f64 + 0.5 - c, dc as f64 + 0.5 - c);
                y * y + x * x <= c * c
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub regions: Vec<ChangeRegion>,
    /// Number of background endmembers.
    pub endmembers: usize,
    /// Spatial correlation length of the abundance fields, in pixels.
    pub smoothness: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 24,
            bands: 8,
            regions: vec![ChangeRegion::square(8)],
            endmembers: 3,
            smoothness: 6.0,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

pub struct SynthScene {
    pub t1: HyperCube,
    pub t2: HyperCube,
    pub labels: LabelRaster,
}

fn smooth_spectrum(rng: &mut ChaCha8Rng, bands: usize) -> Vec<f64> {
    let base = rng.gen_range(0.25..0.6);
    let amp = rng.gen_range(0.1..0.25);
    let freq = rng.gen_range(0.5..2.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let slope = rng.gen_range(-0.2..0.2);
    (0..bands)
        .map(|b| {
            let t = b as f64 / bands.max(2).saturating_sub(1).max(1) as f64;
            base + amp * (std::f64::consts::PI * freq * t + phase).sin() + slope * (t - 0.5)
        })
        .collect()
}

pub fn spectral_angle(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0).acos()
}

fn angle64(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos()
}

/// Positive smooth field built from a handful of Gaussian bumps.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: f64) -> Vec<f64> {
    let bumps = 2 + (h * w) / (scale * scale * 4.0).max(1.0) as usize;
    let centers: Vec<(f64, f64, f64)> = (0..bumps.min(64))
        .map(|_| {
            (
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.5..1.5),
            )
        })
        .collect();
    let s2 = 2.0 * scale.max(0.5).powi(2);
    (0..h * w)
        .map(|p| {
            let (r, c) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
            0.05 + centers
                .iter()
                .map(|&(cr, cc, a)| a * (-((r - cr).powi(2) + (c - cc).powi(2)) / s2).exp())
                .sum::<f64>()
        })
        .collect()
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthScene> {
    let (h, w, b) = (spec.height, spec.width, spec.bands);
    if h == 0 || w == 0 || b == 0 {
        return Err(Error::Config("synthetic scene needs positive dims".into()));
    }
    if spec.endmembers == 0 {
        return Err(Error::Config("synthetic scene needs at least one endmember".into()));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::Config("noise sigma must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut labels = vec![UNCHANGED; h * w];
    for (i, region) in spec.regions.iter().enumerate() {
        if region.size == 0 || region.size > h || region.size > w {
            return Err(Error::Config(format!(
                "change region {i} of size {} does not fit a {h}×{w} scene",
                region.size
            )));
        }
        let (r0, c0) = match region.origin {
            Some((r, c)) if r + region.size <= h && c + region.size <= w => (r, c),
            Some(o) => {
                return Err(Error::Config(format!(
                    "change region {i} at {o:?} extends past the {h}×{w} scene"
                )))
            }
            None => (
                rng.gen_range(0..=h - region.size),
                rng.gen_range(0..=w - region.size),
            ),
        };
        for dr in 0..region.size {
            for dc in 0..region.size {
                if region.contains(dr, dc) {
                    labels[(r0 + dr) * w + c0 + dc] = CHANGED;
                }
            }
        }
    }

    let background: Vec<Vec<f64>> = (0..spec.endmembers).map(|_| smooth_spectrum(&mut rng, b)).collect();
    // most dissimilar of a few candidates
    let change = (0..16)
        .map(|_| smooth_spectrum(&mut rng, b))
        .map(|s| {
            let min = background.iter().map(|e| angle64(&s, e)).fold(f64::INFINITY, f64::min);
            (min, s)
        })
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, s)| s)
        .expect("candidates are non-empty");

    let fields: Vec<Vec<f64>> = (0..spec.endmembers)
        .map(|_| smooth_field(&mut rng, h, w, spec.smoothness))
        .collect();
    let mut t1 = vec![0f64; h * w * b];
    for p in 0..h * w {
        let total: f64 = fields.iter().map(|f| f[p]).sum();
        for (f, e) in fields.iter().zip(&background) {
            let a = f[p] / total;
            for (k, &ev) in e.iter().enumerate() {
                t1[p * b + k] += a * ev;
            }
        }
    }
    let mut t2 = t1.clone();
    for (p, _) in labels.iter().enumerate().filter(|(_, &l)| l == CHANGED) {
        t2[p * b..(p + 1) * b].copy_from_slice(&change);
    }
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut finish = |v: Vec<f64>| -> Result<HyperCube> {
        let data = v
            .into_iter()
            .map(|x| {
                let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (x + n) as f32
            })
            .collect();
        HyperCube::new(Tensor::new(&[h, w, b], data)?)
    };
    let t1 = finish(t1)?;
    let t2 = finish(t2)?;
    Ok(SynthScene {
        t1,
        t2,
        labels: LabelRaster::new(h, w, labels)?,
    })
}
