//! The full siamese change-detection network.
//!
//! Each date passes through the same stem and GlobalM stages:
//!
//! ```text
//! F0 = stem(x)
//! F1 = fuse1([F0, GlobalM1(F0)])
//! F2 = fuse2([F1, GlobalM2(F1)])
//! ```
//!
//! The change path pairs the two dates at every level,
//! `Di = GlobalDi(Fi_x, Fi_y)`, and classifies `[D0, D1, D2]` with a 1×1
//! convolution. The second probability map repeats the change path with the
//! two dates swapped at every GlobalD input.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{GlobalDBlock, GlobalMBlock};
use crate::error::{Error, Result};
use crate::gas::AxialLayout;
use crate::layers::{Activation, Conv, HeInit};
use crate::params::ParamStore;
use crate::raster::BinaryMap;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Axial layouts of the two GlobalM stages (and of GlobalD 2 and 3).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum GasCombo {
    #[default]
    #[serde(rename = "rr")]
    GrsGrs,
    #[serde(rename = "rc")]
    GrsGcs,
    #[serde(rename = "cr")]
    GcsGrs,
    #[serde(rename = "cc")]
    GcsGcs,
}

impl GasCombo {
    pub const ALL: [GasCombo; 4] = [
        GasCombo::GrsGrs,
        GasCombo::GrsGcs,
        GasCombo::GcsGrs,
        GasCombo::GcsGcs,
    ];

    pub fn layouts(self) -> (AxialLayout, AxialLayout) {
        use AxialLayout::{Gcs, Grs};
        match self {
            GasCombo::GrsGrs => (Grs, Grs),
            GasCombo::GrsGcs => (Grs, Gcs),
            GasCombo::GcsGrs => (Gcs, Grs),
            GasCombo::GcsGcs => (Gcs, Gcs),
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            GasCombo::GrsGrs => "rr",
            GasCombo::GrsGcs => "rc",
            GasCombo::GcsGrs => "cr",
            GasCombo::GcsGcs => "cc",
        }
    }
}

impl fmt::Display for GasCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, b) = self.layouts();
        write!(f, "{}-{}", a.short_name(), b.short_name())
    }
}

impl FromStr for GasCombo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GasCombo::ALL
            .into_iter()
            .find(|c| c.code() == s)
            .ok_or_else(|| Error::Config(format!("unknown GAS combination {s:?}; use rr, rc, cr or cc")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_bands: usize,
    pub channels: usize,
    pub gas_combo: GasCombo,
    pub first_globald_layout: AxialLayout,
    pub ffn_ratio: usize,
    pub stem_kernels: Vec<usize>,
    pub enable_global_m: bool,
    pub enable_global_d: bool,
    pub activation: Activation,
    /// Normalize the key features of GlobalD as well as the query features.
    pub symmetric_ln: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_bands: 8,
            channels: 32,
            gas_combo: GasCombo::GrsGrs,
            first_globald_layout: AxialLayout::Grs,
            ffn_ratio: 2,
            stem_kernels: vec![1, 3, 5],
            enable_global_m: true,
            enable_global_d: true,
            activation: Activation::Gelu,
            symmetric_ln: false,
        }
    }
}

impl ModelConfig {
    pub fn with_bands(in_bands: usize) -> Self {
        Self {
            in_bands,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_bands == 0 || self.channels == 0 {
            return Err(Error::Config("bands and channels must be positive".into()));
        }
        if self.stem_kernels.is_empty() {
            return Err(Error::Config("stem needs at least one kernel".into()));
        }
        if let Some(k) = self.stem_kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("stem kernel size {k} is not odd")));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::Config("FFN expansion ratio must be at least 1".into()));
        }
        Ok(())
    }

    /// Ablation label: "Base", "+GlobalM", "+GlobalD" or "GlobalMind".
    pub fn variant_name(&self) -> &'static str {
        match (self.enable_global_m, self.enable_global_d) {
            (false, false) => "Base",
            (true, false) => "+GlobalM",
            (false, true) => "+GlobalD",
            (true, true) => "GlobalMind",
        }
    }
}

/// Per-pixel class probabilities `[H, W, 2]` (channel 1 = changed) of the
/// direct and the swapped change path.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeProbabilityPair<T> {
    pub phi1: Tensor<T>,
    pub phi2: Tensor<T>,
}

/// Tape handles of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub phi1: Var,
    pub phi2: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalMindModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    stem: Vec<Conv>,
    stem_fuse: Conv,
    global_m: Option<[(GlobalMBlock, Conv); 2]>,
    global_d: Option<[GlobalDBlock; 3]>,
    classifier: Conv,
}

impl<T: Scalar> GlobalMindModel<T> {
    /// Builds the model with He-normal convolution weights, zero biases and
    /// identity layer norms. Equal seeds give bit-identical parameters.
    pub fn init_he_normal(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = HeInit::new(seed);
        let (b, c) = (config.in_bands, config.channels);
        let stem: Vec<Conv> = config
            .stem_kernels
            .iter()
            .map(|&k| Conv::new(&mut store, &mut init, &format!("stem.k{k}"), k, b, c))
            .collect();
        let stem_fuse = Conv::new(&mut store, &mut init, "stem.fuse", 1, stem.len() * c, c);
        let (layout1, layout2) = config.gas_combo.layouts();
        let global_m = config.enable_global_m.then(|| {
            [(1, layout1), (2, layout2)].map(|(i, layout)| {
                let block = GlobalMBlock::new(
                    &mut store,
                    &mut init,
                    &format!("globalm{i}"),
                    c,
                    config.ffn_ratio,
                    config.activation,
                    layout,
                );
                let fuse = Conv::new(&mut store, &mut init, &format!("fuse{i}"), 1, 2 * c, c);
                (block, fuse)
            })
        });
        let global_d = config.enable_global_d.then(|| {
            [
                (1, config.first_globald_layout),
                (2, layout1),
                (3, layout2),
            ]
            .map(|(i, layout)| {
                GlobalDBlock::new(
                    &mut store,
                    &mut init,
                    &format!("globald{i}"),
                    c,
                    config.ffn_ratio,
                    config.activation,
                    layout,
                    config.symmetric_ln,
                )
            })
        });
        let classifier = Conv::new(&mut store, &mut init, "classifier", 1, 3 * c, 2);
        Ok(Self {
            config,
            params: store,
            stem,
            stem_fuse,
            global_m,
            global_d,
            classifier,
        })
    }

    pub fn cast<U: Scalar>(&self) -> GlobalMindModel<U> {
        GlobalMindModel {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            stem_fuse: self.stem_fuse,
            global_m: self.global_m,
            global_d: self.global_d,
            classifier: self.classifier,
        }
    }

    pub fn global_m_blocks(&self) -> Option<[GlobalMBlock; 2]> {
        self.global_m.map(|m| [m[0].0, m[1].0])
    }

    pub fn global_d_blocks(&self) -> Option<[GlobalDBlock; 3]> {
        self.global_d
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 3 || s[2] != self.config.in_bands {
            return Err(Error::Input(format!(
                "model expects an H×W×{} cube, got {s:?}",
                self.config.in_bands
            )));
        }
        Ok(())
    }

    /// Multi-scale convolutions, concatenated and fused to `C` channels, then GELU.
    pub fn stem_forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.stem_with(tape, &self.params, x)
    }

    fn stem_with(&self, tape: &mut Tape<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let scales = self
            .stem
            .iter()
            .map(|conv| conv.forward(tape, p, x))
            .collect::<Result<Vec<_>>>()?;
        let cat = tape.concat(&scales)?;
        let fused = self.stem_fuse.forward(tape, p, cat)?;
        tape.gelu(fused)
    }

    /// Shallow-to-deep features `[F0, F1, F2]` of one date.
    pub fn branch_forward(&self, tape: &mut Tape<T>, x: Var) -> Result<[Var; 3]> {
        self.branch_with(tape, &self.params, x)
    }

    fn branch_with(&self, tape: &mut Tape<T>, p: &ParamStore<T>, x: Var) -> Result<[Var; 3]> {
        let f0 = self.stem_with(tape, p, x)?;
        let Some(stages) = &self.global_m else {
            return Ok([f0; 3]);
        };
        let mut feats = [f0; 3];
        for (i, (block, fuse)) in stages.iter().enumerate() {
            let prev = feats[i];
            let g = block.forward(tape, p, prev)?;
            let cat = tape.concat(&[prev, g])?;
            feats[i + 1] = fuse.forward(tape, p, cat)?;
        }
        Ok(feats)
    }

    fn change_path(&self, tape: &mut Tape<T>, p: &ParamStore<T>, a: &[Var; 3], b: &[Var; 3]) -> Result<Var> {
        let mut taps = [a[0]; 3];
        for i in 0..3 {
            taps[i] = match &self.global_d {
                Some(blocks) => blocks[i].forward(tape, p, a[i], b[i])?,
                None => {
                    let d = tape.sub(a[i], b[i])?;
                    tape.abs(d)?
                }
            };
        }
        let cat = tape.concat(&taps)?;
        let logits = self.classifier.forward(tape, p, cat)?;
        tape.softmax_lastdim(logits)
    }

    /// Records the full forward pass of both dates on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape<T>, x: Var, y: Var) -> Result<ForwardVars> {
        self.forward_tape_with(tape, &self.params, x, y)
    }

    /// [`Self::forward_tape`] reading parameter values from `store`, which
    /// must have this model's layout.
    pub fn forward_tape_with(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, y: Var) -> Result<ForwardVars> {
        self.check_input(tape, x)?;
        if tape.shape(x) != tape.shape(y) {
            return Err(Error::Input(format!(
                "bi-temporal cubes differ in shape: {:?} vs {:?}",
                tape.shape(x),
                tape.shape(y)
            )));
        }
        let fx = self.branch_with(tape, store, x)?;
        let fy = self.branch_with(tape, store, y)?;
        let phi1 = self.change_path(tape, store, &fx, &fy)?;
        let phi2 = self.change_path(tape, store, &fy, &fx)?;
        Ok(ForwardVars { phi1, phi2 })
    }

    pub fn forward(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<ChangeProbabilityPair<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let yv = tape.constant(y.clone())?;
        let out = self.forward_tape(&mut tape, xv, yv)?;
        Ok(ChangeProbabilityPair {
            phi1: tape.value(out.phi1).clone(),
            phi2: tape.value(out.phi2).clone(),
        })
    }
}

/// Per-pixel argmax of the first probability map; an exact tie is unchanged.
pub fn predict_binary<T: Scalar>(pair: &ChangeProbabilityPair<T>) -> Result<BinaryMap> {
    let s = pair.phi1.shape();
    if s.len() != 3 || s[2] != 2 {
        return Err(Error::shape("predict_binary", s, &[0, 0, 2]));
    }
    let data = pair
        .phi1
        .data()
        .chunks_exact(2)
        .map(|p| u8::from(p[1] > p[0]))
        .collect();
    BinaryMap::new(s[0], s[1], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gas_combo_codes_round_trip() {
        for c in GasCombo::ALL {
            assert_eq!(c.code().parse::<GasCombo>().unwrap(), c);
        }
        assert!("rg".parse::<GasCombo>().is_err());
        assert_eq!(GasCombo::GcsGrs.to_string(), "GCS-GRS");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::with_bands(3);
        cfg.stem_kernels = vec![1, 4];
        assert!(GlobalMindModel::<f32>::init_he_normal(cfg, 0).is_err());
    }

    #[test]
    fn parameter_declaration_order() {
        let m = GlobalMindModel::<f32>::init_he_normal(ModelConfig::with_bands(3), 0).unwrap();
        let names: Vec<&str> = m.params.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names[0], "stem.k1.weight");
        assert_eq!(names.last(), Some(&"classifier.bias"));
        assert!(names.iter().any(|n| n.starts_with("globald3.attn.fuse")));
    }

    #[test]
    fn tie_is_unchanged() {
        let pair = ChangeProbabilityPair {
            phi1: Tensor::new(&[1, 3, 2], vec![0.5, 0.5, 0.2, 0.8, 1.0, 0.0]).unwrap(),
            phi2: Tensor::zeros(&[1, 3, 2]),
        };
        assert_eq!(predict_binary(&pair).unwrap().data(), &[0, 1, 0]);
    }
}
