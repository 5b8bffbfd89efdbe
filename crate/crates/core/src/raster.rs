//! In-memory raster types: hyperspectral cubes, label rasters, binary maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const UNCHANGED: u8 = 0;
pub const CHANGED: u8 = 1;
pub const UNLABELED: u8 = 255;

/// One acquisition: an `H×W×B` cube stored pixel-interleaved (row-major
/// `[H, W, B]`).
#[derive(Clone, Debug, PartialEq)]
pub struct HyperCube(Tensor<f32>);

impl HyperCube {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        if t.ndim() != 3 || t.is_empty() {
            return Err(Error::Input(format!(
                "hyperspectral cube must be a non-empty H×W×B array, got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn zeros(h: usize, w: usize, b: usize) -> Self {
        Self(Tensor::zeros(&[h, w, b]))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn bands(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), self.bands())
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<f32> {
        &mut self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn spectrum(&self, row: usize, col: usize) -> &[f32] {
        let b = self.bands();
        let o = (row * self.width() + col) * b;
        &self.0.data()[o..o + b]
    }

    /// Rows `r0..r1` and columns `c0..c1` as a new cube.
    pub fn crop(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Self {
        let b = self.bands();
        let mut data = Vec::with_capacity((r1 - r0) * (c1 - c0) * b);
        for r in r0..r1 {
            for c in c0..c1 {
                data.extend_from_slice(self.spectrum(r, c));
            }
        }
        Self(Tensor::new(&[r1 - r0, c1 - c0, b], data).expect("crop within bounds"))
    }
}

/// Per-pixel ground truth: 0 unchanged, 1 changed, 255 unlabeled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRaster {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelRaster {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("label raster", &[height, width], &[data.len()]));
        }
        if let Some((i, &v)) = data
            .iter()
            .enumerate()
            .find(|(_, &v)| !matches!(v, UNCHANGED | CHANGED | UNLABELED))
        {
            return Err(crate::error::FormatError::LabelValue { value: v, index: i }.into());
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn count(&self, value: u8) -> usize {
        self.data.iter().filter(|&&v| v == value).count()
    }

    pub fn labeled(&self) -> usize {
        self.data.len() - self.count(UNLABELED)
    }

    pub fn crop(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Self {
        let data = (r0..r1)
            .flat_map(|r| self.data[r * self.width + c0..r * self.width + c1].iter().copied())
            .collect();
        Self {
            height: r1 - r0,
            width: c1 - c0,
            data,
        }
    }
}

/// A predicted change map: 0 unchanged, 1 changed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("binary map", &[height, width], &[data.len()]));
        }
        if let Some((i, &v)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(crate::error::FormatError::LabelValue { value: v, index: i }.into());
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }
}
