//! Global axial segmentation: a feature map `F ∈ R^{H×W×B}` read as a sequence
//! of whole rows (GRS) or whole columns (GCS), with each channel acting as an
//! attention head.
//!
//! Under GRS there are `L = H` tokens, `N_h = B` heads and each head sees a
//! `d_k = W` dimensional slice of its token; GCS swaps the roles of `H` and
//! `W`. The attention matrix of one head is therefore `L×L`, never
//! `(H·W)×(H·W)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AxialLayout {
    /// Global row segmentation: tokens are rows.
    #[serde(rename = "grs")]
    Grs,
    /// Global column segmentation: tokens are columns.
    #[serde(rename = "gcs")]
    Gcs,
}

/// `(L, N_h, d_k)` of an axial view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxialDims {
    pub len: usize,
    pub heads: usize,
    pub dim: usize,
}

impl AxialLayout {
    pub fn dims(self, h: usize, w: usize, b: usize) -> AxialDims {
        match self {
            AxialLayout::Grs => AxialDims {
                len: h,
                heads: b,
                dim: w,
            },
            AxialLayout::Gcs => AxialDims {
                len: w,
                heads: b,
                dim: h,
            },
        }
    }

    /// Axis permutation taking an `[H, W, B]` array to head-major
    /// `[N_h, L, d_k]`.
    pub fn to_head_major_perm(self) -> [usize; 3] {
        match self {
            AxialLayout::Grs => [2, 0, 1],
            AxialLayout::Gcs => [2, 1, 0],
        }
    }

    /// Inverse of [`AxialLayout::to_head_major_perm`].
    pub fn from_head_major_perm(self) -> [usize; 3] {
        match self {
            AxialLayout::Grs => [1, 2, 0],
            AxialLayout::Gcs => [2, 1, 0],
        }
    }

    /// Source pixel `(row, col, channel)` of token `t`, head `i`, dim `j`.
    #[inline]
    pub fn source_index(self, token: usize, head: usize, dim: usize) -> (usize, usize, usize) {
        match self {
            AxialLayout::Grs => (token, dim, head),
            AxialLayout::Gcs => (dim, token, head),
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            AxialLayout::Grs => "GRS",
            AxialLayout::Gcs => "GCS",
        }
    }
}

#[derive(Clone, Debug)]
enum Storage<'a, T> {
    /// Borrowed `H×W×B` source; tokens are index remappings into it.
    Source(&'a [T]),
    /// Owned contiguous `[N_h, L, d_k]` data.
    HeadMajor(Vec<T>),
}

/// A feature map viewed as `L` tokens × `N_h` heads × `d_k` dims.
#[derive(Clone, Debug)]
pub struct AxialSequence<'a, T> {
    source_shape: [usize; 3],
    layout: AxialLayout,
    storage: Storage<'a, T>,
}

/// Views `f` (shape `[H, W, B]`) as an axial sequence without copying.
pub fn to_axial<T: Scalar>(f: &Tensor<T>, layout: AxialLayout) -> Result<AxialSequence<'_, T>> {
    let &[h, w, b] = f.shape() else {
        return Err(Error::shape("to_axial", f.shape(), &[0, 0, 0]));
    };
    if h == 0 || w == 0 || b == 0 {
        return Err(Error::Input(format!("to_axial on empty map {:?}", f.shape())));
    }
    Ok(AxialSequence {
        source_shape: [h, w, b],
        layout,
        storage: Storage::Source(f.data()),
    })
}

/// Reassembles the `H×W×B` map an axial sequence was taken from.
pub fn from_axial<T: Scalar>(s: &AxialSequence<'_, T>) -> Result<Tensor<T>> {
    s.check_integrity()?;
    let [h, w, b] = s.source_shape;
    match &s.storage {
        Storage::Source(src) => Tensor::new(&[h, w, b], src.to_vec()),
        Storage::HeadMajor(data) => {
            let d = s.dims();
            let perm = s.layout.from_head_major_perm();
            let out = crate::kernels::permute(data, &[d.heads, d.len, d.dim], &perm);
            Tensor::new(&[h, w, b], out)
        }
    }
}

impl<'a, T: Scalar> AxialSequence<'a, T> {
    /// Wraps head-major `[N_h, L, d_k]` data (for example an attention output)
    /// together with the map shape it reassembles into.
    pub fn from_head_major(
        data: Vec<T>,
        source_shape: [usize; 3],
        layout: AxialLayout,
    ) -> Result<AxialSequence<'static, T>> {
        let s = AxialSequence {
            source_shape,
            layout,
            storage: Storage::HeadMajor(data),
        };
        s.check_integrity()?;
        Ok(s)
    }

    pub fn layout(&self) -> AxialLayout {
        self.layout
    }

    pub fn source_shape(&self) -> [usize; 3] {
        self.source_shape
    }

    pub fn dims(&self) -> AxialDims {
        let [h, w, b] = self.source_shape;
        self.layout.dims(h, w, b)
    }

    /// Whether the data is still the borrowed source map.
    pub fn is_view(&self) -> bool {
        matches!(self.storage, Storage::Source(_))
    }

    fn check_integrity(&self) -> Result<()> {
        let [h, w, b] = self.source_shape;
        let len = match &self.storage {
            Storage::Source(s) => s.len(),
            Storage::HeadMajor(v) => v.len(),
        };
        if h.checked_mul(w).and_then(|x| x.checked_mul(b)) != Some(len) {
            return Err(Error::Integrity(format!(
                "axial sequence holds {len} values but claims source shape {:?}",
                self.source_shape
            )));
        }
        Ok(())
    }

    pub fn get(&self, token: usize, head: usize, dim: usize) -> T {
        let d = self.dims();
        assert!(token < d.len && head < d.heads && dim < d.dim, "axial index out of range");
        match &self.storage {
            Storage::Source(src) => {
                let [_, w, b] = self.source_shape;
                let (r, c, ch) = self.layout.source_index(token, head, dim);
                src[(r * w + c) * b + ch]
            }
            Storage::HeadMajor(v) => v[(head * d.len + token) * d.dim + dim],
        }
    }

    /// Contiguous `[N_h, L, d_k]` copy.
    pub fn materialize(&self) -> Tensor<T> {
        let d = self.dims();
        let data = match &self.storage {
            Storage::Source(src) => crate::kernels::permute(
                src,
                &self.source_shape,
                &self.layout.to_head_major_perm(),
            ),
            Storage::HeadMajor(v) => v.clone(),
        };
        Tensor::new(&[d.heads, d.len, d.dim], data).expect("integrity checked at construction")
    }

    #[cfg(test)]
    pub(crate) fn corrupt_shape(&mut self, shape: [usize; 3]) {
        self.source_shape = shape;
    }
}

/// Differentiable `[H, W, B] → [N_h, L, d_k]` on a tape.
pub fn to_axial_var<T: Scalar>(tape: &mut Tape<T>, f: Var, layout: AxialLayout) -> Result<Var> {
    if tape.shape(f).len() != 3 {
        return Err(Error::Config(format!(
            "axial layout needs an H×W×C map, got {:?}",
            tape.shape(f)
        )));
    }
    tape.permute(f, &layout.to_head_major_perm())
}

/// Differentiable `[N_h, L, d_k] → [H, W, B]` on a tape.
pub fn from_axial_var<T: Scalar>(tape: &mut Tape<T>, s: Var, layout: AxialLayout) -> Result<Var> {
    tape.permute(s, &layout.from_head_major_perm())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    Axial(AxialLayout),
    /// Every pixel a token, every channel a head with a one-dimensional slice.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionCost {
    /// Entries of all per-head attention matrices.
    pub score_entries: u64,
    /// Multiply-adds of the `QKᵀ` and `A·V` products together.
    pub mult_adds: u64,
    /// Set when a count overflowed `u64` and was clamped to `u64::MAX`.
    pub saturated: bool,
}

/// Attention-matrix size and product cost of one attention pass over an
/// `h×w×b` map.
pub fn attention_cost(h: u64, w: u64, b: u64, mode: AttentionMode) -> Result<AttentionCost> {
    if h == 0 || w == 0 || b == 0 {
        return Err(Error::Input("attention_cost needs positive dims".into()));
    }
    let (len, dim) = match mode {
        AttentionMode::Axial(AxialLayout::Grs) => (Some(h), w),
        AttentionMode::Axial(AxialLayout::Gcs) => (Some(w), h),
        AttentionMode::Full => (h.checked_mul(w), 1),
    };
    let scores = len
        .and_then(|l| l.checked_mul(l))
        .and_then(|s| s.checked_mul(b));
    let mult_adds = scores
        .and_then(|s| s.checked_mul(dim))
        .and_then(|s| s.checked_mul(2));
    Ok(AttentionCost {
        score_entries: scores.unwrap_or(u64::MAX),
        mult_adds: mult_adds.unwrap_or(u64::MAX),
        saturated: mult_adds.is_none(),
    })
}
