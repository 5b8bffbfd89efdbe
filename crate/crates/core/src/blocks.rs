//! The spatial (GlobalM) and cross-temporal (GlobalD) attention blocks.
//!
//! Both blocks project with 1×1 convolutions, attend along the global row or
//! column sequence of their [`AxialLayout`], scale scores by `1/√d_k` where
//! `d_k` is the per-head token width (W under GRS, H under GCS), and merge the
//! heads with a 3×3 convolution over the reassembled map. Since heads are
//! channels, reassembly is the inverse axial permutation.

use crate::error::{Error, Result};
use crate::gas::{from_axial_var, to_axial_var, AxialLayout};
use crate::layers::{Activation, Conv, FfnWeights, HeInit, LayerNorm};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Projections of the spatial interactive attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SiMhsaWeights {
    pub wq: Conv,
    pub wk: Conv,
    pub wv: Conv,
    pub fuse: Conv,
}

/// Projections of the temporal interactive attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TiMhsaWeights {
    pub wq: Conv,
    pub wk: Conv,
    pub wv: Conv,
    pub fuse: Conv,
}

fn qkv_fuse<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &mut HeInit,
    name: &str,
    c: usize,
) -> (Conv, Conv, Conv, Conv) {
    (
        Conv::new(store, init, &format!("{name}.wq"), 1, c, c),
        Conv::new(store, init, &format!("{name}.wk"), 1, c, c),
        Conv::new(store, init, &format!("{name}.wv"), 1, c, c),
        Conv::new(store, init, &format!("{name}.fuse"), 3, c, c),
    )
}

impl SiMhsaWeights {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut HeInit, name: &str, c: usize) -> Self {
        let (wq, wk, wv, fuse) = qkv_fuse(store, init, name, c);
        Self { wq, wk, wv, fuse }
    }
}

impl TiMhsaWeights {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut HeInit, name: &str, c: usize) -> Self {
        let (wq, wk, wv, fuse) = qkv_fuse(store, init, name, c);
        Self { wq, wk, wv, fuse }
    }
}

/// Result of an attention pass with its per-head attention matrices
/// (`[N_h, L, L]`) kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub attention: Var,
}

fn check_map<T: Scalar>(tape: &Tape<T>, z: Var, c: usize) -> Result<()> {
    let s = tape.shape(z);
    if s.len() != 3 || s[2] != c {
        return Err(Error::Config(format!(
            "attention block over {c} channels cannot take a map of shape {s:?}"
        )));
    }
    Ok(())
}

/// Multi-head axial attention on already-projected `q`, `k`, `v` maps, heads
/// fused by `fuse`.
fn axial_attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    q: Var,
    k: Var,
    v: Var,
    fuse: &Conv,
    layout: AxialLayout,
) -> Result<Attended> {
    let [h, w, c] = <[usize; 3]>::try_from(tape.shape(q)).expect("checked H×W×C");
    let dims = layout.dims(h, w, c);
    let qa = to_axial_var(tape, q, layout)?;
    let ka = to_axial_var(tape, k, layout)?;
    let va = to_axial_var(tape, v, layout)?;
    let kt = tape.transpose_last2(ka)?;
    let scores = tape.matmul(qa, kt)?;
    let scores = tape.scale(scores, T::one() / T::from_usize(dims.dim).unwrap().sqrt())?;
    let attention = tape.softmax_lastdim(scores)?;
    let heads = tape.matmul(attention, va)?;
    let merged = from_axial_var(tape, heads, layout)?;
    let output = fuse.forward(tape, store, merged)?;
    Ok(Attended { output, attention })
}

/// Spatial interactive multi-head self-attention.
pub fn si_mhsa<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    z: Var,
    w: &SiMhsaWeights,
    layout: AxialLayout,
) -> Result<Attended> {
    check_map(tape, z, w.wq.cin)?;
    let q = w.wq.forward(tape, store, z)?;
    let k = w.wk.forward(tape, store, z)?;
    let v = w.wv.forward(tape, store, z)?;
    axial_attention(tape, store, q, k, v, &w.fuse, layout)
}

/// Temporal interactive multi-head self-attention: queries from `fx`, keys
/// from `fy`, values from `|fx - fy|`.
pub fn ti_mhsa<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    fx: Var,
    fy: Var,
    w: &TiMhsaWeights,
    layout: AxialLayout,
) -> Result<Attended> {
    let diff = abs_diff(tape, fx, fy)?;
    ti_mhsa_parts(tape, store, fx, fy, diff, w, layout)
}

fn abs_diff<T: Scalar>(tape: &mut Tape<T>, fx: Var, fy: Var) -> Result<Var> {
    if tape.shape(fx) != tape.shape(fy) {
        return Err(Error::Input(format!(
            "temporal features differ in shape: {:?} vs {:?}",
            tape.shape(fx),
            tape.shape(fy)
        )));
    }
    let d = tape.sub(fx, fy)?;
    tape.abs(d)
}

/// [`ti_mhsa`] with the query source, key source and absolute difference
/// supplied separately.
fn ti_mhsa_parts<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    query_src: Var,
    key_src: Var,
    diff: Var,
    w: &TiMhsaWeights,
    layout: AxialLayout,
) -> Result<Attended> {
    check_map(tape, query_src, w.wq.cin)?;
    let q = w.wq.forward(tape, store, query_src)?;
    let k = w.wk.forward(tape, store, key_src)?;
    let v = w.wv.forward(tape, store, diff)?;
    axial_attention(tape, store, q, k, v, &w.fuse, layout)
}

/// Spatial block: `z' = SI-MHSA(LN(z)) + z`, `out = FFN(LN(z')) + z'`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlobalMBlock {
    pub mhsa: SiMhsaWeights,
    pub ffn: FfnWeights,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub layout: AxialLayout,
}

impl GlobalMBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut HeInit,
        name: &str,
        c: usize,
        ffn_ratio: usize,
        activation: Activation,
        layout: AxialLayout,
    ) -> Self {
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), c);
        let mhsa = SiMhsaWeights::new(store, init, &format!("{name}.attn"), c);
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), c);
        let ffn = FfnWeights::new(store, init, &format!("{name}.ffn"), c, ffn_ratio, activation);
        Self {
            mhsa,
            ffn,
            norm1,
            norm2,
            layout,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, store, z)?.output)
    }

    /// Forward pass that also returns the block's attention matrices.
    pub fn forward_traced<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z: Var,
    ) -> Result<Attended> {
        let n = self.norm1.forward(tape, store, z)?;
        let att = si_mhsa(tape, store, n, &self.mhsa, self.layout)?;
        let mid = tape.add(att.output, z)?;
        let n2 = self.norm2.forward(tape, store, mid)?;
        let f = self.ffn.forward(tape, store, n2)?;
        Ok(Attended {
            output: tape.add(f, mid)?,
            attention: att.attention,
        })
    }
}

/// Cross-temporal block:
/// `z' = TI-MHSA(LN(fx), fy) + |fx - fy|`, `out = FFN(LN(z')) + z'`.
///
/// The layer norm feeds the query path only; keys see `fy` as given unless
/// `symmetric_ln` is set, and both the attention values and the residual use
/// the raw difference `|fx - fy|`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlobalDBlock {
    pub mhsa: TiMhsaWeights,
    pub ffn: FfnWeights,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub layout: AxialLayout,
    pub symmetric_ln: bool,
}

impl GlobalDBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut HeInit,
        name: &str,
        c: usize,
        ffn_ratio: usize,
        activation: Activation,
        layout: AxialLayout,
        symmetric_ln: bool,
    ) -> Self {
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), c);
        let mhsa = TiMhsaWeights::new(store, init, &format!("{name}.attn"), c);
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), c);
        let ffn = FfnWeights::new(store, init, &format!("{name}.ffn"), c, ffn_ratio, activation);
        Self {
            mhsa,
            ffn,
            norm1,
            norm2,
            layout,
            symmetric_ln,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        fx: Var,
        fy: Var,
    ) -> Result<Var> {
        Ok(self.forward_traced(tape, store, fx, fy)?.output)
    }

    pub fn forward_traced<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        fx: Var,
        fy: Var,
    ) -> Result<Attended> {
        let diff = abs_diff(tape, fx, fy)?;
        let qx = self.norm1.forward(tape, store, fx)?;
        let ky = if self.symmetric_ln {
            self.norm1.forward(tape, store, fy)?
        } else {
            fy
        };
        let att = ti_mhsa_parts(tape, store, qx, ky, diff, &self.mhsa, self.layout)?;
        let mid = tape.add(att.output, diff)?;
        let n2 = self.norm2.forward(tape, store, mid)?;
        let f = self.ffn.forward(tape, store, n2)?;
        Ok(Attended {
            output: tape.add(f, mid)?,
            attention: att.attention,
        })
    }
}
