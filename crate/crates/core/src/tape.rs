//! Reverse-mode differentiation over a recorded operator tape.
//!
//! Every operator evaluates eagerly, stores its output on the tape, and
//! remembers what it needs for its backward rule. Node ids increase in
//! creation order, so walking them in reverse is a valid reverse topological
//! order; gradients therefore accumulate in a fixed order and are
//! bit-reproducible.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Gelu,
    Relu,
    Abs,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Unary(Unary, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat {
        inputs: Vec<Var>,
        widths: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Sum(Var),
    BinaryCe {
        probs: Var,
        pixels: Vec<usize>,
        labels: Vec<u8>,
        eps: T,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Operator tape for one forward/backward pass. Single writer: build it,
/// call [`Tape::backward`], drop it.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, op: Op<T>, value: Tensor<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input. Gradients reach it but are not stored anywhere.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("constant", Op::Leaf, t)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    /// Nodes are keyed by id, so one tape must only ever see one store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: store.value(id).clone(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Batched matrix product `[.., m, k] × [.., k, n]`. The right operand may
    /// instead be a plain `[k, n]` matrix shared by every batch slice.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let b_batched = !lead_b.is_empty();
        if k != k2 || (b_batched && lead_a != lead_b) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = lead_a.iter().product();
        let out = kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            batch,
            b_batched,
            m,
            k,
            n,
        );
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        self.push(
            "matmul",
            Op::MatMul {
                a,
                b,
                batch,
                b_batched,
                m,
                k,
                n,
            },
            value,
        )
    }

    /// Same-padded stride-1 convolution of an `H×W×Cin` map with a
    /// `k×k×Cin×Cout` kernel and a `Cout` bias.
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 3 || sw.len() != 4 {
            return Err(Error::shape("conv2d_same", &sx, &sw));
        }
        let k = sw[0];
        if k != sw[1] || k % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d_same needs an odd square kernel, got {}x{}",
                sw[0], sw[1]
            )));
        }
        if sw[2] != sx[2] {
            return Err(Error::Config(format!(
                "conv2d_same channel mismatch: input has {} channels, kernel expects {}",
                sx[2], sw[2]
            )));
        }
        if sb != [sw[3]] {
            return Err(Error::Config(format!(
                "conv2d_same bias shape {:?} does not match {} output channels",
                sb, sw[3]
            )));
        }
        let geom = ConvGeom {
            h: sx[0],
            w: sx[1],
            cin: sx[2],
            cout: sw[3],
            k,
        };
        let out = kernels::conv2d_same(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            geom,
        );
        let value = Tensor::new(&[geom.h, geom.w, geom.cout], out)?;
        self.push("conv2d_same", Op::Conv { x, w, b, geom }, value)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        if n == 0 {
            return Err(Error::Input("softmax over an empty axis".into()));
        }
        let value = Tensor::new(t.shape(), kernels::softmax_rows(t.data(), n))?;
        self.push("softmax", Op::Softmax(x), value)
    }

    /// Layer norm over the last axis with epsilon [`kernels::LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (y, xhat, rstd) = kernels::layer_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            c,
        );
        let value = Tensor::new(self.shape(x), y)?;
        self.push(
            "layer_norm",
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            value,
        )
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (name, value) = match kind {
            Unary::Gelu => ("gelu", t.map(kernels::gelu)),
            Unary::Relu => ("relu", t.map(|v| v.max(T::zero()))),
            Unary::Abs => ("abs", t.map(T::abs)),
        };
        self.push(name, Op::Unary(kind, x), value)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    /// Elementwise absolute value; the subgradient at exactly zero is zero.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.value(x).map(|v| v * s);
        self.push("scale", Op::Scale(x, s), v)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &wd) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, data)?;
        self.push(
            "concat",
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
            },
            value,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", Op::Reshape(x), value)
    }

    /// Axis permutation: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Usage(format!(
                "invalid permutation {perm:?} for shape {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = kernels::permute(self.value(x).data(), &shape, perm);
        let value = Tensor::new(&out_shape, data)?;
        self.push(
            "permute",
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            value,
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::Usage("transpose needs at least two axes".into()));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", Op::Sum(x), v)
    }

    /// Mean binary cross-entropy of the changed-class probability (channel 1
    /// of a `[.., 2]` probability map) over the listed pixels. Probabilities
    /// are clamped to `[eps, 1 - eps]` before the log; the clamp has zero
    /// derivative outside that interval.
    pub fn binary_cross_entropy(
        &mut self,
        probs: Var,
        pixels: &[usize],
        labels: &[u8],
        eps: T,
    ) -> Result<Var> {
        let t = self.value(probs);
        if t.last_dim() != 2 {
            return Err(Error::shape("binary_cross_entropy", t.shape(), &[2]));
        }
        if pixels.is_empty() {
            return Err(Error::Usage("loss over an empty sample mask".into()));
        }
        if pixels.len() != labels.len() {
            return Err(Error::Usage("pixel and label counts differ".into()));
        }
        let n_pix = t.len() / 2;
        let mut total = T::zero();
        for (&p, &y) in pixels.iter().zip(labels) {
            if p >= n_pix {
                return Err(Error::Usage(format!("sample pixel {p} out of range")));
            }
            let q = clamp(t.data()[2 * p + 1], eps);
            let term = if y == 1 { q.ln() } else { (T::one() - q).ln() };
            total = total - term;
        }
        let v = Tensor::scalar(total / T::from_usize(pixels.len()).unwrap());
        self.push(
            "binary_cross_entropy",
            Op::BinaryCe {
                probs,
                pixels: pixels.to_vec(),
                labels: labels.to_vec(),
                eps,
            },
            v,
        )
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn grads(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }

    /// Accumulates d`loss`/dθ into the gradient of every parameter reached
    /// from `loss`. Gradients are added, not overwritten.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.grads(loss)?;
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(pid), Some(g)) = (&node.op, &grads.grads[id]) {
                store.get_mut(*pid).grad.add_assign(g);
            }
        }
        Ok(())
    }

    fn backward_node(
        &self,
        id: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul {
                a,
                b,
                batch,
                b_batched,
                m,
                k,
                n,
            } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let da = kernels::matmul_grad_lhs(gd, bv, batch, b_batched, m, k, n);
                let db = kernels::matmul_grad_rhs(gd, av, batch, b_batched, m, k, n);
                acc(grads, a, Tensor::new(self.shape(a), da)?);
                acc(grads, b, Tensor::new(self.shape(b), db)?);
            }
            &Op::Conv { x, w, b, geom } => {
                let xv = self.value(x).data();
                let dx = kernels::conv2d_grad_input(gd, self.value(w).data(), geom);
                let (dw, db) = kernels::conv2d_grad_params(gd, xv, geom);
                acc(grads, x, Tensor::new(self.shape(x), dx)?);
                acc(grads, w, Tensor::new(self.shape(w), dw)?);
                acc(grads, b, Tensor::new(self.shape(b), db)?);
            }
            &Op::Softmax(x) => {
                let n = node.value.last_dim();
                let dx = kernels::softmax_grad(node.value.data(), gd, n);
                acc(grads, x, Tensor::new(self.shape(x), dx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.value.last_dim();
                let (dx, dg, db) =
                    kernels::layer_norm_grad(gd, xhat, rstd, self.value(*gamma).data(), c);
                acc(grads, *x, Tensor::new(self.shape(*x), dx)?);
                acc(grads, *gamma, Tensor::new(&[c], dg)?);
                acc(grads, *beta, Tensor::new(&[c], db)?);
            }
            &Op::Unary(kind, x) => {
                let xv = self.value(x).data();
                let dx: Vec<T> = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| {
                        let d = match kind {
                            Unary::Gelu => kernels::gelu_grad(v),
                            Unary::Relu => {
                                if v > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Abs => {
                                if v > T::zero() {
                                    T::one()
                                } else if v < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                        };
                        d * gv
                    })
                    .collect();
                acc(grads, x, Tensor::new(self.shape(x), dx)?);
            }
            &Op::Add(a, b) => {
                acc(grads, a, g.clone());
                acc(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                acc(grads, a, g.clone());
                acc(grads, b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let da = gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                let db = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                acc(grads, a, Tensor::new(av.shape(), da)?);
                acc(grads, b, Tensor::new(bv.shape(), db)?);
            }
            &Op::Scale(x, s) => {
                acc(grads, x, g.map(|v| v * s));
            }
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = gd.len() / total;
                let mut offset = 0;
                for (&v, &wd) in inputs.iter().zip(widths) {
                    let mut part = Vec::with_capacity(rows * wd);
                    for r in 0..rows {
                        part.extend_from_slice(&gd[r * total + offset..r * total + offset + wd]);
                    }
                    acc(grads, v, Tensor::new(self.shape(v), part)?);
                    offset += wd;
                }
            }
            &Op::Reshape(x) => {
                acc(grads, x, g.clone().reshape(self.shape(x))?);
            }
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_perm(perm);
                let dx = kernels::permute(gd, node.value.shape(), &inv);
                acc(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            &Op::Sum(x) => {
                acc(grads, x, Tensor::full(self.shape(x), gd[0]));
            }
            Op::BinaryCe {
                probs,
                pixels,
                labels,
                eps,
            } => {
                let pv = self.value(*probs);
                let n = T::from_usize(pixels.len()).unwrap();
                let mut dp = Tensor::zeros(pv.shape());
                for (&p, &y) in pixels.iter().zip(labels) {
                    let raw = pv.data()[2 * p + 1];
                    if raw < *eps || raw > T::one() - *eps {
                        continue;
                    }
                    let d = if y == 1 {
                        -T::one() / (n * raw)
                    } else {
                        T::one() / (n * (T::one() - raw))
                    };
                    let slot = &mut dp.data_mut()[2 * p + 1];
                    *slot = *slot + d * gd[0];
                }
                acc(grads, *probs, dp);
            }
        }
        Ok(())
    }
}

#[inline]
fn clamp<T: Scalar>(p: T, eps: T) -> T {
    p.max(eps).min(T::one() - eps)
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let b = tape.constant(t(&[2, 2], &[3., 4., 5., 6.])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3., 4., 5., 6.]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1., 2.])).unwrap();
        let b = tape.constant(t(&[2, 1], &[3., 4.])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_batches_consistently() {
        let a: Vec<f64> = (0..9).map(|i| i as f64 - 4.0).collect();
        let b: Vec<f64> = (0..9).map(|i| (i * i) as f64 * 0.1).collect();
        let mut tape = Tape::new();
        let a1 = tape.constant(t(&[3, 3], &a)).unwrap();
        let b1 = tape.constant(t(&[3, 3], &b)).unwrap();
        let single = tape.matmul(a1, b1).unwrap();
        let a2 = tape.constant(t(&[2, 3, 3], &[a.clone(), a].concat())).unwrap();
        let b2 = tape.constant(t(&[2, 3, 3], &[b.clone(), b].concat())).unwrap();
        let both = tape.matmul(a2, b2).unwrap();
        let s = tape.value(single).data();
        assert_eq!(&tape.value(both).data()[..9], s);
        assert_eq!(&tape.value(both).data()[9..], s);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut tape = Tape::new();
        let x = Tensor::from_fn(&[3, 4, 2], |i| i as f64 * 0.3 - 1.0);
        let mut w = Tensor::zeros(&[1, 1, 2, 2]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let xv = tape.constant(x.clone()).unwrap();
        let wv = tape.constant(w).unwrap();
        let bv = tape.constant(Tensor::zeros(&[2])).unwrap();
        let y = tape.conv2d_same(xv, wv, bv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv_all_ones_counts_overlap() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(&[4, 4, 1])).unwrap();
        let w = tape.constant(Tensor::ones(&[3, 3, 1, 1])).unwrap();
        let b = tape.constant(Tensor::zeros(&[1])).unwrap();
        let y = tape.conv2d_same(x, w, b).unwrap();
        let out = tape.value(y);
        assert_eq!(out.at(&[1, 1, 0]), 9.0);
        assert_eq!(out.at(&[2, 2, 0]), 9.0);
        assert_eq!(out.at(&[0, 0, 0]), 4.0);
        assert_eq!(out.at(&[3, 3, 0]), 4.0);
        assert_eq!(out.at(&[0, 1, 0]), 6.0);
    }

    #[test]
    fn conv_bias_only() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_fn(&[3, 3, 2], |i| i as f64))
            .unwrap();
        let w = tape.constant(Tensor::zeros(&[5, 5, 2, 3])).unwrap();
        let b = tape.constant(Tensor::full(&[3], 2.5)).unwrap();
        let y = tape.conv2d_same(x, w, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
        assert_eq!(tape.shape(y), &[3, 3, 3]);
    }

    #[test]
    fn conv_rejects_even_kernel_and_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 3, 2])).unwrap();
        let even = tape.constant(Tensor::zeros(&[2, 2, 2, 1])).unwrap();
        let wrong = tape.constant(Tensor::zeros(&[3, 3, 4, 1])).unwrap();
        let b = tape.constant(Tensor::zeros(&[1])).unwrap();
        assert!(matches!(tape.conv2d_same(x, even, b), Err(Error::Config(_))));
        assert!(matches!(tape.conv2d_same(x, wrong, b), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape
            .constant(t(&[3, 2], &[1000.0, 0.0, 2f64.ln(), 0.0, 0.0, 0.0]))
            .unwrap();
        let y = tape.softmax_lastdim(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);
        assert!((v[2] - 2.0 / 3.0).abs() < 1e-12);
        assert!((v[3] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(&v[4..], &[0.5, 0.5]);

        let u = tape.constant(Tensor::zeros(&[4])).unwrap();
        let su = tape.softmax_lastdim(u).unwrap();
        assert_eq!(tape.value(su).data(), &[0.25; 4]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::ones(&[2])).unwrap();
        let zero = tape.constant(Tensor::zeros(&[2])).unwrap();
        let x = tape.constant(t(&[1, 2, 2], &[3.0, 3.0, 1.0, -1.0])).unwrap();
        let y = tape.layer_norm(x, one, zero).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((v[2] - expect).abs() < 1e-12 && (v[3] + expect).abs() < 1e-12);

        let five = tape.constant(Tensor::full(&[2], 5.0)).unwrap();
        let y = tape.layer_norm(x, zero, five).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn backward_of_linear_sum() {
        let mut store = ParamStore::new();
        let wid = store.add("w", t(&[3], &[0.5, -1.0, 2.0]));
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let w = tape.param(&store, wid);
        let xv = tape.constant(x.clone()).unwrap();
        let p = tape.mul(w, xv).unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(wid), &x);
        // a second backward without zeroing doubles
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(wid).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_of_abs_difference_is_sign_pattern() {
        let mut store = ParamStore::new();
        let uid = store.add("u", t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let v = t(&[4], &[0.0, 1.0, 5.0, -0.5]);
        let mut tape = Tape::new();
        let u = tape.param(&store, uid);
        let vv = tape.constant(v).unwrap();
        let d = tape.sub(u, vv).unwrap();
        let a = tape.abs(d).unwrap();
        let loss = tape.sum(a).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(uid).data(), &[1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut store = ParamStore::new();
        let uid = store.add("u", t(&[2], &[0.0, 1.0]));
        let mut tape = Tape::new();
        let u = tape.param(&store, uid);
        let a = tape.abs(u).unwrap();
        let loss = tape.sum(a).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(uid).data(), &[0.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(tape.grads(x), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2], 1e308)).unwrap();
        assert!(matches!(
            tape.scale(x, 10.0),
            Err(Error::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn empty_mask_loss_is_usage_error() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full(&[2, 2, 2], 0.5)).unwrap();
        assert!(matches!(
            tape.binary_cross_entropy(p, &[], &[], 1e-7),
            Err(Error::Usage(_))
        ));
    }
}
