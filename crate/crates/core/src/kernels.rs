//! Slice-level numeric kernels behind the tape operators.
//!
//! All kernels parallelize over disjoint output regions only; every reduction
//! runs in a fixed sequential order, so outputs do not depend on the thread
//! count.

use crate::parallel::{for_each_chunk, map_range};
use crate::tensor::Scalar;

const LANES: usize = 8;

/// Dot product with a fixed 8-lane accumulation order.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    let s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    s + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Batched `c[b] = a[b] @ bm[b]` with `a: [batch, m, k]`, `bm: [batch|1, k, n]`.
/// A right operand with a single batch slice is shared by every left slice.
pub fn matmul<T: Scalar>(
    a: &[T],
    bm: &[T],
    batch: usize,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    for_each_chunk(&mut c, n, |row, out| {
        let bi = row / m;
        let i = row % m;
        let arow = &a[(bi * m + i) * k..(bi * m + i + 1) * k];
        let boff = if b_batched { bi * k * n } else { 0 };
        for (p, &av) in arow.iter().enumerate() {
            axpy(av, &bm[boff + p * n..boff + (p + 1) * n], out);
        }
    });
    c
}

/// Gradient of [`matmul`] with respect to the left operand: `dC @ Bᵀ`.
pub fn matmul_grad_lhs<T: Scalar>(
    dc: &[T],
    bm: &[T],
    batch: usize,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut da = vec![T::zero(); batch * m * k];
    for_each_chunk(&mut da, k, |row, out| {
        let bi = row / m;
        let i = row % m;
        let grow = &dc[(bi * m + i) * n..(bi * m + i + 1) * n];
        let boff = if b_batched { bi * k * n } else { 0 };
        for (p, o) in out.iter_mut().enumerate() {
            *o = dot(grow, &bm[boff + p * n..boff + (p + 1) * n]);
        }
    });
    da
}

/// Gradient of [`matmul`] with respect to the right operand: `Aᵀ @ dC`,
/// summed over the batch when the right operand is shared.
pub fn matmul_grad_rhs<T: Scalar>(
    dc: &[T],
    a: &[T],
    batch: usize,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let slices = if b_batched { batch } else { 1 };
    let mut db = vec![T::zero(); slices * k * n];
    for_each_chunk(&mut db, n, |row, out| {
        let si = row / k;
        let p = row % k;
        let batches = if b_batched { si..si + 1 } else { 0..batch };
        for bi in batches {
            for i in 0..m {
                let av = a[(bi * m + i) * k + p];
                axpy(av, &dc[(bi * m + i) * n..(bi * m + i + 1) * n], out);
            }
        }
    });
    db
}

/// Geometry of a same-padded stride-1 convolution over an `H×W×Cin` map.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvGeom {
    #[inline]
    fn pad(&self) -> isize {
        (self.k as isize - 1) / 2
    }

    /// Input coordinate read by output coordinate `o` at kernel tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let s = o as isize + t as isize - self.pad();
        (s >= 0 && (s as usize) < extent).then_some(s as usize)
    }
}

/// Forward conv: `x: [H,W,Cin]`, `w: [k,k,Cin,Cout]`, `b: [Cout]`.
pub fn conv2d_same<T: Scalar>(x: &[T], w: &[T], b: &[T], g: ConvGeom) -> Vec<T> {
    let ConvGeom {
        h: _,
        w: width,
        cin,
        cout,
        k,
        ..
    } = g;
    let mut out = vec![T::zero(); g.h * width * cout];
    for_each_chunk(&mut out, width * cout, |oy, orow| {
        for ox in 0..width {
            let acc = &mut orow[ox * cout..(ox + 1) * cout];
            acc.copy_from_slice(b);
            for dy in 0..k {
                let Some(iy) = g.src(oy, dy, g.h) else { continue };
                for dx in 0..k {
                    let Some(ix) = g.src(ox, dx, width) else { continue };
                    let xpix = &x[(iy * width + ix) * cin..(iy * width + ix + 1) * cin];
                    let wtap = &w[(dy * k + dx) * cin * cout..(dy * k + dx + 1) * cin * cout];
                    for (ci, &xv) in xpix.iter().enumerate() {
                        axpy(xv, &wtap[ci * cout..(ci + 1) * cout], acc);
                    }
                }
            }
        }
    });
    out
}

/// Input gradient of [`conv2d_same`].
pub fn conv2d_grad_input<T: Scalar>(gout: &[T], w: &[T], g: ConvGeom) -> Vec<T> {
    let ConvGeom {
        w: width,
        cin,
        cout,
        k,
        ..
    } = g;
    let pad = g.pad();
    let mut dx = vec![T::zero(); g.h * width * cin];
    for_each_chunk(&mut dx, width * cin, |iy, drow| {
        for ix in 0..width {
            let acc = &mut drow[ix * cin..(ix + 1) * cin];
            for dy in 0..k {
                let oy = iy as isize - dy as isize + pad;
                if oy < 0 || oy as usize >= g.h {
                    continue;
                }
                for dxk in 0..k {
                    let ox = ix as isize - dxk as isize + pad;
                    if ox < 0 || ox as usize >= width {
                        continue;
                    }
                    let o = oy as usize * width + ox as usize;
                    let grow = &gout[o * cout..(o + 1) * cout];
                    let wtap = &w[(dy * k + dxk) * cin * cout..(dy * k + dxk + 1) * cin * cout];
                    for (ci, a) in acc.iter_mut().enumerate() {
                        *a = *a + dot(grow, &wtap[ci * cout..(ci + 1) * cout]);
                    }
                }
            }
        }
    });
    dx
}

/// Weight and bias gradients of [`conv2d_same`].
pub fn conv2d_grad_params<T: Scalar>(gout: &[T], x: &[T], g: ConvGeom) -> (Vec<T>, Vec<T>) {
    let ConvGeom {
        w: width,
        cin,
        cout,
        k,
        ..
    } = g;
    let mut dw = vec![T::zero(); k * k * cin * cout];
    for_each_chunk(&mut dw, cin * cout, |tap, dtap| {
        let (dy, dxk) = (tap / k, tap % k);
        for oy in 0..g.h {
            let Some(iy) = g.src(oy, dy, g.h) else { continue };
            for ox in 0..width {
                let Some(ix) = g.src(ox, dxk, width) else { continue };
                let o = oy * width + ox;
                let grow = &gout[o * cout..(o + 1) * cout];
                let xpix = &x[(iy * width + ix) * cin..(iy * width + ix + 1) * cin];
                for (ci, &xv) in xpix.iter().enumerate() {
                    axpy(xv, grow, &mut dtap[ci * cout..(ci + 1) * cout]);
                }
            }
        }
    });
    let mut db = vec![T::zero(); cout];
    for grow in gout.chunks_exact(cout) {
        axpy(T::one(), grow, &mut db);
    }
    (dw, db)
}

/// Numerically stable softmax over rows of length `n`.
pub fn softmax_rows<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for_each_chunk(&mut out, n, |_, row| softmax_in_place(row));
    out
}

#[inline]
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Softmax backward given the forward output `y`.
pub fn softmax_grad<T: Scalar>(y: &[T], gy: &[T], n: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for_each_chunk(&mut dx, n, |r, out| {
        let yr = &y[r * n..(r + 1) * n];
        let gr = &gy[r * n..(r + 1) * n];
        let s = dot(yr, gr);
        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - s);
        }
    });
    dx
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer norm over rows of length `c`. Returns the output, the normalized
/// pre-affine values and the per-row reciprocal standard deviation.
pub fn layer_norm<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], c: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let eps = T::lit(LAYER_NORM_EPS);
    let cf = T::from_usize(c).unwrap();
    let rstd: Vec<T> = map_range(rows, |r| {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
        T::one() / (var + eps).sqrt()
    });
    let mut xhat = vec![T::zero(); x.len()];
    for_each_chunk(&mut xhat, c, |r, out| {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() / cf;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * rstd[r];
        }
    });
    let mut y = vec![T::zero(); x.len()];
    for_each_chunk(&mut y, c, |r, out| {
        let xr = &xhat[r * c..(r + 1) * c];
        for (j, o) in out.iter_mut().enumerate() {
            *o = xr[j] * gamma[j] + beta[j];
        }
    });
    (y, xhat, rstd)
}

/// Layer norm backward. Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_grad<T: Scalar>(
    gy: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    c: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cf = T::from_usize(c).unwrap();
    let mut dx = vec![T::zero(); gy.len()];
    for_each_chunk(&mut dx, c, |r, out| {
        let g = &gy[r * c..(r + 1) * c];
        let xh = &xhat[r * c..(r + 1) * c];
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for j in 0..c {
            let d = g[j] * gamma[j];
            mean_d = mean_d + d;
            mean_dx = mean_dx + d * xh[j];
        }
        mean_d = mean_d / cf;
        mean_dx = mean_dx / cf;
        for j in 0..c {
            let d = g[j] * gamma[j];
            out[j] = rstd[r] * (d - mean_d - xh[j] * mean_dx);
        }
    });
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (g, xh) in gy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for j in 0..c {
            dgamma[j] = dgamma[j] + g[j] * xh[j];
            dbeta[j] = dbeta[j] + g[j];
        }
    }
    (dx, dgamma, dbeta)
}

/// Tanh-form GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

/// Axis permutation of a row-major array: output axis `d` is input axis
/// `perm[d]`.
pub fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..x.len() {
        out.push(x[src]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (d, &p) in perm.iter().enumerate() {
        inv[p] = d;
    }
    inv
}

/// Scaled dot-product attention over `[heads, len, dim]` arrays, one query row
/// at a time. The score row is never stored beyond a single query.
pub fn attention_rows<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    heads: usize,
    len: usize,
    dim: usize,
) -> Vec<T> {
    let scale = T::one() / T::from_usize(dim).unwrap().sqrt();
    let mut out = vec![T::zero(); heads * len * dim];
    for_each_chunk(&mut out, len * dim, |hd, oh| {
        let base = hd * len * dim;
        let mut scores = vec![T::zero(); len];
        for i in 0..len {
            let qi = &q[base + i * dim..base + (i + 1) * dim];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(qi, &k[base + j * dim..base + (j + 1) * dim]) * scale;
            }
            softmax_in_place(&mut scores);
            let orow = &mut oh[i * dim..(i + 1) * dim];
            for (j, &p) in scores.iter().enumerate() {
                axpy(p, &v[base + j * dim..base + (j + 1) * dim], orow);
            }
        }
    });
    out
}
