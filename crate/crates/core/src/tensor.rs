//! Dense row-major `f64` tensors and the raw (non-differentiable) kernels
//! the autodiff layer is built on.
//!
//! Every kernel uses a fixed loop order, so results are bit-reproducible
//! for identical inputs regardless of batch size: each output element of a
//! reduction is accumulated in ascending index order starting from `0.0`.

use std::fmt;
use std::sync::Arc;

use crate::error::{dim_err, Error, Result};

/// Immutable n-dimensional array. Cloning is cheap (shared storage).
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data[..8]", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return dim_err(format!("shape {shape:?} has a zero extent"));
        }
        if numel(&shape) != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            ));
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data: Arc::new(data) }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::from_parts(shape, vec![v; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self::from_parts(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        let st = strides(&self.shape);
        let off: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Self { shape, data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return dim_err(format!("elementwise op on {:?} and {:?}", self.shape, other.shape));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.numel() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

// ── broadcasting ────────────────────────────────────────────────────

/// Numpy-style broadcast of two shapes (right-aligned, extents equal or 1).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return dim_err(format!("shapes {a:?} and {b:?} do not broadcast")),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (zero along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < lead || shape[i - lead] == 1 { 0 } else { st[i - lead] })
        .collect()
}

/// Visits every output offset together with the matching input offsets.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    let mut idx = vec![0usize; out.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![0.0; numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Ok(Tensor::from_parts(out, data))
}

/// Sums `grad` down to `shape`, undoing a broadcast.
pub(crate) fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let out = grad.shape.clone();
    let st = broadcast_strides(shape, &out);
    let zero = vec![0; out.len()];
    let mut data = vec![0.0; numel(shape)];
    let gd = grad.data();
    for_each_broadcast(&out, &st, &zero, |o, i, _| data[i] += gd[o]);
    Tensor::from_parts(shape.to_vec(), data)
}

// ── layout kernels ──────────────────────────────────────────────────

pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
        return dim_err(format!("invalid permutation {axes:?} for shape {:?}", x.shape));
    }
    let out: Vec<usize> = axes.iter().map(|&a| x.shape[a]).collect();
    let st = strides(&x.shape);
    let src: Vec<usize> = axes.iter().map(|&a| st[a]).collect();
    let zero = vec![0; r];
    let mut data = vec![0.0; x.numel()];
    let xd = x.data();
    for_each_broadcast(&out, &src, &zero, |o, i, _| data[o] = xd[i]);
    Ok(Tensor::from_parts(out, data))
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return dim_err(format!("transpose needs rank >= 2, got {:?}", x.shape));
    }
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 1, r - 2);
    permute(x, &axes)
}

/// Selects rows of `x` viewed as `[N, rest..]`.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let n = x.shape[0];
    let row = x.numel() / n;
    if idx.is_empty() {
        return dim_err("gather with no indices");
    }
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        if i >= n {
            return Err(Error::Index(format!("row {i} out of range for {n} rows")));
        }
        data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
    }
    let mut shape = x.shape.clone();
    shape[0] = idx.len();
    Ok(Tensor::from_parts(shape, data))
}

/// Adjoint of [`gather_rows`]: scatter-adds rows of `g` into `n` rows.
pub(crate) fn scatter_add_rows(g: &Tensor, idx: &[usize], n: usize) -> Tensor {
    let row = g.numel() / g.shape[0];
    let mut data = vec![0.0; n * row];
    for (r, &i) in idx.iter().enumerate() {
        let src = &g.data()[r * row..(r + 1) * row];
        for (d, s) in data[i * row..(i + 1) * row].iter_mut().zip(src) {
            *d += s;
        }
    }
    let mut shape = g.shape.clone();
    shape[0] = n;
    Tensor::from_parts(shape, data)
}

pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
    let r = first.rank();
    if axis >= r {
        return dim_err(format!("concat axis {axis} out of range for rank {r}"));
    }
    for x in xs {
        let ok = x.rank() == r && (0..r).all(|a| a == axis || x.shape[a] == first.shape[a]);
        if !ok {
            return dim_err(format!("concat of {:?} and {:?} along {axis}", first.shape, x.shape));
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let total: usize = xs.iter().map(|x| x.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let chunk = x.shape[axis] * inner;
            data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, data))
}

/// Slice `[start, start+len)` along `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || start + len > x.shape[axis] || len == 0 {
        return dim_err(format!("narrow({axis}, {start}, {len}) on {:?}", x.shape));
    }
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let ext = x.shape[axis];
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * ext * inner + start * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data))
}

/// Zero padding of the two trailing (spatial) axes of `[.., H, W]`.
pub fn pad_spatial(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return dim_err(format!("pad_spatial needs rank >= 2, got {:?}", x.shape));
    }
    let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
    let (oh, ow) = (h + top + bottom, w + left + right);
    let outer = x.numel() / (h * w);
    let mut data = vec![0.0; outer * oh * ow];
    for o in 0..outer {
        for i in 0..h {
            let src = &x.data()[o * h * w + i * w..o * h * w + (i + 1) * w];
            let dst = o * oh * ow + (i + top) * ow + left;
            data[dst..dst + w].copy_from_slice(src);
        }
    }
    let mut shape = x.shape.clone();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok(Tensor::from_parts(shape, data))
}

pub(crate) fn crop_spatial(g: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Tensor {
    let r = g.rank();
    let (oh, ow) = (g.shape[r - 2], g.shape[r - 1]);
    let outer = g.numel() / (oh * ow);
    let mut data = Vec::with_capacity(outer * h * w);
    for o in 0..outer {
        for i in 0..h {
            let s = o * oh * ow + (i + top) * ow + left;
            data.extend_from_slice(&g.data()[s..s + w]);
        }
    }
    let mut shape = g.shape.clone();
    shape[r - 2] = h;
    shape[r - 1] = w;
    Tensor::from_parts(shape, data)
}

// ── matmul ──────────────────────────────────────────────────────────

fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]` with
/// broadcasting over the leading (batch) extents.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() < 2 {
        return dim_err(format!("matmul needs rank >= 2: {:?} x {:?}", a.shape, b.shape));
    }
    let (m, k) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let (k2, n) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    if k != k2 {
        return dim_err(format!("matmul inner extents differ: {:?} x {:?}", a.shape, b.shape));
    }
    let ba = &a.shape[..a.rank() - 2];
    let bb = &b.shape[..b.rank() - 2];
    let batch = broadcast_shape(ba, bb)
        .map_err(|_| Error::Dimension(format!("matmul batch extents: {:?} x {:?}", a.shape, b.shape)))?;
    let nb = numel(&batch);
    let mut out = vec![0.0; nb * m * n];
    let (ad, bd) = (a.data(), b.data());
    if ba == bb || bb.is_empty() && ba.len() == batch.len() {
        let bstep = if bb.is_empty() { 0 } else { k * n };
        for t in 0..nb {
            gemm_acc(
                &ad[t * m * k..(t + 1) * m * k],
                &bd[t * bstep..t * bstep + k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
    } else {
        let sa = broadcast_strides(ba, &batch);
        let sb = broadcast_strides(bb, &batch);
        let mut t = 0;
        for_each_broadcast(&batch, &sa, &sb, |o, ia, ib| {
            debug_assert_eq!(o, t);
            gemm_acc(
                &ad[ia * m * k..(ia + 1) * m * k],
                &bd[ib * k * n..(ib + 1) * k * n],
                &mut out[o * m * n..(o + 1) * m * n],
                m,
                k,
                n,
            );
            t += 1;
        });
    }
    let mut shape = batch;
    shape.push(m);
    shape.push(n);
    Ok(Tensor::from_parts(shape, out))
}

// ── convolution ─────────────────────────────────────────────────────

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_geom(x: &[usize], k: usize, stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.len() != 4 {
        return dim_err(format!("convolution input must be [B,C,H,W], got {x:?}"));
    }
    if stride == 0 {
        return dim_err("convolution stride must be >= 1");
    }
    let (b, c, h, w) = (x[0], x[1], x[2], x[3]);
    if k == 0 || k > h + 2 * pad || k > w + 2 * pad {
        return dim_err(format!("kernel {k} larger than padded input {h}x{w} (pad {pad})"));
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    Ok(ConvGeom { b, c, h, w, k, stride, pad, oh, ow })
}

/// Calls `f(input_offset_in_plane, kernel_offset, output_offset_in_plane)`
/// for every in-bounds tap of the sliding window.
#[inline]
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    for ki in 0..g.k {
        for kj in 0..g.k {
            let kk = ki * g.k + kj;
            for oi in 0..g.oh {
                let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                if ii < 0 || ii >= g.h as isize {
                    continue;
                }
                let ii = ii as usize;
                for oj in 0..g.ow {
                    let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                    if jj < 0 || jj >= g.w as isize {
                        continue;
                    }
                    f(ii * g.w + jj as usize, kk, oi * g.ow + oj);
                }
            }
        }
    }
}

/// Patch matrix `[C*k*k, oh*ow]` of image `bi`.
fn im2col(xd: &[f64], g: &ConvGeom, bi: usize) -> Vec<f64> {
    let (plane_in, plane_out, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    let mut cols = vec![0.0; g.c * kk * plane_out];
    for ic in 0..g.c {
        let src = &xd[(bi * g.c + ic) * plane_in..(bi * g.c + ic + 1) * plane_in];
        let dst = &mut cols[ic * kk * plane_out..(ic + 1) * kk * plane_out];
        for_each_tap(g, |si, ki, di| dst[ki * plane_out + di] = src[si]);
    }
    cols
}

/// Adds a patch-matrix gradient back onto image `bi`.
fn col2im(cols: &[f64], g: &ConvGeom, bi: usize, gx: &mut [f64]) {
    let (plane_in, plane_out, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    for ic in 0..g.c {
        let dst = &mut gx[(bi * g.c + ic) * plane_in..(bi * g.c + ic + 1) * plane_in];
        let src = &cols[ic * kk * plane_out..(ic + 1) * kk * plane_out];
        for_each_tap(g, |si, ki, di| dst[si] += src[ki * plane_out + di]);
    }
}

pub fn conv2d(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if w.rank() != 4 || w.shape[2] != w.shape[3] {
        return dim_err(format!("conv2d weight must be [O,C,k,k], got {:?}", w.shape));
    }
    let g = conv_geom(&x.shape, w.shape[2], stride, pad)?;
    let o = w.shape[0];
    if w.shape[1] != g.c || bias.shape != [o] {
        return dim_err(format!(
            "conv2d input {:?}, weight {:?}, bias {:?} disagree",
            x.shape, w.shape, bias.shape
        ));
    }
    let plane_out = g.oh * g.ow;
    let ckk = g.c * g.k * g.k;
    let mut out = vec![0.0; g.b * o * plane_out];
    for bi in 0..g.b {
        let cols = im2col(x.data(), &g, bi);
        let dst = &mut out[bi * o * plane_out..(bi + 1) * o * plane_out];
        for (oc, row) in dst.chunks_exact_mut(plane_out).enumerate() {
            row.iter_mut().for_each(|v| *v = bias.data()[oc]);
        }
        gemm_acc(w.data(), &cols, dst, o, ckk, plane_out);
    }
    Ok(Tensor::from_parts(vec![g.b, o, g.oh, g.ow], out))
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let g = conv_geom(&x.shape, w.shape[2], stride, pad).expect("validated in forward");
    let o = w.shape[0];
    let plane_out = g.oh * g.ow;
    let ckk = g.c * g.k * g.k;
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; o];
    let wt = transpose2(w.data(), o, ckk);
    for bi in 0..g.b {
        let dy = &gy.data()[bi * o * plane_out..(bi + 1) * o * plane_out];
        for (oc, row) in dy.chunks_exact(plane_out).enumerate() {
            gb[oc] += row.iter().sum::<f64>();
        }
        let cols = im2col(x.data(), &g, bi);
        let cols_t = transpose2(&cols, ckk, plane_out);
        gemm_acc(dy, &cols_t, &mut gw, o, plane_out, ckk);
        let mut gcols = vec![0.0; ckk * plane_out];
        gemm_acc(&wt, dy, &mut gcols, ckk, o, plane_out);
        col2im(&gcols, &g, bi, &mut gx);
    }
    (
        Tensor::from_parts(x.shape.clone(), gx),
        Tensor::from_parts(w.shape.clone(), gw),
        Tensor::from_parts(vec![o], gb),
    )
}

fn transpose2(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

pub fn depthwise_conv2d(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if w.rank() != 3 || w.shape[1] != w.shape[2] {
        return dim_err(format!("depthwise weight must be [C,k,k], got {:?}", w.shape));
    }
    let g = conv_geom(&x.shape, w.shape[1], stride, pad)?;
    if w.shape[0] != g.c || bias.shape != [g.c] {
        return dim_err(format!(
            "depthwise input {:?}, weight {:?}, bias {:?} disagree",
            x.shape, w.shape, bias.shape
        ));
    }
    let (plane_in, plane_out, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    let mut out = vec![0.0; g.b * g.c * plane_out];
    let (xd, wd) = (x.data(), w.data());
    for bi in 0..g.b {
        for ch in 0..g.c {
            let p = bi * g.c + ch;
            let dst = &mut out[p * plane_out..(p + 1) * plane_out];
            dst.iter_mut().for_each(|v| *v = bias.data()[ch]);
            let src = &xd[p * plane_in..(p + 1) * plane_in];
            let ker = &wd[ch * kk..(ch + 1) * kk];
            for_each_tap(&g, |si, ki, di| dst[di] += ker[ki] * src[si]);
        }
    }
    Ok(Tensor::from_parts(vec![g.b, g.c, g.oh, g.ow], out))
}

pub(crate) fn depthwise_conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let g = conv_geom(&x.shape, w.shape[1], stride, pad).expect("validated in forward");
    let (plane_in, plane_out, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; g.c];
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    for bi in 0..g.b {
        for ch in 0..g.c {
            let p = bi * g.c + ch;
            let dy = &gd[p * plane_out..(p + 1) * plane_out];
            gb[ch] += dy.iter().sum::<f64>();
            let src = &xd[p * plane_in..(p + 1) * plane_in];
            let ker = &wd[ch * kk..(ch + 1) * kk];
            let gxs = &mut gx[p * plane_in..(p + 1) * plane_in];
            let gws = &mut gw[ch * kk..(ch + 1) * kk];
            for_each_tap(&g, |si, ki, di| {
                gxs[si] += ker[ki] * dy[di];
                gws[ki] += src[si] * dy[di];
            });
        }
    }
    (
        Tensor::from_parts(x.shape.clone(), gx),
        Tensor::from_parts(w.shape.clone(), gw),
        Tensor::from_parts(vec![g.c], gb),
    )
}

// ── normalisation and activations ───────────────────────────────────

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row statistics of [`layer_norm`]: normalised values and `1/sqrt(var+eps)`.
pub(crate) struct NormStats {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_stats(x: &Tensor, eps: f64) -> Result<NormStats> {
    let d = *x.shape.last().ok_or_else(|| Error::Dimension("layer_norm of rank-0".into()))?;
    let rows = x.numel() / d;
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + eps).sqrt();
        rstd[r] = s;
        for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
    }
    Ok(NormStats { xhat: Tensor::from_parts(x.shape.clone(), xhat), rstd })
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x.shape.last().unwrap_or(&0);
    if gamma.shape != [d] || beta.shape != [d] {
        return dim_err(format!(
            "layer_norm over {:?} with gamma {:?}, beta {:?}",
            x.shape, gamma.shape, beta.shape
        ));
    }
    let st = layer_norm_stats(x, eps)?;
    let (g, b) = (gamma.data(), beta.data());
    let data = st
        .xhat
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * g[i % d] + b[i % d])
        .collect();
    Ok(Tensor::from_parts(x.shape.clone(), data))
}

/// Softmax over the last axis with max subtraction.
pub fn softmax(x: &Tensor) -> Tensor {
    let n = *x.shape.last().expect("tensors have rank >= 1");
    let mut out = vec![0.0; x.numel()];
    for (src, dst) in x.data().chunks(n).zip(out.chunks_mut(n)) {
        let m = src.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0;
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - m).exp();
            s += *o;
        }
        dst.iter_mut().for_each(|o| *o /= s);
    }
    Tensor::from_parts(x.shape.clone(), out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(Error::Dimension(_))));
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn from_fn_is_row_major() {
        let t = Tensor::from_fn(vec![2, 3], |i| (i[0] * 10 + i[1]) as f64);
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        assert_eq!(t.get(&[1, 2]), 12.0);
    }

    #[test]
    fn broadcast_reduce_round_trip() {
        let a = Tensor::from_fn(vec![2, 3, 4], |i| i.iter().sum::<usize>() as f64);
        let b = Tensor::from_fn(vec![3, 1], |i| i[0] as f64 * 100.0);
        let c = broadcast_binary(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.shape(), &[2, 3, 4]);
        assert_eq!(c.get(&[1, 2, 3]), 6.0 + 200.0);
        let r = reduce_to_shape(&Tensor::ones(vec![2, 3, 4]), &[3, 1]);
        assert_eq!(r.data(), &[8.0, 8.0, 8.0]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn permute_and_inverse() {
        let t = Tensor::from_fn(vec![2, 3, 4], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let p = permute(&t, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]), 123.0);
        let back = permute(&p, &inverse_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, t);
        assert!(permute(&t, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_narrow_pad() {
        let a = Tensor::from_fn(vec![2, 2], |i| (i[0] * 2 + i[1]) as f64);
        let b = Tensor::full(vec![2, 1], 9.0);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[0.0, 1.0, 9.0, 2.0, 3.0, 9.0]);
        assert_eq!(narrow(&c, 1, 2, 1).unwrap(), b);
        let p = pad_spatial(&a, 1, 0, 0, 1).unwrap();
        assert_eq!(p.shape(), &[3, 3]);
        assert_eq!(p.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0, 3.0, 0.0]);
        assert_eq!(crop_spatial(&p, 1, 0, 2, 2), a);
    }

    #[test]
    fn gather_out_of_range() {
        let a = Tensor::zeros(vec![3, 2]);
        assert!(matches!(gather_rows(&a, &[0, 3]), Err(Error::Index(_))));
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let i = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(vec![2, 2], vec![1.5, -2.0, 3.0, 4.25]).unwrap();
        assert_eq!(matmul(&i, &m).unwrap(), m);
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_broadcasts_batch() {
        let a = Tensor::from_fn(vec![2, 1, 2, 3], |i| (i[0] + i[2] * 3 + i[3]) as f64);
        let b = Tensor::from_fn(vec![4, 3, 2], |i| (i[0] * 2 + i[1] + i[2]) as f64);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2, 2]);
        for x in 0..2 {
            for y in 0..4 {
                let ai = narrow(&a, 0, x, 1).unwrap().reshape(vec![2, 3]).unwrap();
                let bi = narrow(&b, 0, y, 1).unwrap().reshape(vec![3, 2]).unwrap();
                let ci = matmul(&ai, &bi).unwrap();
                for r in 0..2 {
                    for s in 0..2 {
                        assert_eq!(c.get(&[x, y, r, s]), ci.get(&[r, s]));
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::zeros(vec![1, 1, 3, 3]);
        let w = Tensor::zeros(vec![1, 1, 5, 5]);
        let b = Tensor::zeros(vec![1]);
        assert!(matches!(conv2d(&x, &w, &b, 1, 0), Err(Error::Dimension(_))));
        assert!(conv2d(&x, &w, &b, 1, 1).is_ok());
    }

    #[test]
    fn conv_single_patch() {
        let x = Tensor::from_fn(vec![1, 1, 4, 4], |i| (i[2] * 4 + i[3]) as f64);
        let w = Tensor::ones(vec![3, 1, 4, 4]);
        let b = Tensor::new(vec![3], vec![0.0, 1.0, 2.0]).unwrap();
        let y = conv2d(&x, &w, &b, 4, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 1, 1]);
        assert_eq!(y.data(), &[120.0, 121.0, 122.0]);
    }

    #[test]
    fn softmax_basic_cases() {
        let s = softmax(&Tensor::zeros(vec![3]));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1].abs() < 1e-12);
    }

    #[test]
    fn layer_norm_two_point_and_constant() {
        let g = Tensor::ones(vec![2]);
        let b = Tensor::zeros(vec![2]);
        let y = layer_norm(&Tensor::new(vec![2], vec![1.0, 3.0]).unwrap(), &g, &b, LAYER_NORM_EPS).unwrap();
        let expect = 1.0 / (1.0f64 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-15 && (y.data()[1] - expect).abs() < 1e-15);
        let y = layer_norm(&Tensor::full(vec![2], 7.0), &g, &b, LAYER_NORM_EPS).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        assert!((gelu_scalar(1.0) - 0.841_191_990_607_477_4).abs() < 1e-12);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.7, 3.1] {
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }
}
