//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records one node per operation whose inputs require a
//! gradient. Operations on constants are evaluated eagerly and leave no
//! trace, so evaluation without leaves keeps no intermediates alive.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{self, numel, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

/// Single-threaded operation record. One tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A tensor value bound to a tape, optionally tracked for gradients.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    node: Option<usize>,
    value: Tensor,
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: &Var<'_>) -> Option<&Tensor> {
        v.node.and_then(|n| self.by_leaf.get(&n))
    }

    /// Gradient of `v`, or zeros if the loss does not depend on it.
    pub fn wrt(&self, v: &Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents: Vec::new(), backward: None });
        Var { tape: self, node: Some(nodes.len() - 1), value }
    }

    /// Wraps a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var { tape: self, node: None, value }
    }

    fn record<'t>(
        &'t self,
        value: Tensor,
        inputs: &[&Var<'t>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let parents: Vec<Option<usize>> = inputs.iter().map(|v| v.node).collect();
        if parents.iter().all(Option::is_none) {
            return Var { tape: self, node: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents, backward: Some(Box::new(backward)) });
        Var { tape: self, node: Some(nodes.len() - 1), value }
    }

    /// Back-propagates from a single-element `loss`, visiting every node
    /// reachable from it exactly once in reverse recording order.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if !loss.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let mut out = Gradients::default();
        let Some(root) = loss.node else {
            return Ok(out);
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::ones(loss.value.shape().to_vec()));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let Some(bw) = &node.backward else {
                out.by_leaf.insert(id, g);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            for (parent, pg) in node.parents.iter().zip(bw(&g, &needs)) {
                if let (Some(p), Some(pg)) = (parent, pg) {
                    grads[*p] = Some(match grads[*p].take() {
                        None => pg,
                        Some(acc) => acc.zip_map(&pg, |a, b| a + b).expect("gradient shapes are stable"),
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn concat<'t>(&'t self, xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let vals: Vec<&Tensor> = xs.iter().map(|v| &v.value).collect();
        let value = tensor::concat(&vals, axis)?;
        let sizes: Vec<usize> = xs.iter().map(|v| v.value.shape()[axis]).collect();
        let refs: Vec<&Var<'t>> = xs.iter().collect();
        Ok(self.record(value, &refs, move |g, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let piece = need.then(|| tensor::narrow(g, axis, start, len).expect("concat slice"));
                    start += len;
                    piece
                })
                .collect()
        }))
    }
}

fn scaled(t: &Tensor, c: f64) -> Tensor {
    t.map(|v| v * c)
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands belong to different tapes".into()))
        }
    }

    // ── elementwise ──

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let value = tensor::broadcast_binary(&self.value, &other.value, |a, b| a + b)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Ok(self.tape.record(value, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| tensor::reduce_to_shape(g, &sa)),
                needs[1].then(|| tensor::reduce_to_shape(g, &sb)),
            ]
        }))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let value = tensor::broadcast_binary(&self.value, &other.value, |a, b| a * b)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        Ok(self.tape.record(value, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| {
                    let gb = tensor::broadcast_binary(g, &b, |x, y| x * y).expect("broadcast");
                    tensor::reduce_to_shape(&gb, a.shape())
                }),
                needs[1].then(|| {
                    let ga = tensor::broadcast_binary(g, &a, |x, y| x * y).expect("broadcast");
                    tensor::reduce_to_shape(&ga, b.shape())
                }),
            ]
        }))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let value = scaled(&self.value, c);
        self.tape.record(value, &[self], move |g, _| vec![Some(scaled(g, c))])
    }

    pub fn relu(&self) -> Var<'t> {
        let value = self.value.map(|v| v.max(0.0));
        let x = self.value.clone();
        self.tape.record(value, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |g, x| if x > 0.0 { g } else { 0.0 }).expect("same shape"))]
        })
    }

    pub fn gelu(&self) -> Var<'t> {
        let value = self.value.map(tensor::gelu_scalar);
        let x = self.value.clone();
        self.tape.record(value, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |g, x| g * tensor::gelu_grad_scalar(x)).expect("same shape"))]
        })
    }

    // ── shape ──

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = self.value.reshape(shape)?;
        let orig = self.shape().to_vec();
        Ok(self.tape.record(value, &[self], move |g, _| {
            vec![Some(g.reshape(orig.clone()).expect("reshape back"))]
        }))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let value = tensor::permute(&self.value, axes)?;
        let inv = tensor::inverse_permutation(axes);
        Ok(self.tape.record(value, &[self], move |g, _| {
            vec![Some(tensor::permute(g, &inv).expect("inverse permutation"))]
        }))
    }

    pub fn transpose_last2(&self) -> Result<Var<'t>> {
        let r = self.value.rank();
        if r < 2 {
            return dim_err(format!("transpose needs rank >= 2, got {:?}", self.shape()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(&axes)
    }

    /// Row gather on the leading axis; the adjoint scatter-adds by index.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let value = tensor::gather_rows(&self.value, idx)?;
        let idx = idx.to_vec();
        let n = self.shape()[0];
        Ok(self.tape.record(value, &[self], move |g, _| {
            vec![Some(tensor::scatter_add_rows(g, &idx, n))]
        }))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = tensor::narrow(&self.value, axis, start, len)?;
        let shape = self.shape().to_vec();
        Ok(self.tape.record(value, &[self], move |g, _| {
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let ext = shape[axis];
            let mut data = vec![0.0; numel(&shape)];
            for o in 0..outer {
                let dst = o * ext * inner + start * inner;
                data[dst..dst + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), data))]
        }))
    }

    pub fn pad_spatial(&self, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var<'t>> {
        let value = tensor::pad_spatial(&self.value, top, bottom, left, right)?;
        let r = self.value.rank();
        let (h, w) = (self.shape()[r - 2], self.shape()[r - 1]);
        Ok(self.tape.record(value, &[self], move |g, _| {
            vec![Some(tensor::crop_spatial(g, top, left, h, w))]
        }))
    }

    // ── linear algebra ──

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let value = tensor::matmul(&self.value, &other.value)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        Ok(self.tape.record(value, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| {
                    let bt = tensor::transpose_last2(&b).expect("rank checked");
                    tensor::reduce_to_shape(&tensor::matmul(g, &bt).expect("shapes"), a.shape())
                }),
                needs[1].then(|| {
                    let at = tensor::transpose_last2(&a).expect("rank checked");
                    tensor::reduce_to_shape(&tensor::matmul(&at, g).expect("shapes"), b.shape())
                }),
            ]
        }))
    }

    /// `x @ w + b` over the last axis.
    pub fn linear(&self, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        self.matmul(w)?.add(b)
    }

    pub fn conv2d(&self, w: &Var<'t>, b: &Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(w)?;
        self.same_tape(b)?;
        let value = tensor::conv2d(&self.value, &w.value, &b.value, stride, pad)?;
        let (x, wt) = (self.value.clone(), w.value.clone());
        Ok(self.tape.record(value, &[self, w, b], move |g, needs| {
            let (gx, gw, gb) = tensor::conv2d_backward(&x, &wt, g, stride, pad);
            vec![needs[0].then_some(gx), needs[1].then_some(gw), needs[2].then_some(gb)]
        }))
    }

    pub fn depthwise_conv2d(&self, w: &Var<'t>, b: &Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(w)?;
        self.same_tape(b)?;
        let value = tensor::depthwise_conv2d(&self.value, &w.value, &b.value, stride, pad)?;
        let (x, wt) = (self.value.clone(), w.value.clone());
        Ok(self.tape.record(value, &[self, w, b], move |g, needs| {
            let (gx, gw, gb) = tensor::depthwise_conv2d_backward(&x, &wt, g, stride, pad);
            vec![needs[0].then_some(gx), needs[1].then_some(gw), needs[2].then_some(gb)]
        }))
    }

    // ── normalisation ──

    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let value = tensor::layer_norm(&self.value, &gamma.value, &beta.value, eps)?;
        let stats = tensor::layer_norm_stats(&self.value, eps)?;
        let (xhat, rstd) = (stats.xhat, stats.rstd);
        let gam = gamma.value.clone();
        Ok(self.tape.record(value, &[self, gamma, beta], move |g, needs| {
            let d = gam.numel();
            let (gd, xh, gm) = (g.data(), xhat.data(), gam.data());
            let mut gx = vec![0.0; g.numel()];
            let mut gg = vec![0.0; d];
            let mut gb = vec![0.0; d];
            for (r, s) in rstd.iter().enumerate() {
                let row = r * d..(r + 1) * d;
                let (dy, xr) = (&gd[row.clone()], &xh[row.clone()]);
                let mut sum_dxh = 0.0;
                let mut sum_dxh_x = 0.0;
                for j in 0..d {
                    let dxh = dy[j] * gm[j];
                    sum_dxh += dxh;
                    sum_dxh_x += dxh * xr[j];
                    gg[j] += dy[j] * xr[j];
                    gb[j] += dy[j];
                }
                let n = d as f64;
                for j in 0..d {
                    let dxh = dy[j] * gm[j];
                    gx[r * d + j] = s / n * (n * dxh - sum_dxh - xr[j] * sum_dxh_x);
                }
            }
            vec![
                needs[0].then(|| Tensor::from_parts(g.shape().to_vec(), gx)),
                needs[1].then(|| Tensor::from_parts(vec![d], gg)),
                needs[2].then(|| Tensor::from_parts(vec![d], gb)),
            ]
        }))
    }

    pub fn softmax(&self) -> Var<'t> {
        let value = tensor::softmax(&self.value);
        let y = value.clone();
        self.tape.record(value, &[self], move |g, _| {
            let n = *y.shape().last().expect("rank >= 1");
            let mut gx = vec![0.0; y.numel()];
            for ((yr, gr), out) in y.data().chunks(n).zip(g.data().chunks(n)).zip(gx.chunks_mut(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, yv), gv) in out.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::from_parts(y.shape().to_vec(), gx))]
        })
    }

    // ── reductions ──

    pub fn sum(&self) -> Var<'t> {
        let value = Tensor::scalar(self.value.sum());
        let shape = self.shape().to_vec();
        self.tape.record(value, &[self], move |g, _| vec![Some(Tensor::full(shape.clone(), g.item()))])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.value.rank() {
            return dim_err(format!("axis {axis} out of range for {:?}", self.shape()));
        }
        let s = self.shape();
        Ok((s[..axis].iter().product(), s[axis], s[axis + 1..].iter().product()))
    }

    fn reduced_shape(&self, axis: usize) -> Vec<usize> {
        let mut s = self.shape().to_vec();
        s.remove(axis);
        if s.is_empty() {
            s.push(1);
        }
        s
    }

    /// Mean over one axis (the axis is removed).
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let (outer, ext, inner) = self.axis_split(axis)?;
        let xd = self.value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                for i in 0..inner {
                    out[o * inner + i] += xd[(o * ext + e) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= ext as f64);
        let value = Tensor::from_parts(self.reduced_shape(axis), out);
        let shape = self.shape().to_vec();
        Ok(self.tape.record(value, &[self], move |g, _| {
            let mut gx = vec![0.0; numel(&shape)];
            for o in 0..outer {
                for e in 0..ext {
                    for i in 0..inner {
                        gx[(o * ext + e) * inner + i] = g.data()[o * inner + i] / ext as f64;
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        }))
    }

    /// Max over one axis; the gradient goes to the first maximal index.
    pub fn max_axis(&self, axis: usize) -> Result<Var<'t>> {
        let (outer, ext, inner) = self.axis_split(axis)?;
        let xd = self.value.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                for i in 0..inner {
                    let v = xd[(o * ext + e) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = e;
                    }
                }
            }
        }
        let value = Tensor::from_parts(self.reduced_shape(axis), out);
        let shape = self.shape().to_vec();
        Ok(self.tape.record(value, &[self], move |g, _| {
            let mut gx = vec![0.0; numel(&shape)];
            for o in 0..outer {
                for i in 0..inner {
                    let e = arg[o * inner + i];
                    gx[(o * ext + e) * inner + i] = g.data()[o * inner + i];
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        }))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        if self.value.rank() != 2 || self.shape()[0] != labels.len() {
            return dim_err(format!(
                "cross_entropy logits {:?} vs {} labels",
                self.shape(),
                labels.len()
            ));
        }
        let (b, c) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let probs = tensor::softmax(&self.value);
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &self.value.data()[r * c..(r + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        let value = Tensor::scalar(loss / b as f64);
        let labels = labels.to_vec();
        Ok(self.tape.record(value, &[self], move |g, _| {
            let s = g.item() / b as f64;
            let mut gx = probs.to_vec();
            for (r, &l) in labels.iter().enumerate() {
                gx[r * c + l] -= 1.0;
            }
            gx.iter_mut().for_each(|v| *v *= s);
            vec![Some(Tensor::from_parts(vec![b, c], gx))]
        }))
    }
}
