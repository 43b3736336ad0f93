//! Dynamic position bias and relative position bias tables.
//!
//! The bias network maps a relative offset `(dx, dy)` to one value per
//! head. For a fixed group size every offset a group can produce lies in
//! `[1-G, G-1]^2`, so the network is evaluated once per offset into a
//! `(2G-1) x (2G-1)` table and the `G^2 x G^2` bias is gathered from it.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::autograd::Var;
use crate::error::{config_err, dim_err, Result};
use crate::lsda::GroupLayout;
use crate::params::{normal_tensor, uniform_tensor, BoundParams, ParamId, ParamStore, SeededRng};
use crate::tensor::{Tensor, LAYER_NORM_EPS};

/// Three affine layers `2 -> D/4 -> D/4 -> heads_out`, layer norm and ReLU
/// after the first two. The last layer has no bias.
#[derive(Debug)]
pub struct DpbNet {
    pub hidden: usize,
    pub heads_out: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub g1: ParamId,
    pub n1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub g2: ParamId,
    pub n2: ParamId,
    pub w3: ParamId,
    evals: AtomicU64,
}

impl Clone for DpbNet {
    fn clone(&self) -> Self {
        Self { evals: AtomicU64::new(self.evaluations()), ..*self }
    }
}

impl DpbNet {
    pub fn init(store: &mut ParamStore, rng: &mut SeededRng, prefix: &str, dim: usize, heads_out: usize) -> Result<Self> {
        let hidden = dim / 4;
        if hidden == 0 || heads_out == 0 {
            return config_err(format!("position bias needs dim >= 4 and at least one head, got {dim}/{heads_out}"));
        }
        let ones = || Tensor::ones(vec![hidden]);
        let zeros = || Tensor::zeros(vec![hidden]);
        let w1 = store.add(format!("{prefix}.w1"), uniform_tensor(rng, &[2, hidden], 1.0 / 2f64.sqrt()))?;
        let b1 = store.add(format!("{prefix}.b1"), uniform_tensor(rng, &[hidden], 1.0 / 2f64.sqrt()))?;
        let g1 = store.add(format!("{prefix}.ln1.gamma"), ones())?;
        let n1 = store.add(format!("{prefix}.ln1.beta"), zeros())?;
        let bound = 1.0 / (hidden as f64).sqrt();
        let w2 = store.add(format!("{prefix}.w2"), uniform_tensor(rng, &[hidden, hidden], bound))?;
        let b2 = store.add(format!("{prefix}.b2"), uniform_tensor(rng, &[hidden], bound))?;
        let g2 = store.add(format!("{prefix}.ln2.gamma"), ones())?;
        let n2 = store.add(format!("{prefix}.ln2.beta"), zeros())?;
        let w3 = store.add(format!("{prefix}.w3"), normal_tensor(rng, &[hidden, heads_out], 0.02))?;
        Ok(Self { hidden, heads_out, w1, b1, g1, n1, w2, b2, g2, n2, w3, evals: AtomicU64::new(0) })
    }

    pub fn param_count(dim: usize, heads_out: usize) -> usize {
        let h = dim / 4;
        h * h + 8 * h + h * heads_out
    }

    /// Number of offsets evaluated since construction or the last reset.
    pub fn evaluations(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    /// Evaluates the network on offsets `[n, 2]`, giving `[n, heads_out]`.
    pub fn forward<'t>(&self, p: &BoundParams<'t>, offsets: &Var<'t>) -> Result<Var<'t>> {
        if offsets.shape().len() != 2 || offsets.shape()[1] != 2 {
            return dim_err(format!("offsets must be [n, 2], got {:?}", offsets.shape()));
        }
        self.evals.fetch_add(offsets.shape()[0] as u64, Ordering::Relaxed);
        let h = offsets
            .linear(p.get(self.w1), p.get(self.b1))?
            .layer_norm(p.get(self.g1), p.get(self.n1), LAYER_NORM_EPS)?
            .relu();
        let h = h
            .linear(p.get(self.w2), p.get(self.b2))?
            .layer_norm(p.get(self.g2), p.get(self.n2), LAYER_NORM_EPS)?
            .relu();
        h.matmul(p.get(self.w3))
    }
}

/// Bias for one offset, `[heads_out]`.
pub fn dpb_forward<'t>(net: &DpbNet, p: &BoundParams<'t>, dx: i64, dy: i64) -> Result<Var<'t>> {
    let tape = p.get(net.w1).tape();
    let input = tape.constant(Tensor::new(vec![1, 2], vec![dx as f64, dy as f64])?);
    net.forward(p, &input)?.reshape(vec![net.heads_out])
}

/// Table `[heads, 2G-1, 2G-1]` indexed by `(dx + G - 1, dy + G - 1)`.
#[derive(Clone)]
pub struct BiasTable<'t> {
    pub group_size: usize,
    pub table: Var<'t>,
}

impl<'t> BiasTable<'t> {
    pub fn new(group_size: usize, table: Var<'t>) -> Result<Self> {
        let m = 2 * group_size - 1;
        if table.shape().len() != 3 || table.shape()[1] != m || table.shape()[2] != m {
            return dim_err(format!("table {:?} does not fit group size {group_size}", table.shape()));
        }
        Ok(Self { group_size, table })
    }

    pub fn heads(&self) -> usize {
        self.table.shape()[0]
    }
}

pub fn offset_grid(group_size: usize) -> Result<Tensor> {
    let m = 2 * group_size - 1;
    let base = 1.0 - group_size as f64;
    Tensor::new(
        vec![m * m, 2],
        (0..m * m).flat_map(|k| [base + (k / m) as f64, base + (k % m) as f64]).collect(),
    )
}

/// Evaluates the network once for every offset a `G x G` group can produce.
pub fn build_bias_table<'t>(net: &DpbNet, p: &BoundParams<'t>, group_size: usize) -> Result<BiasTable<'t>> {
    if group_size == 0 {
        return config_err("group size must be positive");
    }
    let m = 2 * group_size - 1;
    let tape = p.get(net.w1).tape();
    let out = net.forward(p, &tape.constant(offset_grid(group_size)?))?;
    BiasTable::new(group_size, out.transpose_last2()?.reshape(vec![net.heads_out, m, m])?)
}

/// Flat table positions feeding each `(i, j)` slot pair of a `G x G` group.
pub fn bias_indices(group_size: usize) -> Vec<usize> {
    let g = group_size;
    let m = 2 * g - 1;
    let gg = g * g;
    let mut idx = Vec::with_capacity(gg * gg);
    for i in 0..gg {
        let (xi, yi) = (i / g, i % g);
        for j in 0..gg {
            let (xj, yj) = (j / g, j % g);
            idx.push((xi + g - 1 - xj) * m + (yi + g - 1 - yj));
        }
    }
    idx
}

/// Gathers the `[heads, G^2, G^2]` bias for a layout's groups.
pub fn gather_bias<'t>(table: &BiasTable<'t>, layout: &GroupLayout) -> Result<Var<'t>> {
    if layout.group_size != table.group_size {
        return dim_err(format!(
            "bias table for group size {} used with group size {}",
            table.group_size, layout.group_size
        ));
    }
    gather_bias_for(table)
}

pub fn gather_bias_for<'t>(table: &BiasTable<'t>) -> Result<Var<'t>> {
    let g = table.group_size;
    let m = 2 * g - 1;
    let heads = table.heads();
    table
        .table
        .reshape(vec![heads, m * m])?
        .transpose_last2()?
        .gather_rows(&bias_indices(g))?
        .transpose_last2()?
        .reshape(vec![heads, g * g, g * g])
}

/// Plain learnable relative position bias table.
pub fn rpb_table(store: &mut ParamStore, rng: &mut SeededRng, name: &str, heads: usize, group_size: usize) -> Result<ParamId> {
    if group_size == 0 || heads == 0 {
        return config_err("relative position table needs positive heads and group size");
    }
    let m = 2 * group_size - 1;
    store.add(name, normal_tensor(rng, &[heads, m, m], 0.02))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpMode {
    /// Resampled once; no gradient reaches the source table.
    Offline,
    /// Resampled on the tape; differentiable.
    Online,
}

/// Bilinear weights `[n_new, n_old]` over offset lattices, corners aligned.
pub fn interpolation_matrix(n_old: usize, n_new: usize) -> Tensor {
    let mut r = vec![0.0; n_new * n_old];
    for p in 0..n_new {
        let src = if n_new == 1 || n_old == 1 {
            (n_old - 1) as f64 / 2.0
        } else {
            (p * (n_old - 1)) as f64 / (n_new - 1) as f64
        };
        let lo = (src.floor() as usize).min(n_old - 1);
        let frac = src - lo as f64;
        r[p * n_old + lo] += 1.0 - frac;
        if frac > 0.0 {
            r[p * n_old + lo + 1] += frac;
        }
    }
    Tensor::new(vec![n_new, n_old], r).expect("interpolation matrix extents")
}

/// Resizes a `[H, 2G-1, 2G-1]` table to `[H, 2G'-1, 2G'-1]`.
pub fn interpolate_rpb<'t>(table: &Var<'t>, new_group: usize, mode: InterpMode) -> Result<Var<'t>> {
    let s = table.shape();
    if s.len() != 3 || s[1] != s[2] || s[1] % 2 == 0 {
        return dim_err(format!("table must be [H, 2G-1, 2G-1], got {s:?}"));
    }
    if new_group == 0 {
        return config_err("target group size must be positive");
    }
    let r = interpolation_matrix(s[1], 2 * new_group - 1);
    let tape = table.tape();
    let rt = crate::tensor::transpose_last2(&r)?;
    match mode {
        InterpMode::Online => tape.constant(r).matmul(table)?.matmul(&tape.constant(rt)),
        InterpMode::Offline => {
            let v = crate::tensor::matmul(&crate::tensor::matmul(&r, table.value())?, &rt)?;
            Ok(tape.constant(v))
        }
    }
}

/// Detached bias matrices keyed by group size, valid for one parameter version.
#[derive(Debug, Default)]
pub struct BiasCache {
    entries: Mutex<HashMap<(usize, usize), (u64, Tensor)>>,
}

impl BiasCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the cached tensor for `(owner, group_size)` when it was built
    /// at `version`, otherwise builds and stores a fresh one.
    pub fn get_or_build(
        &self,
        owner: usize,
        group_size: usize,
        version: u64,
        build: impl FnOnce() -> Result<Tensor>,
    ) -> Result<Tensor> {
        let key = (owner, group_size);
        if let Some((v, t)) = self.entries.lock().expect("cache lock").get(&key) {
            if *v == version {
                return Ok(t.clone());
            }
        }
        let t = build()?;
        self.entries.lock().expect("cache lock").insert(key, (version, t.clone()));
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::params::seeded_rng;

    fn net(dim: usize, heads: usize) -> (ParamStore, DpbNet) {
        let mut store = ParamStore::new();
        let n = DpbNet::init(&mut store, &mut seeded_rng(3), "dpb", dim, heads).unwrap();
        (store, n)
    }

    #[test]
    fn table_counts_and_center() {
        let (store, n) = net(16, 2);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let t = build_bias_table(&n, &p, 3).unwrap();
        assert_eq!(t.table.shape(), &[2, 5, 5]);
        assert_eq!(n.evaluations(), 25);
        let c = dpb_forward(&n, &p, 0, 0).unwrap();
        for h in 0..2 {
            assert_eq!(t.table.value().get(&[h, 2, 2]), c.value().data()[h]);
        }
        assert_eq!(store.numel(), DpbNet::param_count(16, 2));
    }

    #[test]
    fn diagonal_is_center() {
        let (store, n) = net(8, 1);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let t = build_bias_table(&n, &p, 4).unwrap();
        let b = gather_bias_for(&t).unwrap();
        let c = t.table.value().get(&[0, 3, 3]);
        for i in 0..16 {
            assert_eq!(b.value().get(&[0, i, i]), c);
        }
    }

    #[test]
    fn interpolation_identity_and_ramp() {
        let tape = Tape::new();
        let t = Tensor::from_fn(vec![2, 5, 5], |i| i[1] as f64 + 0.1 * i[2] as f64 - i[0] as f64);
        let v = tape.leaf(t.clone());
        let same = interpolate_rpb(&v, 3, InterpMode::Online).unwrap();
        assert_eq!(same.value(), &t);
        let up = interpolate_rpb(&v, 5, InterpMode::Offline).unwrap();
        assert_eq!(up.shape(), &[2, 9, 9]);
        let e = (up.value().get(&[0, 3, 0]) - 1.5).abs();
        assert!(e < 1e-12);
        assert_eq!(up.value().get(&[1, 4, 4]), t.get(&[1, 2, 2]));
    }

    #[test]
    fn cache_invalidated_by_version() {
        let cache = BiasCache::new();
        let mut builds = 0;
        for version in [1, 1, 2] {
            cache
                .get_or_build(0, 3, version, || {
                    builds += 1;
                    Ok(Tensor::zeros(vec![1]))
                })
                .unwrap();
        }
        assert_eq!(builds, 2);
    }
}
