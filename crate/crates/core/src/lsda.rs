//! Short and long distance grouped attention.
//!
//! A [`GroupLayout`] assigns every position of an `rows x cols` token grid
//! to a `(group, slot)` pair. Short distance groups are contiguous `G x G`
//! tiles. Long distance groups first split the grid into residue classes
//! modulo the interval `I`; each residue class is a dilated virtual grid,
//! which is then tiled into `G x G` groups exactly like the short form.
//! Slots left over by tiling are padding and are masked out of attention.

use crate::autograd::Var;
use crate::error::{config_err, dim_err, Result};
use crate::params::{normal_tensor, BoundParams, ParamId, ParamStore, SeededRng};
use crate::tensor::Tensor;

/// Logit added to padded key slots.
pub const MASK_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    Sda,
    Lda,
}

impl AttentionKind {
    pub fn label(self) -> &'static str {
        match self {
            AttentionKind::Sda => "sda",
            AttentionKind::Lda => "lda",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupLayout {
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    pub interval: usize,
    pub kind: AttentionKind,
    slots: Vec<Option<usize>>,
    assignment: Vec<(usize, usize)>,
}

impl GroupLayout {
    pub fn sda(rows: usize, cols: usize, group_size: usize) -> Result<Self> {
        Self::build(rows, cols, group_size, 1, AttentionKind::Sda)
    }

    pub fn lda(rows: usize, cols: usize, group_size: usize, interval: usize) -> Result<Self> {
        Self::build(rows, cols, group_size, interval, AttentionKind::Lda)
    }

    pub fn new(kind: AttentionKind, rows: usize, cols: usize, group_size: usize, interval: usize) -> Result<Self> {
        match kind {
            AttentionKind::Sda => Self::sda(rows, cols, group_size),
            AttentionKind::Lda => Self::lda(rows, cols, group_size, interval),
        }
    }

    fn build(rows: usize, cols: usize, g: usize, interval: usize, kind: AttentionKind) -> Result<Self> {
        if g == 0 || interval == 0 {
            return config_err(format!("group size {g} and interval {interval} must be positive"));
        }
        if rows == 0 || cols == 0 {
            return config_err(format!("token grid {rows}x{cols} is empty"));
        }
        let extent = |n: usize, residue: usize| if residue < n { (n - residue).div_ceil(interval) } else { 0 };
        let mut slots = Vec::new();
        let mut assignment = vec![(usize::MAX, usize::MAX); rows * cols];
        let mut group = 0;
        for a in 0..interval {
            for b in 0..interval {
                let (vh, vw) = (extent(rows, a), extent(cols, b));
                if vh == 0 || vw == 0 {
                    continue;
                }
                for ty in 0..vh.div_ceil(g) {
                    for tx in 0..vw.div_ceil(g) {
                        for sy in 0..g {
                            for sx in 0..g {
                                let (vr, vc) = (ty * g + sy, tx * g + sx);
                                if vr < vh && vc < vw {
                                    let t = (a + vr * interval) * cols + b + vc * interval;
                                    assignment[t] = (group, sy * g + sx);
                                    slots.push(Some(t));
                                } else {
                                    slots.push(None);
                                }
                            }
                        }
                        group += 1;
                    }
                }
            }
        }
        Ok(Self { rows, cols, group_size: g, interval, kind, slots, assignment })
    }

    pub fn n_groups(&self) -> usize {
        self.slots.len() / self.slots_per_group()
    }

    pub fn slots_per_group(&self) -> usize {
        self.group_size * self.group_size
    }

    pub fn n_tokens(&self) -> usize {
        self.rows * self.cols
    }

    /// Token position held by a slot, or `None` for padding.
    pub fn slot(&self, group: usize, slot: usize) -> Option<(usize, usize)> {
        self.slots[group * self.slots_per_group() + slot].map(|t| (t / self.cols, t % self.cols))
    }

    /// `(group, slot)` of a token position.
    pub fn assignment(&self, row: usize, col: usize) -> (usize, usize) {
        self.assignment[row * self.cols + col]
    }

    /// Group-local lattice coordinates of a slot.
    pub fn lattice_coords(&self, slot: usize) -> (usize, usize) {
        (slot / self.group_size, slot % self.group_size)
    }

    pub fn padded_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_none()).count()
    }

    pub fn has_padding(&self) -> bool {
        self.slots.iter().any(Option::is_none)
    }

    pub fn group_is_full(&self, group: usize) -> bool {
        let n = self.slots_per_group();
        self.slots[group * n..(group + 1) * n].iter().all(Option::is_some)
    }

    /// Flat slot table, group-major, `None` marking padding.
    pub fn slot_table(&self) -> &[Option<usize>] {
        &self.slots
    }

    /// Additive key mask `[n_groups, 1, 1, G^2]`.
    pub fn key_mask(&self) -> Tensor {
        let n = self.slots_per_group();
        Tensor::from_fn(vec![self.n_groups(), 1, 1, n], |i| {
            if self.slots[i[0] * n + i[3]].is_some() { 0.0 } else { MASK_LOGIT }
        })
    }
}

/// Parameter handles of one multi-head attention.
///
/// The key projection carries no bias: softmax is invariant to it.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub dim: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

pub fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return config_err(format!("dim {dim} is not divisible by {heads} heads"));
    }
    Ok(())
}

impl AttentionParams {
    pub fn init(store: &mut ParamStore, rng: &mut SeededRng, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        let mut w = |store: &mut ParamStore, n: &str| store.add(format!("{prefix}.{n}"), normal_tensor(rng, &[dim, dim], 0.02));
        let wq = w(store, "wq")?;
        let wk = w(store, "wk")?;
        let wv = w(store, "wv")?;
        let wo = w(store, "wo")?;
        let bq = store.add(format!("{prefix}.bq"), Tensor::zeros(vec![dim]))?;
        let bv = store.add(format!("{prefix}.bv"), Tensor::zeros(vec![dim]))?;
        let bo = store.add(format!("{prefix}.bo"), Tensor::zeros(vec![dim]))?;
        Ok(Self { dim, heads, wq, bq, wk, wv, bv, wo, bo })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn param_count(dim: usize) -> usize {
        4 * dim * dim + 3 * dim
    }

    pub fn bind<'t>(&self, p: &BoundParams<'t>) -> AttentionWeights<'t> {
        AttentionWeights {
            heads: self.heads,
            wq: p.get(self.wq).clone(),
            bq: p.get(self.bq).clone(),
            wk: p.get(self.wk).clone(),
            wv: p.get(self.wv).clone(),
            bv: p.get(self.bv).clone(),
            wo: p.get(self.wo).clone(),
            bo: p.get(self.bo).clone(),
        }
    }
}

/// Attention weights registered on a tape. Projections are `[D, D]`, applied as `x @ w`.
#[derive(Clone)]
pub struct AttentionWeights<'t> {
    pub heads: usize,
    pub wq: Var<'t>,
    pub bq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub bv: Var<'t>,
    pub wo: Var<'t>,
    pub bo: Var<'t>,
}

impl AttentionWeights<'_> {
    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }
}

pub struct AttentionOutput<'t> {
    /// Output grid, same shape as the input grid.
    pub out: Var<'t>,
    /// Attention probabilities `[B, n_groups, H, G^2, G^2]`.
    pub attn: Tensor,
}

fn group_rows<'t>(x: &Var<'t>, layout: &GroupLayout, batch: usize, heads: usize) -> Result<Var<'t>> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let zero = x.tape().constant(Tensor::zeros(vec![1, d]));
    let padded = x.tape().concat(&[x.clone(), zero], 0)?;
    let per_image = layout.n_tokens();
    let mut idx = Vec::with_capacity(batch * layout.slot_table().len());
    for b in 0..batch {
        idx.extend(layout.slot_table().iter().map(|s| s.map_or(n, |t| b * per_image + t)));
    }
    let gg = layout.slots_per_group();
    padded
        .gather_rows(&idx)?
        .reshape(vec![batch * layout.n_groups(), gg, heads, d / heads])?
        .permute(&[0, 2, 1, 3])
}

/// Grouped multi-head attention `softmax(QK^T / sqrt(d) + B) V` over a
/// token grid `[B, rows, cols, D]` with bias `[H, G^2, G^2]` (or one
/// bias shared by all heads, `[1, G^2, G^2]`).
pub fn group_attention<'t>(
    tokens: &Var<'t>,
    layout: &GroupLayout,
    w: &AttentionWeights<'t>,
    bias: &Var<'t>,
) -> Result<AttentionOutput<'t>> {
    let shape = tokens.shape().to_vec();
    if shape.len() != 4 || shape[1] != layout.rows || shape[2] != layout.cols {
        return dim_err(format!(
            "token grid {shape:?} does not match a {}x{} layout",
            layout.rows, layout.cols
        ));
    }
    let (batch, dim, heads) = (shape[0], shape[3], w.heads);
    if dim != w.dim() {
        return dim_err(format!("token dim {dim} but attention dim {}", w.dim()));
    }
    let gg = layout.slots_per_group();
    let bs = bias.shape();
    if bs.len() != 3 || (bs[0] != heads && bs[0] != 1) || bs[1] != gg || bs[2] != gg {
        return dim_err(format!("bias shape {bs:?}, expected [{heads}, {gg}, {gg}]"));
    }
    let head_dim = dim / heads;
    let n = batch * layout.n_tokens();
    let flat = tokens.reshape(vec![n, dim])?;
    let q = group_rows(&flat.linear(&w.wq, &w.bq)?, layout, batch, heads)?;
    let k = group_rows(&flat.matmul(&w.wk)?, layout, batch, heads)?;
    let v = group_rows(&flat.linear(&w.wv, &w.bv)?, layout, batch, heads)?;

    let mut logits = q.matmul(&k.transpose_last2()?)?.scale(1.0 / (head_dim as f64).sqrt()).add(bias)?;
    if layout.has_padding() {
        let m = layout.key_mask();
        let rep = Tensor::from_fn(vec![batch * layout.n_groups(), 1, 1, gg], |i| {
            m.data()[(i[0] % layout.n_groups()) * gg + i[3]]
        });
        logits = logits.add(&tokens.tape().constant(rep))?;
    }
    let attn = logits.softmax();
    let ctx = attn
        .matmul(&v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(vec![batch * layout.n_groups() * gg, dim])?;

    let per_image = layout.n_tokens();
    let mut back = Vec::with_capacity(n);
    for b in 0..batch {
        for t in 0..per_image {
            let (g, s) = layout.assignment[t];
            back.push((b * layout.n_groups() + g) * gg + s);
        }
    }
    let out = ctx.gather_rows(&back)?.linear(&w.wo, &w.bo)?.reshape(shape)?;
    let attn = attn.value().reshape(vec![batch, layout.n_groups(), heads, gg, gg])?;
    Ok(AttentionOutput { out, attn })
}

/// Multiply-accumulate count of one grouped attention over every slot
/// the layout processes, padding included.
pub fn attention_flops(layout: &GroupLayout, dim: usize, heads: usize) -> u64 {
    let g2 = layout.slots_per_group() as u64;
    let ng = layout.n_groups() as u64;
    let d = (dim / heads) as u64;
    let dim = dim as u64;
    ng * heads as u64 * 2 * g2 * g2 * d + 4 * ng * g2 * dim * dim
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sda_tiles() {
        let l = GroupLayout::sda(6, 6, 3).unwrap();
        assert_eq!(l.n_groups(), 4);
        let starts: Vec<_> = (0..4).map(|g| l.slot(g, 0).unwrap()).collect();
        assert_eq!(starts, vec![(0, 0), (0, 3), (3, 0), (3, 3)]);
        assert_eq!(GroupLayout::sda(3, 3, 3).unwrap().n_groups(), 1);
        let p = GroupLayout::sda(7, 7, 3).unwrap();
        assert_eq!((p.n_groups(), p.padded_count()), (9, 32));
    }

    #[test]
    fn lda_residue_groups() {
        let l = GroupLayout::lda(9, 9, 3, 3).unwrap();
        assert_eq!(l.n_groups(), 9);
        let members: Vec<_> = (0..9).map(|s| l.slot(0, s).unwrap()).collect();
        assert_eq!(members, vec![(0, 0), (0, 3), (0, 6), (3, 0), (3, 3), (3, 6), (6, 0), (6, 3), (6, 6)]);
        assert_eq!(GroupLayout::lda(56, 56, 4, 4).unwrap().n_groups(), 256);
    }

    #[test]
    fn interval_one_is_sda() {
        let a = GroupLayout::lda(7, 5, 3, 1).unwrap();
        let b = GroupLayout::sda(7, 5, 3).unwrap();
        assert_eq!(a.slot_table(), b.slot_table());
        assert_eq!(a.assignment, b.assignment);
    }

    #[test]
    fn interval_beyond_grid_drops_empty_groups() {
        let l = GroupLayout::lda(2, 2, 2, 4).unwrap();
        assert_eq!(l.n_groups(), 4);
        assert_eq!(l.padded_count(), 12);
    }

    #[test]
    fn flops_scale_with_group_area() {
        let score = |g| {
            let l = GroupLayout::sda(56, 56, g).unwrap();
            attention_flops(&l, 64, 2) - 4 * 56 * 56 * 64 * 64
        };
        assert_eq!(score(14), 4 * score(7));
        let global = GroupLayout::sda(7, 7, 7).unwrap();
        assert_eq!(attention_flops(&global, 32, 4) - 4 * 49 * 32 * 32, 2 * 4 * 7u64.pow(4) * 8);
    }
}
