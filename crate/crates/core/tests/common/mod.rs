#![allow(dead_code)]

use crossformer::lsda::{AttentionWeights, GroupLayout};
use crossformer::params::{normal_tensor, seeded_rng};
use crossformer::{Tape, Tensor};

pub fn rand(seed: u64, shape: &[usize], std: f64) -> Tensor {
    normal_tensor(&mut seeded_rng(seed), shape, std)
}

pub struct Raw {
    pub heads: usize,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl Raw {
    pub fn random(seed: u64, dim: usize, heads: usize) -> Self {
        let m = |s: u64| rand(seed.wrapping_add(s), &[dim, dim], 0.5);
        let v = |s: u64| rand(seed.wrapping_add(s), &[dim], 0.5);
        Self { heads, wq: m(1), bq: v(2), wk: m(3), wv: m(4), bv: v(5), wo: m(6), bo: v(7) }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> AttentionWeights<'t> {
        let c = |t: &Tensor| tape.constant(t.clone());
        AttentionWeights {
            heads: self.heads,
            wq: c(&self.wq),
            bq: c(&self.bq),
            wk: c(&self.wk),
            wv: c(&self.wv),
            bv: c(&self.bv),
            wo: c(&self.wo),
            bo: c(&self.bo),
        }
    }
}

pub fn project(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    (0..dout)
        .map(|o| (0..din).map(|i| x[i] * w.get(&[i, o])).sum::<f64>() + b.map_or(0.0, |b| b.get(&[o])))
        .collect()
}

/// Attention computed group by group from token positions alone.
pub fn naive_attention(x: &Tensor, layout: &GroupLayout, p: &Raw, bias: &Tensor) -> Tensor {
    let (batch, rows, cols, dim) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hd = dim / p.heads;
    let mut out = vec![0.0; x.numel()];
    for b in 0..batch {
        let tok = |r: usize, c: usize| -> Vec<f64> { (0..dim).map(|k| x.get(&[b, r, c, k])).collect() };
        for g in 0..layout.n_groups() {
            let members: Vec<(usize, (usize, usize))> =
                (0..layout.slots_per_group()).filter_map(|s| layout.slot(g, s).map(|pos| (s, pos))).collect();
            let q: Vec<Vec<f64>> = members.iter().map(|&(_, (r, c))| project(&tok(r, c), &p.wq, Some(&p.bq))).collect();
            let k: Vec<Vec<f64>> = members.iter().map(|&(_, (r, c))| project(&tok(r, c), &p.wk, None)).collect();
            let v: Vec<Vec<f64>> = members.iter().map(|&(_, (r, c))| project(&tok(r, c), &p.wv, Some(&p.bv))).collect();
            for (qi, &(si, (r, c))) in members.iter().enumerate() {
                let mut ctx = vec![0.0; dim];
                for h in 0..p.heads {
                    let hb = if bias.shape()[0] == 1 { 0 } else { h };
                    let logits: Vec<f64> = members
                        .iter()
                        .enumerate()
                        .map(|(kj, &(sj, _))| {
                            let dot: f64 = (0..hd).map(|e| q[qi][h * hd + e] * k[kj][h * hd + e]).sum();
                            dot / (hd as f64).sqrt() + bias.get(&[hb, si, sj])
                        })
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (kj, ev) in e.iter().enumerate() {
                        for d in 0..hd {
                            ctx[h * hd + d] += ev / z * v[kj][h * hd + d];
                        }
                    }
                }
                let y = project(&ctx, &p.wo, Some(&p.bo));
                let base = ((b * rows + r) * cols + c) * dim;
                out[base..base + dim].copy_from_slice(&y);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}
