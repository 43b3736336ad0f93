//! Averaged attention maps, amplitude traces and their CSV forms.

use std::fmt::Write as _;

use crate::error::{dim_err, Result};
use crate::model::{block_specs, Capture, LayerKind, Model, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TraceRecord {
    pub stage: usize,
    pub block: usize,
    pub kind: LayerKind,
    pub max_abs: f64,
    pub mean_abs: f64,
    /// Averaged attention map `[G, G, G, G]`, blocks only.
    pub attention: Option<Tensor>,
}

impl TraceRecord {
    pub fn kind_label(&self) -> &'static str {
        match self.kind {
            LayerKind::Block(k) => k.label(),
            LayerKind::Acl => "acl",
        }
    }
}

/// Mean over batch and heads of `[B, H, G, G, G, G]` attention.
///
/// Slice `[i, j]` of the result is the `G x G` map of token `(i, j)`.
pub fn average_attention(attn: &Tensor) -> Result<Tensor> {
    let s = attn.shape();
    if s.len() != 6 || s[2] != s[3] || s[2] != s[4] || s[2] != s[5] {
        return dim_err(format!("attention must be [B,H,G,G,G,G], got {s:?}"));
    }
    let g = s[2];
    let per = g * g * g * g;
    let n = s[0] * s[1];
    let mut out = vec![0.0; per];
    for chunk in attn.data().chunks_exact(per) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    Tensor::new(vec![g, g, g, g], out)
}

/// Averaged map of one captured block, over batch, heads and every group
/// free of padding (all groups when each one is padded).
pub fn capture_attention(c: &Capture) -> Result<Option<Tensor>> {
    let Some(attn) = &c.attn else { return Ok(None) };
    let s = attn.shape();
    let (b, ng, h, gg) = (s[0], s[1], s[2], s[3]);
    let groups: Vec<usize> = if c.full_groups.is_empty() { (0..ng).collect() } else { c.full_groups.clone() };
    let per = h * gg * gg;
    let mut data = Vec::with_capacity(b * groups.len() * per);
    for bi in 0..b {
        for &g in &groups {
            let start = (bi * ng + g) * per;
            data.extend_from_slice(&attn.data()[start..start + per]);
        }
    }
    let g = c.group_size;
    let stacked = Tensor::new(vec![b * groups.len(), h, g, g, g, g], data)?;
    average_attention(&stacked).map(Some)
}

/// One record per block and ACL, in forward order.
pub fn amplitude_trace(model: &Model, images: &Tensor) -> Result<Vec<TraceRecord>> {
    let (_, _, captures) = model.capture(images)?;
    captures
        .iter()
        .map(|c| {
            Ok(TraceRecord {
                stage: c.stage,
                block: c.block,
                kind: c.kind,
                max_abs: c.output.max_abs(),
                mean_abs: c.output.mean_abs(),
                attention: capture_attention(c)?,
            })
        })
        .collect()
}

/// Rows an amplitude trace of `config` contains.
pub fn expected_trace_rows(config: &ModelConfig) -> Result<usize> {
    let specs = block_specs(config)?;
    Ok(specs.len() + specs.iter().filter(|b| b.followed_by_acl).count())
}

/// Expected Chebyshev distance from each token to the cells it attends,
/// divided by `G - 1`; returns `[G, G]`.
pub fn locality_score(avg_map: &Tensor) -> Result<Tensor> {
    let s = avg_map.shape();
    if s.len() != 4 || s.iter().any(|&e| e != s[0]) {
        return dim_err(format!("attention map must be [G,G,G,G], got {s:?}"));
    }
    let g = s[0];
    if g == 1 {
        return Ok(Tensor::zeros(vec![1, 1]));
    }
    let d = avg_map.data();
    Ok(Tensor::from_fn(vec![g, g], |t| {
        let mut acc = 0.0;
        for ai in 0..g {
            for aj in 0..g {
                let w = d[((t[0] * g + t[1]) * g + ai) * g + aj];
                acc += w * t[0].abs_diff(ai).max(t[1].abs_diff(aj)) as f64;
            }
        }
        acc / (g - 1) as f64
    }))
}

pub fn amplitude_csv(records: &[TraceRecord]) -> String {
    let mut out = String::from("block,kind,max_abs,mean_abs\n");
    for r in records {
        let _ = writeln!(out, "{},{},{:e},{:e}", r.block, r.kind_label(), r.max_abs, r.mean_abs);
    }
    out
}

pub fn attention_csv(map: &Tensor) -> Result<String> {
    let s = map.shape();
    if s.len() != 4 {
        return dim_err(format!("attention map must be [G,G,G,G], got {s:?}"));
    }
    let g = s[0];
    let mut out = String::from("ti,tj,ai,aj,weight\n");
    for (k, w) in map.data().iter().enumerate() {
        let (ti, tj, ai, aj) = (k / (g * g * g), (k / (g * g)) % g, (k / g) % g, k % g);
        let _ = writeln!(out, "{ti},{tj},{ai},{aj},{w:e}");
    }
    Ok(out)
}
