//! Analytic parameter and multiply-accumulate counts.

use crate::cel::{cel_flops, cel_param_count};
use crate::dpb::DpbNet;
use crate::error::Result;
use crate::lsda::{attention_flops, AttentionParams, GroupLayout};

use super::config::{block_specs, ModelConfig, PositionBias};
use super::{AclParams, ACL_KERNEL};

/// Exact number of scalar parameters a model of `config` holds.
pub fn count_params(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let specs = block_specs(config)?;
    let mut total = 0;
    let mut in_dim = config.in_chans;
    for (si, s) in config.stages.iter().enumerate() {
        total += cel_param_count(&config.cel_spec(si)?, in_dim);
        let d = s.dim;
        let hidden = config.mlp_ratio * d;
        let hout = config.heads_out(si);
        for spec in specs.iter().filter(|b| b.stage == si) {
            total += 4 * d + AttentionParams::param_count(d);
            total += d * hidden + hidden + hidden * d + d;
            total += match config.position_bias {
                PositionBias::Dpb => DpbNet::param_count(d, hout),
                PositionBias::Rpb => hout * (2 * spec.group_size - 1).pow(2),
            };
            if spec.followed_by_acl {
                total += AclParams::param_count(d);
            }
        }
        in_dim = d;
    }
    Ok(total + in_dim * config.num_classes + config.num_classes)
}

/// Multiply-accumulate counts by layer family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub embedding: u64,
    pub attention: u64,
    pub position_bias: u64,
    pub mlp: u64,
    pub acl: u64,
    pub head: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.embedding + self.attention + self.position_bias + self.mlp + self.acl + self.head
    }
}

/// Forward multiply-accumulates for one square `input_size` image.
/// Normalisation, activations and softmax are not counted.
pub fn count_flops(config: &ModelConfig, input_size: usize) -> Result<FlopBreakdown> {
    config.validate()?;
    let specs = block_specs(config)?;
    let extents = config.stage_extents(input_size);
    let mut f = FlopBreakdown::default();
    let mut in_dim = config.in_chans;
    let mut grid = input_size;
    for (si, s) in config.stages.iter().enumerate() {
        f.embedding += cel_flops(&config.cel_spec(si)?, in_dim, grid, grid);
        grid = extents[si];
        let d = s.dim as u64;
        let tokens = (grid * grid) as u64;
        let h = (s.dim / 4) as u64;
        let hout = config.heads_out(si) as u64;
        for spec in specs.iter().filter(|b| b.stage == si) {
            let layout = GroupLayout::new(spec.kind, grid, grid, spec.group_size, spec.interval)?;
            f.attention += attention_flops(&layout, s.dim, s.heads);
            f.mlp += 2 * config.mlp_ratio as u64 * d * d * tokens;
            if config.position_bias == PositionBias::Dpb {
                let m = (2 * spec.group_size - 1) as u64;
                f.position_bias += m * m * (2 * h + h * h + h * hout);
            }
            if spec.followed_by_acl {
                f.acl += (ACL_KERNEL * ACL_KERNEL) as u64 * d * tokens;
            }
        }
        in_dim = s.dim;
    }
    f.head = (in_dim * config.num_classes) as u64;
    Ok(f)
}
