//! Structural summary printed by `xfmr build`.

use std::fmt::Write as _;

use crossformer::model::{block_specs, count_flops, count_params};
use crossformer::{ModelConfig, Result};

pub const PARAM_TOL: f64 = 0.05;
pub const FLOP_TOL: f64 = 0.10;

/// Published `(params in M, FLOPs in G)` at 224 x 224 for the named variants.
pub fn published_counts(name: &str) -> Option<(f64, f64)> {
    Some(match name {
        "crossformer-t" => (27.8, 2.9),
        "crossformer-s" => (30.7, 4.9),
        "crossformer-b" => (52.0, 9.2),
        "crossformer-l" => (92.0, 16.1),
        "crossformer++-s" => (23.3, 4.4),
        "crossformer++-b" => (52.0, 9.5),
        "crossformer++-l" => (92.0, 16.6),
        "crossformer++-h" => (96.0, 21.8),
        _ => return None,
    })
}

pub struct BuildReport {
    pub text: String,
    pub params: usize,
    pub flops: u64,
    /// `None` when the config has no published counts.
    pub within_tolerance: Option<bool>,
}

pub fn within(observed: f64, target: f64, tol: f64) -> bool {
    ((observed - target) / target).abs() <= tol
}

pub fn build_report(config: &ModelConfig) -> Result<BuildReport> {
    let params = count_params(config)?;
    let flops = count_flops(config, config.input_size)?;
    let specs = block_specs(config)?;
    let extents = config.stage_extents(config.input_size);
    let mut text = String::new();
    let _ = writeln!(text, "model {} input {}x{}", config.name, config.input_size, config.input_size);
    for (si, s) in config.stages.iter().enumerate() {
        let blocks: Vec<_> = specs.iter().filter(|b| b.stage == si).collect();
        let groups: Vec<String> = blocks.iter().map(|b| format!("{}{}", b.kind.label(), b.group_size)).collect();
        let acl: Vec<String> = blocks.iter().filter(|b| b.followed_by_acl).map(|b| (b.index + 1).to_string()).collect();
        let _ = writeln!(
            text,
            "stage {}: grid {}x{} dim {} heads {} interval {} kernels {:?} blocks [{}] acl after [{}]",
            si + 1,
            extents[si],
            extents[si],
            s.dim,
            s.heads,
            s.interval,
            s.kernels,
            groups.join(" "),
            acl.join(" ")
        );
    }
    let _ = writeln!(text, "params {params} ({:.2}M)", params as f64 / 1e6);
    let _ = writeln!(
        text,
        "flops {} ({:.2}G; embedding {} attention {} bias {} mlp {} acl {} head {})",
        flops.total(),
        flops.total() as f64 / 1e9,
        flops.embedding,
        flops.attention,
        flops.position_bias,
        flops.mlp,
        flops.acl,
        flops.head
    );
    let mut within_tolerance = None;
    if let Some((tp, tf)) = published_counts(&config.name).filter(|_| config.input_size == 224) {
        let (p, f) = (params as f64 / 1e6, flops.total() as f64 / 1e9);
        let (pp, fp) = (within(p, tp, PARAM_TOL), within(f, tf, FLOP_TOL));
        let verdict = |ok| if ok { "PASS" } else { "FAIL" };
        let _ = writeln!(text, "params {tp}M ±5% {} (counted {p:.2}M)", verdict(pp));
        let _ = writeln!(text, "flops {tf}G ±10% {} (counted {f:.2}G)", verdict(fp));
        within_tolerance = Some(pp && fp);
    }
    Ok(BuildReport { text, params, flops: flops.total(), within_tolerance })
}
