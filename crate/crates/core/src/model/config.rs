//! Model configurations, the named variants and their text form.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::cel::CelSpec;
use crate::error::{config_err, Error, Result};
use crate::lsda::{check_heads, AttentionKind};

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub group_size: usize,
    pub interval: usize,
    pub kernels: Vec<usize>,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionBias {
    Dpb,
    Rpb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupPolicy {
    /// Each stage uses its configured group size.
    Stagewise,
    Fixed(usize),
    /// Linear ramp over every block before the last stage; the last
    /// stage keeps its configured size.
    Linear(usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub in_chans: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
    /// ACL after every `acl_period` blocks of a stage; 0 disables it.
    pub acl_period: usize,
    pub dpb_per_head: bool,
    pub position_bias: PositionBias,
    pub drop_path: f64,
    pub group_policy: GroupPolicy,
    pub stages: Vec<StageConfig>,
}

pub const VARIANTS: [&str; 8] = [
    "crossformer-t",
    "crossformer-s",
    "crossformer-b",
    "crossformer-l",
    "crossformer++-s",
    "crossformer++-b",
    "crossformer++-l",
    "crossformer++-h",
];

fn default_kernels(stage: usize) -> (Vec<usize>, usize) {
    if stage == 0 { (vec![4, 8, 16, 32], 4) } else { (vec![2, 4], 2) }
}

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    fn pyramid(
        name: &str,
        dim: usize,
        depths: [usize; 4],
        heads: [usize; 4],
        groups: [usize; 4],
        intervals: [usize; 4],
        acl_period: usize,
        drop_path: f64,
    ) -> Self {
        let stages = (0..4)
            .map(|s| {
                let (kernels, stride) = default_kernels(s);
                StageConfig {
                    dim: dim << s,
                    depth: depths[s],
                    heads: heads[s],
                    group_size: groups[s],
                    interval: intervals[s],
                    kernels,
                    stride,
                }
            })
            .collect();
        Self {
            name: name.to_string(),
            in_chans: 3,
            input_size: 224,
            num_classes: 1000,
            mlp_ratio: 4,
            acl_period,
            dpb_per_head: true,
            position_bias: PositionBias::Dpb,
            drop_path,
            group_policy: GroupPolicy::Stagewise,
            stages,
        }
    }

    /// One of [`VARIANTS`], case-insensitive.
    pub fn variant(name: &str) -> Result<Self> {
        let v1 = |n, d, depths, heads, dp| Self::pyramid(n, d, depths, heads, [7; 4], [8, 4, 2, 1], 0, dp);
        let v2 = |n, d, depths, heads, dp| Self::pyramid(n, d, depths, heads, [4, 4, 14, 7], [4, 4, 1, 1], 3, dp);
        let small = [3, 6, 12, 24];
        let large = [4, 8, 16, 32];
        let cfg = match name.to_ascii_lowercase().as_str() {
            "crossformer-t" => v1("crossformer-t", 64, [1, 1, 8, 6], [2, 4, 8, 16], 0.1),
            "crossformer-s" => v1("crossformer-s", 96, [2, 2, 6, 2], small, 0.2),
            "crossformer-b" => v1("crossformer-b", 96, [2, 2, 18, 2], small, 0.3),
            "crossformer-l" => v1("crossformer-l", 128, [2, 2, 18, 2], large, 0.5),
            "crossformer++-s" => v2("crossformer++-s", 64, [2, 2, 18, 2], [2, 4, 8, 16], 0.2),
            "crossformer++-b" => v2("crossformer++-b", 96, [2, 2, 18, 2], small, 0.3),
            "crossformer++-l" => v2("crossformer++-l", 128, [2, 2, 18, 2], large, 0.5),
            "crossformer++-h" => v2("crossformer++-h", 128, [6, 6, 18, 2], large, 0.7),
            other => return config_err(format!("unknown variant {other:?}; known: {}", VARIANTS.join(", "))),
        };
        Ok(cfg)
    }

    /// Two-stage model small enough to train on a laptop core.
    pub fn tiny() -> Self {
        Self {
            name: "tiny".to_string(),
            in_chans: 3,
            input_size: 32,
            num_classes: 4,
            mlp_ratio: 2,
            acl_period: 0,
            dpb_per_head: true,
            position_bias: PositionBias::Dpb,
            drop_path: 0.0,
            group_policy: GroupPolicy::Stagewise,
            stages: vec![
                StageConfig { dim: 16, depth: 1, heads: 2, group_size: 2, interval: 4, kernels: vec![4, 8], stride: 4 },
                StageConfig { dim: 32, depth: 1, heads: 4, group_size: 2, interval: 2, kernels: vec![2, 4], stride: 2 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return config_err("a model needs at least one stage");
        }
        if self.in_chans == 0 || self.input_size == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return config_err("in_chans, input_size, num_classes and mlp_ratio must be positive");
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return config_err(format!("drop_path {} outside [0, 1)", self.drop_path));
        }
        match self.group_policy {
            GroupPolicy::Fixed(0) | GroupPolicy::Linear(0, _) | GroupPolicy::Linear(_, 0) => {
                return config_err("group sizes must be positive")
            }
            _ => {}
        }
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            if s.depth == 0 || s.group_size == 0 || s.interval == 0 {
                return config_err(format!("stage {n}: depth, group size and interval must be positive"));
            }
            check_heads(s.dim, s.heads).map_err(|e| Error::Config(format!("stage {n}: {e}")))?;
            if s.dim < 4 {
                return config_err(format!("stage {n}: dim {} too small for the position bias network", s.dim));
            }
            CelSpec::new(s.kernels.clone(), s.stride, s.dim).map_err(|e| Error::Config(format!("stage {n}: {e}")))?;
        }
        Ok(())
    }

    pub fn cel_spec(&self, stage: usize) -> Result<CelSpec> {
        let s = &self.stages[stage];
        CelSpec::new(s.kernels.clone(), s.stride, s.dim)
    }

    /// Token grid extent of every stage for a square input.
    pub fn stage_extents(&self, input_size: usize) -> Vec<usize> {
        let mut e = input_size;
        self.stages
            .iter()
            .map(|s| {
                e = e.div_ceil(s.stride);
                e
            })
            .collect()
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.depth).sum()
    }

    pub fn heads_out(&self, stage: usize) -> usize {
        if self.dpb_per_head { self.stages[stage].heads } else { 1 }
    }

    /// Canonical `key = value` form; [`ModelConfig::parse`] inverts it.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let bias = match self.position_bias {
            PositionBias::Dpb => "dpb",
            PositionBias::Rpb => "rpb",
        };
        let policy = match self.group_policy {
            GroupPolicy::Stagewise => "stagewise".to_string(),
            GroupPolicy::Fixed(g) => format!("fixed:{g}"),
            GroupPolicy::Linear(a, b) => format!("linear:{a}:{b}"),
        };
        let _ = writeln!(out, "name = {}", self.name);
        let _ = writeln!(out, "in_chans = {}", self.in_chans);
        let _ = writeln!(out, "input_size = {}", self.input_size);
        let _ = writeln!(out, "num_classes = {}", self.num_classes);
        let _ = writeln!(out, "mlp_ratio = {}", self.mlp_ratio);
        let _ = writeln!(out, "acl_period = {}", self.acl_period);
        let _ = writeln!(out, "dpb_per_head = {}", self.dpb_per_head);
        let _ = writeln!(out, "position_bias = {bias}");
        let _ = writeln!(out, "drop_path = {}", self.drop_path);
        let _ = writeln!(out, "group_policy = {policy}");
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            let kernels: Vec<String> = s.kernels.iter().map(ToString::to_string).collect();
            let _ = writeln!(out, "dim.{n} = {}", s.dim);
            let _ = writeln!(out, "depth.{n} = {}", s.depth);
            let _ = writeln!(out, "heads.{n} = {}", s.heads);
            let _ = writeln!(out, "group.{n} = {}", s.group_size);
            let _ = writeln!(out, "interval.{n} = {}", s.interval);
            let _ = writeln!(out, "kernels.{n} = {}", kernels.join(","));
            let _ = writeln!(out, "stride.{n} = {}", s.stride);
        }
        out
    }

    /// SHA-256 of the canonical text.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    /// Parses `key = value` lines; `#` starts a comment. Per-stage keys
    /// carry a `.N` suffix, `N` counting from 1.
    pub fn parse(text: &str) -> Result<Self> {
        let mut global = BTreeMap::new();
        let mut staged: BTreeMap<usize, BTreeMap<String, String>> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return config_err(format!("line {}: expected `key = value`", lineno + 1));
            };
            let (k, v) = (k.trim(), v.trim().to_string());
            let dup = if let Some((base, idx)) = k.split_once('.') {
                let n: usize = idx
                    .parse()
                    .ok()
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| Error::Config(format!("line {}: bad stage suffix in {k:?}", lineno + 1)))?;
                staged.entry(n).or_default().insert(base.to_string(), v).is_some()
            } else {
                global.insert(k.to_string(), v).is_some()
            };
            if dup {
                return config_err(format!("line {}: duplicate key {k:?}", lineno + 1));
            }
        }

        let mut cfg = Self { stages: Vec::new(), ..Self::tiny() };
        cfg.name = "custom".to_string();
        cfg.input_size = 224;
        cfg.num_classes = 1000;
        cfg.mlp_ratio = 4;
        for (k, v) in &global {
            match k.as_str() {
                "name" => cfg.name = v.clone(),
                "in_chans" => cfg.in_chans = parse_num(k, v)?,
                "input_size" => cfg.input_size = parse_num(k, v)?,
                "num_classes" => cfg.num_classes = parse_num(k, v)?,
                "mlp_ratio" => cfg.mlp_ratio = parse_num(k, v)?,
                "acl_period" => cfg.acl_period = parse_num(k, v)?,
                "dpb_per_head" => {
                    cfg.dpb_per_head = v.parse().map_err(|_| Error::Config(format!("{k}: expected true or false, got {v:?}")))?
                }
                "position_bias" => {
                    cfg.position_bias = match v.as_str() {
                        "dpb" => PositionBias::Dpb,
                        "rpb" => PositionBias::Rpb,
                        _ => return config_err(format!("{k}: expected dpb or rpb, got {v:?}")),
                    }
                }
                "drop_path" => cfg.drop_path = v.parse().map_err(|_| Error::Config(format!("{k}: bad number {v:?}")))?,
                "group_policy" => cfg.group_policy = parse_policy(v)?,
                _ => return config_err(format!("unknown key {k:?}")),
            }
        }
        let n_stages = staged.keys().next_back().copied().unwrap_or(0);
        if staged.len() != n_stages {
            return config_err("stage suffixes must run from 1 without gaps");
        }
        for (n, keys) in &staged {
            let (kernels, stride) = default_kernels(n - 1);
            let get = |k: &str| keys.get(k).ok_or_else(|| Error::Config(format!("missing key {k}.{n}")));
            for k in keys.keys() {
                if !["dim", "depth", "heads", "group", "interval", "kernels", "stride"].contains(&k.as_str()) {
                    return config_err(format!("unknown key {k}.{n}"));
                }
            }
            let kernels = match keys.get("kernels") {
                Some(v) => v.split(',').map(|x| parse_num("kernels", x.trim())).collect::<Result<Vec<_>>>()?,
                None => kernels,
            };
            let stride = match keys.get("stride") {
                Some(v) => parse_num("stride", v)?,
                None => stride,
            };
            cfg.stages.push(StageConfig {
                dim: parse_num("dim", get("dim")?)?,
                depth: parse_num("depth", get("depth")?)?,
                heads: parse_num("heads", get("heads")?)?,
                group_size: parse_num("group", get("group")?)?,
                interval: parse_num("interval", get("interval")?)?,
                kernels,
                stride,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_num(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
}

fn parse_policy(v: &str) -> Result<GroupPolicy> {
    let parts: Vec<&str> = v.split(':').collect();
    match parts.as_slice() {
        ["stagewise"] => Ok(GroupPolicy::Stagewise),
        ["fixed", g] => Ok(GroupPolicy::Fixed(parse_num("group_policy", g)?)),
        ["linear", a, b] => Ok(GroupPolicy::Linear(parse_num("group_policy", a)?, parse_num("group_policy", b)?)),
        _ => config_err(format!("group_policy: expected stagewise, fixed:G or linear:A:B, got {v:?}")),
    }
}

/// Group size of every block, stage by stage.
pub fn pgs_schedule(policy: GroupPolicy, config: &ModelConfig) -> Result<Vec<Vec<usize>>> {
    let stages = &config.stages;
    let sched: Vec<Vec<usize>> = match policy {
        GroupPolicy::Stagewise => stages.iter().map(|s| vec![s.group_size; s.depth]).collect(),
        GroupPolicy::Fixed(g) => stages.iter().map(|s| vec![g; s.depth]).collect(),
        GroupPolicy::Linear(start, end) => {
            let (head, last) = stages.split_at(stages.len() - 1);
            let n: usize = head.iter().map(|s| s.depth).sum();
            let mut b = 0usize;
            let mut out = Vec::with_capacity(stages.len());
            for s in head {
                let mut v = Vec::with_capacity(s.depth);
                for _ in 0..s.depth {
                    let t = if n > 1 { b as f64 / (n - 1) as f64 } else { 0.0 };
                    v.push((start as f64 + (end as f64 - start as f64) * t).round() as usize);
                    b += 1;
                }
                out.push(v);
            }
            out.push(vec![last[0].group_size; last[0].depth]);
            out
        }
    };
    if sched.iter().flatten().any(|&g| g == 0) {
        return config_err("group sizes must be positive");
    }
    Ok(sched)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    pub stage: usize,
    /// Position within its stage.
    pub index: usize,
    /// Position in the whole network.
    pub global: usize,
    pub kind: AttentionKind,
    pub group_size: usize,
    pub interval: usize,
    pub followed_by_acl: bool,
    pub drop_path: f64,
}

/// Whether an ACL follows in-stage block `index` of a stage of `depth` blocks.
pub fn acl_after(acl_period: usize, index: usize, depth: usize) -> bool {
    acl_period > 0 && (index + 1) % acl_period == 0 && index + 1 < depth
}

/// Serialized block sequence of a configuration.
pub fn block_specs(config: &ModelConfig) -> Result<Vec<BlockSpec>> {
    let sched = pgs_schedule(config.group_policy, config)?;
    let total = config.total_blocks();
    let mut out = Vec::with_capacity(total);
    for (si, s) in config.stages.iter().enumerate() {
        for index in 0..s.depth {
            let global = out.len();
            let rate = if total > 1 { config.drop_path * (global as f64 / (total - 1) as f64) } else { 0.0 };
            out.push(BlockSpec {
                stage: si,
                index,
                global,
                kind: if index % 2 == 0 { AttentionKind::Sda } else { AttentionKind::Lda },
                group_size: sched[si][index],
                interval: s.interval,
                followed_by_acl: acl_after(config.acl_period, index, s.depth),
                drop_path: rate,
            });
        }
    }
    Ok(out)
}
