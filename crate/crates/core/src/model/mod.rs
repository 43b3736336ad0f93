//! Stage pyramid, blocks, amplitude cooling layers and classification head.

mod checkpoint;
mod config;
mod count;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC};
pub use config::{
    acl_after, block_specs, pgs_schedule, BlockSpec, GroupPolicy, ModelConfig, PositionBias, StageConfig, VARIANTS,
};
pub use count::{count_flops, count_params, FlopBreakdown};

use crate::autograd::{Tape, Var};
use crate::cel::CelLayer;
use crate::dpb::{build_bias_table, gather_bias_for, BiasCache, BiasTable, DpbNet};
use crate::error::{dim_err, Result};
use crate::lsda::{group_attention, AttentionKind, AttentionParams, GroupLayout};
use crate::params::{normal_tensor, seeded_rng, uniform_tensor, BoundParams, ParamId, ParamStore, SeededRng};
use crate::tensor::{Tensor, LAYER_NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(vec![dim]))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(vec![dim]))?,
        })
    }

    pub fn forward<'t>(&self, p: &BoundParams<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), LAYER_NORM_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    fn init(store: &mut ParamStore, rng: &mut SeededRng, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{prefix}.w"), normal_tensor(rng, &[d_in, d_out], 0.02))?,
            b: store.add(format!("{prefix}.b"), Tensor::zeros(vec![d_out]))?,
        })
    }

    pub fn forward<'t>(&self, p: &BoundParams<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        x.linear(p.get(self.w), p.get(self.b))
    }
}

/// Depthwise 3x3 convolution followed by layer norm, with no skip path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AclParams {
    pub w: ParamId,
    pub b: ParamId,
    pub norm: NormParams,
}

pub const ACL_KERNEL: usize = 3;

impl AclParams {
    pub fn init(store: &mut ParamStore, rng: &mut SeededRng, prefix: &str, dim: usize) -> Result<Self> {
        let k = ACL_KERNEL;
        Ok(Self {
            w: store.add(format!("{prefix}.conv.w"), uniform_tensor(rng, &[dim, k, k], 1.0 / k as f64))?,
            b: store.add(format!("{prefix}.conv.b"), Tensor::zeros(vec![dim]))?,
            norm: NormParams::init(store, &format!("{prefix}.norm"), dim)?,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        ACL_KERNEL * ACL_KERNEL * dim + 3 * dim
    }
}

/// `[B, H, W, D]` grid through the amplitude cooling layer.
pub fn acl_forward<'t>(x: &Var<'t>, p: &BoundParams<'t>, acl: &AclParams) -> Result<Var<'t>> {
    if x.shape().len() != 4 {
        return dim_err(format!("token grid must be [B,H,W,D], got {:?}", x.shape()));
    }
    let y = x
        .permute(&[0, 3, 1, 2])?
        .depthwise_conv2d(p.get(acl.w), p.get(acl.b), 1, ACL_KERNEL / 2)?
        .permute(&[0, 2, 3, 1])?;
    acl.norm.forward(p, &y)
}

#[derive(Clone, Debug)]
pub enum PositionParams {
    Dpb(DpbNet),
    Rpb(ParamId),
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub norm1: NormParams,
    pub attn: AttentionParams,
    pub position: PositionParams,
    pub norm2: NormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl BlockParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        prefix: &str,
        config: &ModelConfig,
        spec: &BlockSpec,
    ) -> Result<Self> {
        let dim = config.stages[spec.stage].dim;
        let heads = config.stages[spec.stage].heads;
        let hidden = config.mlp_ratio * dim;
        let norm1 = NormParams::init(store, &format!("{prefix}.norm1"), dim)?;
        let attn = AttentionParams::init(store, rng, &format!("{prefix}.attn"), dim, heads)?;
        let position = match config.position_bias {
            PositionBias::Dpb => {
                PositionParams::Dpb(DpbNet::init(store, rng, &format!("{prefix}.dpb"), dim, config.heads_out(spec.stage))?)
            }
            PositionBias::Rpb => PositionParams::Rpb(crate::dpb::rpb_table(
                store,
                rng,
                &format!("{prefix}.rpb"),
                config.heads_out(spec.stage),
                spec.group_size,
            )?),
        };
        let norm2 = NormParams::init(store, &format!("{prefix}.norm2"), dim)?;
        let fc1 = LinearParams::init(store, rng, &format!("{prefix}.fc1"), dim, hidden)?;
        let fc2 = LinearParams::init(store, rng, &format!("{prefix}.fc2"), hidden, dim)?;
        Ok(Self { norm1, attn, position, norm2, fc1, fc2 })
    }

    /// Bias table for group size `g`.
    pub fn bias_table<'t>(&self, p: &BoundParams<'t>, g: usize) -> Result<BiasTable<'t>> {
        match &self.position {
            PositionParams::Dpb(net) => build_bias_table(net, p, g),
            PositionParams::Rpb(id) => BiasTable::new(g, p.get(*id).clone()),
        }
    }
}

/// Evaluation mode, or training with a generator for stochastic depth.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut SeededRng),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Block(AttentionKind),
    Acl,
}

/// Output of one block or ACL, captured during a forward pass.
#[derive(Clone, Debug)]
pub struct Capture {
    pub stage: usize,
    /// Global index of the block (or of the block an ACL follows).
    pub block: usize,
    pub kind: LayerKind,
    pub output: Tensor,
    /// Attention probabilities `[B, n_groups, H, G^2, G^2]` for blocks.
    pub attn: Option<Tensor>,
    pub group_size: usize,
    /// Indices of groups without padding.
    pub full_groups: Vec<usize>,
}

pub struct ForwardOutput<'t> {
    pub logits: Var<'t>,
    /// Grid entering each stage's blocks, `[B, S, S, D]`.
    pub stage_inputs: Vec<Tensor>,
    pub captures: Vec<Capture>,
}

/// Residual block `x + A(LN(x))`, then `+ MLP(LN(.))`. Returns the output
/// and the attention probabilities.
pub fn block_forward<'t>(
    x: &Var<'t>,
    spec: &BlockSpec,
    params: &BlockParams,
    p: &BoundParams<'t>,
    bias: &Var<'t>,
    mode: &mut Mode<'_>,
) -> Result<(Var<'t>, Tensor)> {
    let s = x.shape();
    if s.len() != 4 || s[3] != params.attn.dim {
        return dim_err(format!("block of dim {} given grid {:?}", params.attn.dim, s));
    }
    let layout = GroupLayout::new(spec.kind, s[1], s[2], spec.group_size, spec.interval)?;
    let h = params.norm1.forward(p, x)?;
    let a = group_attention(&h, &layout, &params.attn.bind(p), bias)?;
    let x = x.add(&drop_path(&a.out, spec.drop_path, mode)?)?;
    let h = params.norm2.forward(p, &x)?;
    let m = params.fc2.forward(p, &params.fc1.forward(p, &h)?.gelu())?;
    let x = x.add(&drop_path(&m, spec.drop_path, mode)?)?;
    Ok((x, a.attn))
}

fn drop_path<'t>(x: &Var<'t>, rate: f64, mode: &mut Mode<'_>) -> Result<Var<'t>> {
    let Mode::Train(rng) = mode else { return Ok(x.clone()) };
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    use rand::Rng;
    let b = x.shape()[0];
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..b).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    let mut shape = vec![1; x.shape().len()];
    shape[0] = b;
    x.mul(&x.tape().constant(Tensor::new(shape, mask)?))
}

#[derive(Clone, Debug)]
pub struct StageParams {
    pub cel: CelLayer,
    pub blocks: Vec<BlockParams>,
    /// ACL following each block, when placed.
    pub acls: Vec<Option<AclParams>>,
}

/// Architecture description plus the parameter store it owns.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub specs: Vec<BlockSpec>,
    pub stages: Vec<StageParams>,
    pub head: LinearParams,
    pub params: ParamStore,
    cache: BiasCache,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            specs: self.specs.clone(),
            stages: self.stages.clone(),
            head: self.head,
            params: self.params.clone(),
            cache: BiasCache::new(),
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = block_specs(&config)?;
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut in_dim = config.in_chans;
        for (si, s) in config.stages.iter().enumerate() {
            let cel = CelLayer::init(&mut store, &mut rng, &format!("stage{}.cel", si + 1), config.cel_spec(si)?, in_dim)?;
            let mut blocks = Vec::with_capacity(s.depth);
            let mut acls = Vec::with_capacity(s.depth);
            for spec in specs.iter().filter(|b| b.stage == si) {
                let prefix = format!("stage{}.block{}", si + 1, spec.index + 1);
                blocks.push(BlockParams::init(&mut store, &mut rng, &prefix, &config, spec)?);
                acls.push(if spec.followed_by_acl {
                    Some(AclParams::init(&mut store, &mut rng, &format!("{prefix}.acl"), s.dim)?)
                } else {
                    None
                });
            }
            stages.push(StageParams { cel, blocks, acls });
            in_dim = s.dim;
        }
        let head = LinearParams::init(&mut store, &mut rng, "head", in_dim, config.num_classes)?;
        Ok(Self { config, specs, stages, head, params: store, cache: BiasCache::new() })
    }

    /// Differentiable forward pass with parameters bound on `p`'s tape.
    pub fn forward<'t>(&self, p: &BoundParams<'t>, images: &Var<'t>, mode: Mode<'_>) -> Result<ForwardOutput<'t>> {
        self.run(p, images, mode, false, false)
    }

    /// Eval-mode logits; the position bias of each block comes from a
    /// cache tied to the current parameter version.
    pub fn infer(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        Ok(self.run(&p, &tape.constant(images.clone()), Mode::Eval, false, true)?.logits.value().clone())
    }

    /// Eval-mode forward recording every block and ACL output.
    pub fn capture(&self, images: &Tensor) -> Result<(Tensor, Vec<Tensor>, Vec<Capture>)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.run(&p, &tape.constant(images.clone()), Mode::Eval, true, true)?;
        Ok((out.logits.value().clone(), out.stage_inputs, out.captures))
    }

    fn block_bias<'t>(&self, p: &BoundParams<'t>, spec: &BlockSpec, use_cache: bool) -> Result<Var<'t>> {
        let block = &self.stages[spec.stage].blocks[spec.index];
        let g = spec.group_size;
        let tape = p.vars()[0].tape();
        if use_cache {
            let t = self.cache.get_or_build(spec.global, g, self.params.version(), || {
                Ok(gather_bias_for(&block.bias_table(p, g)?)?.value().clone())
            })?;
            return Ok(tape.constant(t));
        }
        gather_bias_for(&block.bias_table(p, g)?)
    }

    fn run<'t>(
        &self,
        p: &BoundParams<'t>,
        images: &Var<'t>,
        mut mode: Mode<'_>,
        capture: bool,
        use_cache: bool,
    ) -> Result<ForwardOutput<'t>> {
        if p.vars().len() != self.params.len() {
            return dim_err(format!("{} bound parameters for a model with {}", p.vars().len(), self.params.len()));
        }
        for ((_, param), v) in self.params.iter().zip(p.vars()) {
            if param.value.shape() != v.shape() {
                return dim_err(format!("parameter {} has shape {:?}, bound {:?}", param.name, param.value.shape(), v.shape()));
            }
        }
        let s = images.shape();
        if s.len() != 4 || s[1] != self.config.in_chans {
            return dim_err(format!("images must be [B,{},H,W], got {s:?}", self.config.in_chans));
        }
        let mut stage_inputs = Vec::with_capacity(self.stages.len());
        let mut captures = Vec::new();
        let mut x = images.clone();
        for (si, stage) in self.stages.iter().enumerate() {
            x = if si == 0 { stage.cel.forward_image(p, &x)? } else { stage.cel.forward(p, &x)? };
            stage_inputs.push(x.value().clone());
            for (spec, (block, acl)) in self.specs.iter().filter(|b| b.stage == si).zip(stage.blocks.iter().zip(&stage.acls)) {
                let bias = self.block_bias(p, spec, use_cache)?;
                let (y, attn) = block_forward(&x, spec, block, p, &bias, &mut mode)?;
                x = y;
                if capture {
                    let layout = GroupLayout::new(spec.kind, x.shape()[1], x.shape()[2], spec.group_size, spec.interval)?;
                    captures.push(Capture {
                        stage: si,
                        block: spec.global,
                        kind: LayerKind::Block(spec.kind),
                        output: x.value().clone(),
                        attn: Some(attn),
                        group_size: spec.group_size,
                        full_groups: (0..layout.n_groups()).filter(|&g| layout.group_is_full(g)).collect(),
                    });
                }
                if let Some(acl) = acl {
                    x = acl_forward(&x, p, acl)?;
                    if capture {
                        captures.push(Capture {
                            stage: si,
                            block: spec.global,
                            kind: LayerKind::Acl,
                            output: x.value().clone(),
                            attn: None,
                            group_size: spec.group_size,
                            full_groups: Vec::new(),
                        });
                    }
                }
            }
        }
        let (b, h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let pooled = x.reshape(vec![b, h * w, d])?.mean_axis(1)?;
        let logits = self.head.forward(p, &pooled)?;
        Ok(ForwardOutput { logits, stage_inputs, captures })
    }

    /// Binary checkpoint of the current parameters.
    pub fn checkpoint(&self) -> Vec<u8> {
        encode_checkpoint(&self.config, &self.params)
    }

    /// Replaces every parameter with the checkpoint's values.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<()> {
        let tensors = decode_checkpoint(bytes, &self.config)?;
        if tensors.len() != self.params.len() {
            return Err(crate::Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                tensors.len(),
                self.params.len()
            )));
        }
        let ids: Vec<ParamId> = self.params.iter().map(|(id, _)| id).collect();
        for (id, (name, t)) in ids.into_iter().zip(tensors) {
            if self.params.param(id).name != name {
                return Err(crate::Error::Checkpoint(format!(
                    "expected tensor {}, found {name}",
                    self.params.param(id).name
                )));
            }
            self.params
                .set_value(id, t)
                .map_err(|e| crate::Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }
}
