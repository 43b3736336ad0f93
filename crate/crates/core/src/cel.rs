//! Cross-scale embedding layer.
//!
//! Several square kernels of different sizes sample the input at one
//! shared stride. Each kernel `k` is padded by `(k - stride) / 2` so all
//! patches belonging to one output token share a centre, and the
//! per-kernel embeddings are concatenated along the channel axis in
//! ascending kernel order. Larger kernels receive fewer output channels.

use crate::autograd::Var;
use crate::error::{config_err, dim_err, Result};
use crate::params::{uniform_tensor, BoundParams, ParamId, ParamStore, SeededRng};
use crate::tensor::Tensor;

/// Default channel split for `kernel_sizes.len()` kernels.
///
/// Kernel `i < n-1` gets `total / 2^(i+1)`, the last one repeats the
/// previous share: four kernels give `[D/2, D/4, D/8, D/8]`, two give
/// `[D/2, D/2]`, one gives `[D]`.
pub fn allocate_dims(total_dim: usize, kernel_sizes: &[usize]) -> Result<Vec<usize>> {
    let n = kernel_sizes.len();
    if n == 0 {
        return config_err("cross-scale embedding needs at least one kernel");
    }
    let div = 1usize << (n - 1);
    if total_dim == 0 || total_dim % div != 0 {
        return config_err(format!(
            "embedding dim {total_dim} is not divisible by {div} for {n} kernels"
        ));
    }
    let mut dims: Vec<usize> = (0..n - 1).map(|i| total_dim >> (i + 1)).collect();
    dims.push(total_dim >> (n - 1));
    Ok(dims)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CelSpec {
    pub kernel_sizes: Vec<usize>,
    pub stride: usize,
    pub dims: Vec<usize>,
}

impl CelSpec {
    /// Spec with the default dimension allocation.
    pub fn new(kernel_sizes: Vec<usize>, stride: usize, total_dim: usize) -> Result<Self> {
        let dims = allocate_dims(total_dim, &kernel_sizes)?;
        Self::with_dims(kernel_sizes, stride, dims)
    }

    /// Spec with an explicit per-kernel allocation.
    pub fn with_dims(kernel_sizes: Vec<usize>, stride: usize, dims: Vec<usize>) -> Result<Self> {
        if kernel_sizes.is_empty() || kernel_sizes.len() != dims.len() {
            return config_err(format!("{} kernels but {} dims", kernel_sizes.len(), dims.len()));
        }
        if stride == 0 || dims.contains(&0) {
            return config_err("stride and per-kernel dims must be positive");
        }
        if kernel_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return config_err(format!("kernel sizes {kernel_sizes:?} must be strictly ascending"));
        }
        if dims.windows(2).any(|w| w[0] < w[1]) {
            return config_err(format!("dims {dims:?} must not grow with kernel size"));
        }
        for &k in &kernel_sizes {
            if k < stride || (k - stride) % 2 != 0 {
                return config_err(format!(
                    "kernel {k} cannot be centre-aligned at stride {stride} with symmetric padding"
                ));
            }
        }
        Ok(Self { kernel_sizes, stride, dims })
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn padding(&self, kernel: usize) -> usize {
        (kernel - self.stride) / 2
    }

    /// Output grid extent for an input extent, after padding up to a
    /// multiple of the stride.
    pub fn output_extent(&self, input: usize) -> usize {
        input.div_ceil(self.stride)
    }

    /// Extra zero rows/cols `(before, after)` needed to reach a stride multiple.
    pub fn stride_padding(&self, input: usize) -> (usize, usize) {
        let extra = self.output_extent(input) * self.stride - input;
        (extra / 2, extra - extra / 2)
    }
}

/// Weights plus biases of every kernel.
pub fn cel_param_count(spec: &CelSpec, in_dim: usize) -> usize {
    spec.kernel_sizes
        .iter()
        .zip(&spec.dims)
        .map(|(&k, &d)| k * k * in_dim * d + d)
        .sum()
}

/// Multiply-accumulate count for an `h x w` input.
pub fn cel_flops(spec: &CelSpec, in_dim: usize, h: usize, w: usize) -> u64 {
    let tokens = (spec.output_extent(h) * spec.output_extent(w)) as u64;
    spec.kernel_sizes
        .iter()
        .zip(&spec.dims)
        .map(|(&k, &d)| (k * k * in_dim * d) as u64 * tokens)
        .sum()
}

/// Embeds a channel-first image `[B, C, H, W]` into a token grid `[B, H', W', D]`.
pub fn apply_cel_image<'t>(x: &Var<'t>, spec: &CelSpec, convs: &[(Var<'t>, Var<'t>)]) -> Result<Var<'t>> {
    if x.shape().len() != 4 {
        return dim_err(format!("cross-scale embedding input must be [B,C,H,W], got {:?}", x.shape()));
    }
    if convs.len() != spec.kernel_sizes.len() {
        return dim_err(format!("{} kernels but {} weight pairs", spec.kernel_sizes.len(), convs.len()));
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let (top, bottom) = spec.stride_padding(h);
    let (left, right) = spec.stride_padding(w);
    let x = if top + bottom + left + right > 0 {
        x.pad_spatial(top, bottom, left, right)?
    } else {
        x.clone()
    };
    let mut parts = Vec::with_capacity(convs.len());
    for (&k, (wk, bk)) in spec.kernel_sizes.iter().zip(convs) {
        parts.push(x.conv2d(wk, bk, spec.stride, spec.padding(k))?);
    }
    let tape = x.tape();
    tape.concat(&parts, 1)?.permute(&[0, 2, 3, 1])
}

/// Embeds a token grid `[B, H, W, D]` into the next stage's grid.
pub fn apply_cel<'t>(grid: &Var<'t>, spec: &CelSpec, convs: &[(Var<'t>, Var<'t>)]) -> Result<Var<'t>> {
    if grid.shape().len() != 4 {
        return dim_err(format!("token grid must be [B,H,W,D], got {:?}", grid.shape()));
    }
    apply_cel_image(&grid.permute(&[0, 3, 1, 2])?, spec, convs)
}

/// Parameter handles of one cross-scale embedding layer.
#[derive(Clone, Debug)]
pub struct CelLayer {
    pub spec: CelSpec,
    pub in_dim: usize,
    convs: Vec<(ParamId, ParamId)>,
}

impl CelLayer {
    pub fn init(store: &mut ParamStore, rng: &mut SeededRng, prefix: &str, spec: CelSpec, in_dim: usize) -> Result<Self> {
        let mut convs = Vec::with_capacity(spec.kernel_sizes.len());
        for (&k, &d) in spec.kernel_sizes.iter().zip(&spec.dims) {
            let bound = 1.0 / ((in_dim * k * k) as f64).sqrt();
            let w = store.add(format!("{prefix}.k{k}.weight"), uniform_tensor(rng, &[d, in_dim, k, k], bound))?;
            let b = store.add(format!("{prefix}.k{k}.bias"), Tensor::zeros(vec![d]))?;
            convs.push((w, b));
        }
        Ok(Self { spec, in_dim, convs })
    }

    pub fn conv_ids(&self) -> &[(ParamId, ParamId)] {
        &self.convs
    }

    fn bound<'t>(&self, p: &BoundParams<'t>) -> Vec<(Var<'t>, Var<'t>)> {
        self.convs.iter().map(|&(w, b)| (p.get(w).clone(), p.get(b).clone())).collect()
    }

    pub fn forward_image<'t>(&self, p: &BoundParams<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        apply_cel_image(x, &self.spec, &self.bound(p))
    }

    pub fn forward<'t>(&self, p: &BoundParams<'t>, grid: &Var<'t>) -> Result<Var<'t>> {
        apply_cel(grid, &self.spec, &self.bound(p))
    }

    pub fn param_count(&self) -> usize {
        cel_param_count(&self.spec, self.in_dim)
    }
}
