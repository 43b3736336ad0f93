//! Verification suites behind `xfmr check`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossformer::cel::{apply_cel_image, CelSpec};
use crossformer::dpb::{build_bias_table, dpb_forward, gather_bias_for, interpolate_rpb, DpbNet, InterpMode};
use crossformer::gradcheck::finite_diff_check_many;
use crossformer::lsda::{group_attention, AttentionWeights, GroupLayout};
use crossformer::model::{acl_forward, AclParams, Mode};
use crossformer::params::{normal_tensor, seeded_rng, BoundParams};
use crossformer::{Model, ModelConfig, ParamStore, Result, Tape, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
pub const SOFTMAX_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Grads,
    Dpb,
    Layout,
    Softmax,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "grads" => Suite::Grads,
            "dpb" => Suite::Dpb,
            "layout" => Suite::Layout,
            "softmax" => Suite::Softmax,
            "all" => Suite::All,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub observed: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckOutcome {
    fn at_most(name: impl Into<String>, observed: f64, tolerance: f64) -> Self {
        Self { name: name.into(), observed, tolerance, pass: observed <= tolerance }
    }

    pub fn line(&self) -> String {
        format!(
            "{:<40} observed {:.3e}  tolerance {:.1e}  {}",
            self.name,
            self.observed,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

pub fn run_suite(suite: Suite) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Layout | Suite::All) {
        out.push(check_layouts(16, 8, 4));
    }
    if matches!(suite, Suite::Dpb | Suite::All) {
        out.extend(check_dpb(&[1, 3, 7, 14])?);
    }
    if matches!(suite, Suite::Softmax | Suite::All) {
        out.push(check_softmax(2000, 0));
    }
    if matches!(suite, Suite::Grads | Suite::All) {
        out.extend(check_grads(0)?);
    }
    Ok(out)
}

/// Whether every token maps to one `(group, slot)` and back, every group
/// has `G^2` slots, and no slot is used twice.
pub fn layout_is_bijection(l: &GroupLayout) -> bool {
    let gg = l.slots_per_group();
    if l.slot_table().len() != l.n_groups() * gg {
        return false;
    }
    let mut seen = vec![false; l.n_tokens()];
    for (k, s) in l.slot_table().iter().enumerate() {
        if let Some(t) = *s {
            if t >= seen.len() || seen[t] {
                return false;
            }
            seen[t] = true;
            if l.assignment(t / l.cols, t % l.cols) != (k / gg, k % gg) {
                return false;
            }
        }
    }
    seen.iter().all(|&b| b)
}

/// Number of failing layouts over every grid, group size and interval up to the bounds.
pub fn check_layouts(max_side: usize, max_group: usize, max_interval: usize) -> CheckOutcome {
    let mut bad = 0usize;
    for h in 1..=max_side {
        for w in 1..=max_side {
            for g in 1..=max_group {
                let sda = GroupLayout::sda(h, w, g).expect("positive extents");
                bad += usize::from(!layout_is_bijection(&sda));
                for i in 1..=max_interval {
                    let lda = GroupLayout::lda(h, w, g, i).expect("positive extents");
                    bad += usize::from(!layout_is_bijection(&lda));
                    if i == 1 {
                        bad += usize::from(lda.slot_table() != sda.slot_table());
                    }
                }
            }
        }
    }
    CheckOutcome::at_most(format!("layout bijection S<={max_side} G<={max_group} I<={max_interval}"), bad as f64, 0.0)
}

/// Table-gathered bias against per-pair evaluation, and evaluation counts.
pub fn check_dpb(groups: &[usize]) -> Result<Vec<CheckOutcome>> {
    let mut store = ParamStore::new();
    let net = DpbNet::init(&mut store, &mut seeded_rng(11), "dpb", 32, 4)?;
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let mut out = Vec::new();
    for &g in groups {
        net.reset_evaluations();
        let table = build_bias_table(&net, &p, g)?;
        let evals = net.evaluations();
        let fast = gather_bias_for(&table)?;
        let gg = g * g;
        let mut mismatches = 0usize;
        for i in 0..gg {
            for j in 0..gg {
                let dx = (i / g) as i64 - (j / g) as i64;
                let dy = (i % g) as i64 - (j % g) as i64;
                let direct = dpb_forward(&net, &p, dx, dy)?;
                for h in 0..net.heads_out {
                    if direct.value().data()[h].to_bits() != fast.value().get(&[h, i, j]).to_bits() {
                        mismatches += 1;
                    }
                }
            }
        }
        out.push(CheckOutcome::at_most(format!("dpb table == per-pair, G={g}"), mismatches as f64, 0.0));
        let expect = ((2 * g - 1) * (2 * g - 1)) as u64;
        out.push(CheckOutcome::at_most(
            format!("dpb evaluations == (2G-1)^2, G={g}"),
            evals.abs_diff(expect) as f64,
            0.0,
        ));
    }
    Ok(out)
}

/// Worst `|sum - 1|` of softmax rows with entries up to `1e4` in magnitude.
pub fn check_softmax(rows: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..rows {
        let n = rng.random_range(1..64);
        let scale = 10f64.powf(rng.random_range(-2.0..4.0));
        let x = Tensor::from_fn(vec![n], |_| rng.random_range(-scale..=scale));
        let s: f64 = crossformer::tensor::softmax(&x).data().iter().sum();
        worst = worst.max((s - 1.0).abs());
    }
    CheckOutcome::at_most("softmax rows sum to 1, |x|<=1e4", worst, SOFTMAX_TOL)
}

fn probe_weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// `c * sum(out * r)`, with `c` chosen at the base point so the probe stays near `1e-2`.
pub fn probe<'t>(out: &Var<'t>, r: &Tensor, c: f64) -> Result<Var<'t>> {
    Ok(out.mul(&out.tape().constant(r.clone()))?.sum().scale(c))
}

/// Gradient check of `f` probed by a fixed random projection.
pub fn probed_check<F>(name: &str, at: &[Tensor], seed: u64, f: F) -> Result<CheckOutcome>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vs: Vec<Var<'_>> = at.iter().map(|t| tape.constant(t.clone())).collect();
    let base = f(&vs)?;
    let r = probe_weights(&mut ChaCha8Rng::seed_from_u64(seed), base.shape());
    let f0 = base.value().data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>().abs();
    let c = 1e-2 / (1.0 + f0);
    let report = finite_diff_check_many(|xs| probe(&f(xs)?, &r, c), at, GRAD_STEP)?;
    Ok(CheckOutcome::at_most(format!("grad {name}"), report.worst(), GRAD_TOL))
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    normal_tensor(rng, shape, 1.0)
}

/// Gradient check of a full model's loss over every parameter.
pub fn model_gradcheck(model: &Model, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let at: Vec<Tensor> = model.params.iter().map(|(_, p)| p.value.clone()).collect();
    let report = finite_diff_check_many(
        |xs| {
            let p = BoundParams::from_vars(xs.to_vec());
            let x = xs[0].tape().constant(images.clone());
            Ok(model.forward(&p, &x, Mode::Eval)?.logits.cross_entropy(labels)?.scale(1e-2))
        },
        &at,
        GRAD_STEP,
    )?;
    Ok(report.worst())
}

/// Tiny config with ACLs between every pair of blocks, used for gradient checks.
pub fn cooled_tiny() -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    cfg.name = "tiny-acl".into();
    cfg.acl_period = 1;
    cfg.stages[0].depth = 2;
    cfg
}

pub fn check_grads(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let s = seed;

    let at = [rand_t(&mut rng, &[2, 3, 4]), rand_t(&mut rng, &[4, 5])];
    out.push(probed_check("matmul", &at, s, |x| x[0].matmul(&x[1]))?);
    let at = [rand_t(&mut rng, &[1, 2, 6, 6]), rand_t(&mut rng, &[3, 2, 3, 3]), rand_t(&mut rng, &[3])];
    out.push(probed_check("conv2d", &at, s, |x| x[0].conv2d(&x[1], &x[2], 2, 1))?);
    let at = [rand_t(&mut rng, &[1, 3, 5, 5]), rand_t(&mut rng, &[3, 3, 3]), rand_t(&mut rng, &[3])];
    out.push(probed_check("depthwise_conv2d", &at, s, |x| x[0].depthwise_conv2d(&x[1], &x[2], 1, 1))?);
    let at = [rand_t(&mut rng, &[4, 8]), rand_t(&mut rng, &[8]), rand_t(&mut rng, &[8])];
    out.push(probed_check("layer_norm", &at, s, |x| x[0].layer_norm(&x[1], &x[2], 1e-5))?);
    let at = [rand_t(&mut rng, &[3, 5])];
    out.push(probed_check("softmax", &at, s, |x| Ok(x[0].softmax()))?);
    out.push(probed_check("gelu", &at, s, |x| Ok(x[0].gelu()))?);
    let away = at[0].map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    out.push(probed_check("relu", &[away], s, |x| Ok(x[0].relu()))?);
    let at = [rand_t(&mut rng, &[5, 3])];
    out.push(probed_check("gather_rows", &at, s, |x| x[0].gather_rows(&[4, 0, 0, 2]))?);
    let at = [rand_t(&mut rng, &[2, 3]), rand_t(&mut rng, &[2, 2])];
    out.push(probed_check("concat", &at, s, |x| x[0].tape().concat(&[x[0].clone(), x[1].clone()], 1))?);
    let at = [rand_t(&mut rng, &[3, 4, 2])];
    out.push(probed_check("mean_axis", &at, s, |x| x[0].mean_axis(1))?);
    let distinct = Tensor::from_fn(vec![3, 4], |i| (i[0] * 4 + i[1]) as f64 * 0.37 % 1.3);
    out.push(probed_check("max_axis", &[distinct], s, |x| x[0].max_axis(1))?);
    let at = [rand_t(&mut rng, &[4, 5])];
    out.push(probed_check("cross_entropy", &at, s, |x| x[0].cross_entropy(&[0, 3, 4, 1]))?);

    let spec = CelSpec::new(vec![2, 4], 2, 4)?;
    let at = [
        rand_t(&mut rng, &[1, 3, 7, 7]),
        rand_t(&mut rng, &[2, 3, 2, 2]),
        rand_t(&mut rng, &[2]),
        rand_t(&mut rng, &[2, 3, 4, 4]),
        rand_t(&mut rng, &[2]),
    ];
    out.push(probed_check("cross-scale embedding", &at, s, |x| {
        apply_cel_image(&x[0], &spec, &[(x[1].clone(), x[2].clone()), (x[3].clone(), x[4].clone())])
    })?);

    let layout = GroupLayout::lda(5, 5, 2, 2)?;
    let d = 8;
    let mut at = vec![rand_t(&mut rng, &[1, 5, 5, d])];
    for shape in [vec![d, d], vec![d], vec![d, d], vec![d, d], vec![d], vec![d, d], vec![d]] {
        at.push(normal_tensor(&mut rng, &shape, 0.5));
    }
    at.push(rand_t(&mut rng, &[2, 4, 4]));
    out.push(probed_check("grouped attention (padded)", &at, s, |x| {
        let w = AttentionWeights {
            heads: 2,
            wq: x[1].clone(),
            bq: x[2].clone(),
            wk: x[3].clone(),
            wv: x[4].clone(),
            bv: x[5].clone(),
            wo: x[6].clone(),
            bo: x[7].clone(),
        };
        Ok(group_attention(&x[0], &layout, &w, &x[8])?.out)
    })?);

    let mut store = ParamStore::new();
    let net = DpbNet::init(&mut store, &mut seeded_rng(seed + 1), "dpb", 16, 2)?;
    let at: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
    out.push(probed_check("position bias network", &at, s, |x| {
        let p = BoundParams::from_vars(x.to_vec());
        gather_bias_for(&build_bias_table(&net, &p, 3)?)
    })?);

    let at = [rand_t(&mut rng, &[2, 5, 5])];
    out.push(probed_check("online interpolated table", &at, s, |x| interpolate_rpb(&x[0], 4, InterpMode::Online))?);

    let mut store = ParamStore::new();
    let acl = AclParams::init(&mut store, &mut seeded_rng(seed + 2), "acl", 4)?;
    let mut at: Vec<Tensor> = store.iter().map(|(_, p)| p.value.map(|v| v + 0.1)).collect();
    at.push(rand_t(&mut rng, &[1, 3, 3, 4]));
    out.push(probed_check("amplitude cooling layer", &at, s, |x| {
        let n = x.len() - 1;
        acl_forward(&x[n], &BoundParams::from_vars(x[..n].to_vec()), &acl)
    })?);

    let ds = crate::toy::ToyDataset::new(32, 3, seed);
    let (images, labels) = ds.batch(0, 2);
    let cooled = Model::new(cooled_tiny(), seed)?;
    out.push(CheckOutcome::at_most("grad blocks + cooling layers (all params)", model_gradcheck(&cooled, &images, &labels)?, GRAD_TOL));
    let tiny = Model::new(ModelConfig::tiny(), seed)?;
    out.push(CheckOutcome::at_most("grad tiny model (all params)", model_gradcheck(&tiny, &images, &labels)?, GRAD_TOL));
    Ok(out)
}
