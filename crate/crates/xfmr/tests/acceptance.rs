#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use common::{naive_attention, rand, Raw};
use crossformer::diagnostics::{amplitude_trace, average_attention, expected_trace_rows};
use crossformer::dpb::gather_bias_for;
use crossformer::lsda::{group_attention, AttentionKind, GroupLayout};
use crossformer::model::{acl_forward, block_forward, block_specs, count_flops, count_params, Mode, VARIANTS};
use crossformer::tensor::softmax;
use crossformer::{Model, ModelConfig, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xfmr::checks::{check_dpb, check_grads, check_layouts, GRAD_TOL};
use xfmr::report::{published_counts, FLOP_TOL, PARAM_TOL};
use xfmr::train::{train_toy, TrainConfig};

const ATTENTION_TOL: f64 = 1e-10;
const AVERAGE_TOL: f64 = 1e-12;
const MAP_SUM_TOL: f64 = 1e-6;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn criterion(n: usize, name: &str, limit_s: f64, f: impl FnOnce() -> Verdict) -> bool {
    let t = Instant::now();
    let v = f();
    let secs = t.elapsed().as_secs_f64();
    let pass = v.pass && secs < limit_s;
    println!(
        "{} {n:>2} {name}: {} [{secs:.1}s, limit {limit_s:.0}s]",
        if pass { "PASS" } else { "FAIL" },
        v.detail
    );
    pass
}

fn relative_gap(observed: f64, target: f64) -> f64 {
    (observed - target).abs() / target
}

fn param_counts() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut all = true;
    for name in VARIANTS {
        let (target, _) = published_counts(name).expect("published variant");
        let gap = relative_gap(count_params(&ModelConfig::variant(name).unwrap()).unwrap() as f64 / 1e6, target);
        worst = worst.max(gap);
        all &= gap <= PARAM_TOL;
    }
    verdict(all, format!("worst deviation {:.2}% over 8 variants, tolerance {:.0}%", worst * 100.0, PARAM_TOL * 100.0))
}

fn flop_counts() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut all = true;
    for name in VARIANTS {
        let (_, target) = published_counts(name).expect("published variant");
        let flops = count_flops(&ModelConfig::variant(name).unwrap(), 224).unwrap().total() as f64 / 1e9;
        let gap = relative_gap(flops, target);
        worst = worst.max(gap);
        all &= gap <= FLOP_TOL;
    }
    verdict(all, format!("worst deviation {:.2}% at 224px, tolerance {:.0}%", worst * 100.0, FLOP_TOL * 100.0))
}

fn dpb_equivalence() -> Verdict {
    let out = check_dpb(&[1, 3, 7, 14]).unwrap();
    let failed: Vec<&str> = out.iter().filter(|o| !o.pass).map(|o| o.name.as_str()).collect();
    verdict(failed.is_empty(), format!("{} bitwise/count checks for G in {{1,3,7,14}}, failed {failed:?}", out.len()))
}

fn layout_bijection() -> Verdict {
    let o = check_layouts(16, 8, 4);
    verdict(o.pass, format!("{} failing layouts over S<=16, G<=8, I<=4", o.observed))
}

fn attention_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let configs = 64;
    for k in 0..configs {
        let heads = rng.random_range(1..4);
        let dim = heads * rng.random_range(1..5);
        let (rows, cols) = (rng.random_range(1..10), rng.random_range(1..10));
        let g = rng.random_range(1..5);
        let kind = if k % 2 == 0 { AttentionKind::Sda } else { AttentionKind::Lda };
        let layout = GroupLayout::new(kind, rows, cols, g, rng.random_range(1..4)).unwrap();
        let batch = rng.random_range(1..3);
        let x = rand(k, &[batch, rows, cols, dim], 1.0);
        let raw = Raw::random(k + 1000, dim, heads);
        let bias = rand(k + 2000, &[heads, g * g, g * g], 1.0);
        let tape = Tape::new();
        let got = group_attention(&tape.constant(x.clone()), &layout, &raw.bind(&tape), &tape.constant(bias.clone())).unwrap();
        worst = worst.max(got.out.value().max_abs_diff(&naive_attention(&x, &layout, &raw, &bias)));
    }
    verdict(worst < ATTENTION_TOL, format!("{configs} random configs, worst |diff| {worst:.2e}, tolerance {ATTENTION_TOL:.0e}"))
}

fn gradient_integrity() -> Verdict {
    let out = check_grads(0).unwrap();
    let worst = out.iter().map(|o| o.observed).fold(0.0, f64::max);
    let failed: Vec<&str> = out.iter().filter(|o| !o.pass).map(|o| o.name.as_str()).collect();
    verdict(
        failed.is_empty(),
        format!("{} checks incl. full tiny model, worst rel err {worst:.2e}, tolerance {GRAD_TOL:.0e}, failed {failed:?}", out.len()),
    )
}

fn structural() -> Verdict {
    let mut notes = Vec::new();

    let model = Model::new(ModelConfig::variant("crossformer++-s").unwrap(), 0).unwrap();
    let (_, inputs, _) = model.capture(&rand(1, &[1, 3, 224, 224], 1.0)).unwrap();
    let pyramid = inputs.windows(2).all(|w| {
        let (a, b) = (w[0].shape(), w[1].shape());
        a[1] * a[2] == 4 * b[1] * b[2] && 2 * a[3] == b[3]
    }) && inputs[0].shape()[1..] == [56, 56, 64];
    notes.push(format!("pyramid {pyramid}"));

    let alternation = VARIANTS.iter().all(|n| {
        block_specs(&ModelConfig::variant(n).unwrap())
            .unwrap()
            .iter()
            .all(|b| b.kind == if b.index % 2 == 0 { AttentionKind::Sda } else { AttentionKind::Lda })
    });
    notes.push(format!("alternation {alternation}"));

    let mut cfg = ModelConfig::tiny();
    cfg.stages[0].depth = 2;
    cfg.acl_period = 1;
    let mut m = Model::new(cfg, 1).unwrap();
    let ids: Vec<_> = m.params.iter().filter(|(_, p)| p.name.starts_with("stage1.block")).map(|(id, _)| id).collect();
    for id in ids {
        let shape = m.params.value(id).shape().to_vec();
        m.params.set_value(id, Tensor::zeros(shape)).unwrap();
    }
    let x = rand(2, &[2, 8, 8, 16], 3.0);
    let tape = Tape::new();
    let p = m.params.bind(&tape, false);
    let identity = m.specs.iter().filter(|s| s.stage == 0).all(|spec| {
        let block = &m.stages[0].blocks[spec.index];
        let bias = gather_bias_for(&block.bias_table(&p, spec.group_size).unwrap()).unwrap();
        let y = block_forward(&tape.constant(x.clone()), spec, block, &p, &bias, &mut Mode::Eval).unwrap().0;
        y.value().data() == x.data()
    });
    notes.push(format!("zero block identity {identity}"));

    let acl = m.stages[0].acls[0].unwrap();
    let a = acl_forward(&tape.constant(x.clone()), &p, &acl).unwrap();
    let b = acl_forward(&tape.constant(rand(3, &[2, 8, 8, 16], 7.0)), &p, &acl).unwrap();
    let first = a.value().data()[..16].to_vec();
    let constant = a.value().data() == b.value().data() && a.value().data().chunks(16).all(|c| c == first.as_slice());
    notes.push(format!("zero-conv ACL constant {constant}"));

    let mut unit = true;
    for r in 1..=12 {
        for c in 1..=12 {
            for g in 1..=6 {
                unit &= GroupLayout::sda(r, c, g).unwrap().slot_table() == GroupLayout::lda(r, c, g, 1).unwrap().slot_table();
            }
        }
    }
    notes.push(format!("I=1 equals SDA {unit}"));

    verdict(pyramid && alternation && identity && constant && unit, notes.join(", "))
}

fn trainability() -> Verdict {
    let mut accs = Vec::new();
    let mut decreasing = 0;
    for seed in 0..5u64 {
        let (_, r) = train_toy(&ModelConfig::tiny(), &TrainConfig { seed, ..TrainConfig::default() }).unwrap();
        let early: f64 = r.losses[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = r.losses[40..50].iter().sum::<f64>() / 10.0;
        decreasing += usize::from(late < early && !r.diverged);
        accs.push(r.accuracy);
    }
    let chance = 1.0 / xfmr::toy::CLASSES as f64;
    let pass = accs[0] >= 0.95 && accs.iter().all(|&a| a >= chance + 0.5) && decreasing >= 4;
    verdict(
        pass,
        format!(
            "held-out accuracy per seed {:?} (seed 0 >= 0.95, all >= {:.2}); loss fell over steps 0-49 in {decreasing}/5 seeds",
            accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>(),
            chance + 0.5
        ),
    )
}

fn diagnostics_fidelity() -> Verdict {
    let (b, h, g) = (3, 4, 4);
    let attn = softmax(&rand(4, &[b, h, g, g, g * g], 2.0)).reshape(vec![b, h, g, g, g, g]).unwrap();
    let avg = average_attention(&attn).unwrap();
    let mut worst: f64 = 0.0;
    for t in 0..g * g * g * g {
        let idx = [t / (g * g * g), (t / (g * g)) % g, (t / g) % g, t % g];
        let mut s = 0.0;
        for bi in 0..b {
            for hi in 0..h {
                s += attn.get(&[bi, hi, idx[0], idx[1], idx[2], idx[3]]);
            }
        }
        worst = worst.max((avg.get(&idx) - s / (b * h) as f64).abs());
    }

    let mut sums: f64 = 0.0;
    let mut rows_ok = true;
    let mut cooled = ModelConfig::tiny();
    cooled.stages[0].depth = 3;
    cooled.acl_period = 1;
    let mut small_t = ModelConfig::variant("crossformer-t").unwrap();
    small_t.input_size = 112;
    for cfg in [ModelConfig::tiny(), cooled, small_t, ModelConfig::variant("crossformer++-s").unwrap()] {
        let model = Model::new(cfg.clone(), 5).unwrap();
        let s = cfg.input_size;
        let trace = amplitude_trace(&model, &rand(6, &[2, 3, s, s], 1.0)).unwrap();
        rows_ok &= trace.len() == expected_trace_rows(&cfg).unwrap();
        for r in &trace {
            if let Some(m) = &r.attention {
                let gg = m.shape()[0] * m.shape()[1];
                for row in m.data().chunks(gg) {
                    sums = sums.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    verdict(
        worst < AVERAGE_TOL && sums < MAP_SUM_TOL && rows_ok,
        format!(
            "average vs double loop {worst:.2e} (tol {AVERAGE_TOL:.0e}), worst map |sum-1| {sums:.2e} (tol {MAP_SUM_TOL:.0e}), trace rows match {rows_ok}"
        ),
    )
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn cli(args: &[String]) -> (i32, Vec<u8>) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("xfmr".to_string()).chain(args.iter().cloned());
    let code = xfmr::cli::run(argv, &mut out, &mut err);
    (code, out)
}

fn determinism() -> Verdict {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("tiny.cfg");
    std::fs::write(&cfg, ModelConfig::tiny().to_text()).unwrap();
    let cfg = cfg.display().to_string();
    let run_all = |tag: &str| -> (Vec<(i32, Vec<u8>)>, BTreeMap<String, Vec<u8>>) {
        let dir = root.path().join(tag);
        let d = |s: &str| dir.join(s).display().to_string();
        let ckpt = d("train/model.xfmr");
        let commands: Vec<Vec<String>> = vec![
            vec!["build".into(), "--variant".into(), "crossformer++-b".into()],
            vec!["check".into(), "dpb".into()],
            vec!["train-toy".into(), "--seed".into(), "3".into(), "--steps".into(), "40".into(), "--out".into(), d("train")],
            vec!["trace".into(), "--config".into(), cfg.clone(), "--checkpoint".into(), ckpt, "--out".into(), d("trace")],
            vec!["trace".into(), "--batch".into(), "2".into(), "--seed".into(), "7".into(), "--out".into(), d("full")],
        ];
        let outs = commands.iter().map(|c| cli(c)).collect();
        (outs, files(&dir))
    };
    let (a_out, a_files) = run_all("a");
    let (b_out, b_files) = run_all("b");
    let codes_ok = a_out.iter().all(|(c, _)| *c == 0);
    let same = a_out == b_out && a_files == b_files;

    let bytes = &a_files["train/model.xfmr"];
    let mut model = Model::new(ModelConfig::tiny(), 99).unwrap();
    let round_trip = model.load_checkpoint(bytes).is_ok() && &model.checkpoint() == bytes;
    verdict(
        codes_ok && same && round_trip,
        format!(
            "5 commands rerun, {} output files byte-identical {same}, exit codes ok {codes_ok}, checkpoint round-trip {round_trip}",
            a_files.len()
        ),
    )
}

fn main() {
    let results = [
        criterion(1, "parameter counts", 10.0, param_counts),
        criterion(2, "FLOP counts", 10.0, flop_counts),
        criterion(3, "position bias table equivalence", 30.0, dpb_equivalence),
        criterion(4, "layout bijection", 60.0, layout_bijection),
        criterion(5, "grouped attention oracle", 60.0, attention_oracle),
        criterion(6, "gradient integrity", 300.0, gradient_integrity),
        criterion(7, "structural invariants", 30.0, structural),
        criterion(8, "toy trainability", 600.0, trainability),
        criterion(9, "diagnostics fidelity", 60.0, diagnostics_fidelity),
        criterion(10, "determinism", 120.0, determinism),
    ];
    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
