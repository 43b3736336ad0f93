//! Momentum SGD on the toy task.

use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crossformer::model::Mode;
use crossformer::{Model, ModelConfig, Result, Tape, Tensor};

use crate::toy::ToyDataset;

/// Samples per gradient shard; shards are reduced in index order.
pub const SHARD: usize = 8;
pub const MOMENTUM: f64 = 0.9;
pub const MAX_TOY_PARAMS: usize = 200_000;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { seed: 0, steps: 500, batch: 32, lr: 0.05, threads: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub accuracy: f64,
    pub diverged: bool,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l:e}\n"));
        }
        s
    }
}

/// Worker count from `XFMR_THREADS`, default 1.
pub fn threads_from_env() -> usize {
    std::env::var("XFMR_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

fn shard_grads(model: &Model, images: &Tensor, labels: &[usize], seed: u64) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = model.forward(&p, &tape.constant(images.clone()), Mode::Train(&mut rng))?;
    let loss = out.logits.cross_entropy(labels)?;
    let g = tape.backward(&loss)?;
    Ok((loss.value().item(), p.vars().iter().map(|v| g.wrt(v)).collect()))
}

fn slice_batch(images: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    crossformer::tensor::narrow(images, 0, start, len)
}

/// Mean loss and gradients over a batch, identical for any thread count.
pub fn batch_grads(model: &Model, images: &Tensor, labels: &[usize], seed: u64, threads: usize) -> Result<(f64, Vec<Tensor>)> {
    let n = labels.len();
    let shards: Vec<(usize, usize)> = (0..n).step_by(SHARD).map(|s| (s, SHARD.min(n - s))).collect();
    let mut results: Vec<Option<Result<(f64, Vec<Tensor>)>>> = (0..shards.len()).map(|_| None).collect();
    for wave in (0..shards.len()).collect::<Vec<_>>().chunks(threads.max(1)) {
        thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&i| {
                    let (s, len) = shards[i];
                    scope.spawn(move || {
                        let x = slice_batch(images, s, len)?;
                        shard_grads(model, &x, &labels[s..s + len], seed.wrapping_add(i as u64))
                    })
                })
                .collect();
            for (&i, h) in wave.iter().zip(handles) {
                results[i] = Some(h.join().expect("training worker panicked"));
            }
        });
    }
    let mut loss = 0.0;
    let mut total: Option<Vec<Tensor>> = None;
    for ((_, len), r) in shards.iter().zip(results) {
        let (l, g) = r.expect("every shard ran")?;
        let w = *len as f64 / n as f64;
        loss += w * l;
        let g: Vec<Tensor> = g.iter().map(|t| t.map(|v| v * w)).collect();
        total = Some(match total {
            None => g,
            Some(acc) => acc.iter().zip(&g).map(|(a, b)| a.zip_map(b, |x, y| x + y)).collect::<Result<_>>()?,
        });
    }
    Ok((loss, total.unwrap_or_default()))
}

pub fn accuracy(model: &Model, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut correct = 0;
    for start in (0..labels.len()).step_by(64) {
        let len = 64.min(labels.len() - start);
        let logits = model.infer(&slice_batch(images, start, len)?)?;
        let c = logits.shape()[1];
        for (i, &l) in labels[start..start + len].iter().enumerate() {
            let row = &logits.data()[i * c..(i + 1) * c];
            let arg = (0..c).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0);
            correct += usize::from(arg == l);
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Trains a fresh model of `config`; returns the model and run report.
pub fn train_toy(config: &ModelConfig, run: &TrainConfig) -> Result<(Model, TrainReport)> {
    let mut model = Model::new(config.clone(), run.seed)?;
    let n = model.params.numel();
    if n > MAX_TOY_PARAMS {
        return Err(crossformer::Error::Config(format!(
            "toy training is limited to {MAX_TOY_PARAMS} parameters, config has {n}"
        )));
    }
    let ds = ToyDataset::new(config.input_size, config.in_chans, run.seed);
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    let mut velocity: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(model.params.value(id).shape().to_vec())).collect();
    let mut losses = Vec::with_capacity(run.steps);
    let mut diverged = false;
    for step in 0..run.steps {
        let (x, y) = ds.batch((step * run.batch) as u64, run.batch);
        let (loss, grads) = batch_grads(&model, &x, &y, run.seed ^ ((step as u64) << 20), run.threads)?;
        losses.push(loss);
        if !loss.is_finite() {
            diverged = true;
            break;
        }
        for ((&id, v), g) in ids.iter().zip(velocity.iter_mut()).zip(&grads) {
            *v = v.zip_map(g, |a, b| MOMENTUM * a + b)?;
            let w = model.params.value(id).zip_map(v, |p, m| p - run.lr * m)?;
            model.params.set_value(id, w)?;
        }
    }
    let (hx, hy) = ds.held_out();
    let accuracy = if diverged { 0.0 } else { accuracy(&model, &hx, &hy)? };
    Ok((model, TrainReport { losses, accuracy, diverged }))
}
