//! Four-class synthetic images: one Gaussian blob per image, placed in
//! the quadrant given by the class, plus per-pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crossformer::Tensor;

pub const CLASSES: usize = 4;
pub const NOISE_STD: f64 = 0.1;

/// Index offset of the held-out split.
pub const HELD_OUT_BASE: u64 = 1 << 40;
pub const HELD_OUT_LEN: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyDataset {
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl ToyDataset {
    pub fn new(size: usize, channels: usize, seed: u64) -> Self {
        Self { size, channels, seed }
    }

    /// Class of sample `index`; classes cycle, so any 4 consecutive
    /// indices are balanced.
    pub fn label(&self, index: u64) -> usize {
        (index % CLASSES as u64) as usize
    }

    /// Sample `index` as `[channels, size, size]` pixels and its label.
    pub fn sample(&self, index: u64) -> (Vec<f64>, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let label = self.label(index);
        let n = self.size as f64;
        let half = n / 2.0;
        let (qy, qx) = ((label / 2) as f64 * half, (label % 2) as f64 * half);
        let cy = qy + rng.random_range(0.25..0.75) * half;
        let cx = qx + rng.random_range(0.25..0.75) * half;
        let sigma = n / 12.0;
        let noise = Normal::new(0.0, NOISE_STD).expect("valid noise");
        let mut px = Vec::with_capacity(self.channels * self.size * self.size);
        for _ in 0..self.channels {
            for y in 0..self.size {
                for x in 0..self.size {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    px.push((-d2 / (2.0 * sigma * sigma)).exp() + noise.sample(&mut rng));
                }
            }
        }
        (px, label)
    }

    /// Samples `start..start + len` stacked into `[len, C, H, W]`.
    pub fn batch(&self, start: u64, len: usize) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(len * self.channels * self.size * self.size);
        let mut labels = Vec::with_capacity(len);
        for i in 0..len as u64 {
            let (px, l) = self.sample(start + i);
            data.extend(px);
            labels.push(l);
        }
        let t = Tensor::new(vec![len, self.channels, self.size, self.size], data).expect("batch extents");
        (t, labels)
    }

    pub fn held_out(&self) -> (Tensor, Vec<usize>) {
        self.batch(HELD_OUT_BASE, HELD_OUT_LEN)
    }
}

/// Mean pixel of each quadrant, `[4]`, averaged over channels.
pub fn quadrant_means(ds: &ToyDataset, px: &[f64]) -> [f64; 4] {
    let s = ds.size;
    let mut acc = [0.0; 4];
    for c in 0..ds.channels {
        for y in 0..s {
            for x in 0..s {
                acc[(y * 2 / s) * 2 + x * 2 / s] += px[(c * s + y) * s + x];
            }
        }
    }
    let n = (ds.channels * s * s / 4) as f64;
    acc.map(|v| v / n)
}
