//! Synthetic quadrant dataset and the training routine for the tiny fixture.
//!
//! Each 32x32 image carries one saturated red square (side 5 to 7) fully inside
//! one quadrant; the quadrant index is the class (0 top-left, 1 top-right,
//! 2 bottom-left, 3 bottom-right). Backgrounds are noise, flat colours,
//! gradients or black, and clutter is added on top: squares in other colours
//! and thin red strips, so that neither "any red" nor "anything bright" decides
//! the label.
//!
//! Training also sees "null" images without the square and partially masked
//! images (boxes or random pixel subsets replaced by black or noise). Their
//! targets blend the one-hot label toward uniform in proportion to how much of
//! the square is gone. A classifier trained this way answers "I don't know"
//! when the evidence is removed, which is what makes necessity and sufficiency
//! measurable on it.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tiny::{TinyCnn, INPUT_SIZE, NUM_CLASSES};
use super::ClassifierHandle;
use crate::error::Result;
use crate::tensor::{Image, Mask};

const SIZE: usize = INPUT_SIZE;
const HALF: usize = SIZE / 2;
const PATCH_COLOR: [f32; 3] = [1.0, 0.1, 0.1];

/// Location of the discriminative square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

#[derive(Debug, Clone)]
pub struct QuadrantSample {
    /// `32 x 32 x 3`, interleaved.
    pub pixels: Vec<f32>,
    /// `None` for null images.
    pub label: Option<usize>,
    pub patch: Option<Patch>,
}

impl QuadrantSample {
    pub fn image(&self, device: &Device) -> Result<Image> {
        Image::from_hwc(&self.pixels, SIZE, SIZE, 3, device)
    }
}

/// Row and column ranges of the quadrant that decides `class`.
pub fn quadrant_bounds(class: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let r = (class / 2) * HALF;
    let c = (class % 2) * HALF;
    (r..r + HALF, c..c + HALF)
}

/// Binary mask of the quadrant that decides `class`.
pub fn quadrant_mask(class: usize, device: &Device) -> Result<Mask> {
    let (rows, cols) = quadrant_bounds(class);
    Mask::rectangle(SIZE, SIZE, rows, cols, device)
}

fn fill_rect(pixels: &mut [f32], row: usize, col: usize, h: usize, w: usize, color: [f32; 3]) {
    for r in row..(row + h).min(SIZE) {
        for c in col..(col + w).min(SIZE) {
            let i = (r * SIZE + c) * 3;
            pixels[i..i + 3].copy_from_slice(&color);
        }
    }
}

fn background(rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = SIZE * SIZE * 3;
    match rng.gen_range(0..4) {
        0 => (0..n).map(|_| rng.gen::<f32>()).collect(),
        1 => {
            let c: [f32; 3] = rng.gen();
            (0..n).map(|i| c[i % 3]).collect()
        }
        2 => {
            let a: [f32; 3] = rng.gen();
            let b: [f32; 3] = rng.gen();
            let vertical = rng.gen_bool(0.5);
            let mut px = vec![0f32; n];
            for r in 0..SIZE {
                for c in 0..SIZE {
                    let t = (if vertical { r } else { c }) as f32 / (SIZE - 1) as f32;
                    for ch in 0..3 {
                        px[(r * SIZE + c) * 3 + ch] = a[ch] + (b[ch] - a[ch]) * t;
                    }
                }
            }
            px
        }
        _ => vec![0f32; n],
    }
}

/// Draws one image. `class = None` gives a null image with clutter only.
pub fn quadrant_sample(rng: &mut ChaCha8Rng, class: Option<usize>) -> QuadrantSample {
    let mut pixels = background(rng);
    for _ in 0..rng.gen_range(0..3) {
        let q = rng.gen_range(0..4);
        let s = rng.gen_range(4..8);
        let (rows, cols) = quadrant_bounds(q);
        let row = rows.start + rng.gen_range(0..=HALF - s);
        let col = cols.start + rng.gen_range(0..=HALF - s);
        let mut color: [f32; 3] = rng.gen();
        color[0] = color[0].min(0.5);
        fill_rect(&mut pixels, row, col, s, s, color);
    }
    for _ in 0..rng.gen_range(0..3) {
        let thick = rng.gen_range(1..3);
        let len = rng.gen_range(2..8);
        let (h, w) = if rng.gen_bool(0.5) { (thick, len) } else { (len, thick) };
        let row = rng.gen_range(0..=SIZE - h);
        let col = rng.gen_range(0..=SIZE - w);
        fill_rect(&mut pixels, row, col, h, w, PATCH_COLOR);
    }
    let patch = class.map(|k| {
        let size = rng.gen_range(5..8);
        let (rows, cols) = quadrant_bounds(k);
        let row = rows.start + rng.gen_range(1..HALF - size);
        let col = cols.start + rng.gen_range(1..HALF - size);
        fill_rect(&mut pixels, row, col, size, size, PATCH_COLOR);
        Patch { row, col, size }
    });
    QuadrantSample { pixels, label: class, patch }
}

/// Replaces a random box or random pixel subset with black or noise and
/// returns the fraction of the patch that survived.
fn occlude(rng: &mut ChaCha8Rng, sample: &mut QuadrantSample) -> f32 {
    let keep: Vec<bool> = if rng.gen_bool(0.5) {
        let rate: f64 = rng.gen();
        (0..SIZE * SIZE).map(|_| rng.gen_bool(rate)).collect()
    } else {
        let h = rng.gen_range(4..=SIZE);
        let w = rng.gen_range(4..=SIZE);
        let r0 = rng.gen_range(0..=SIZE - h);
        let c0 = rng.gen_range(0..=SIZE - w);
        (0..SIZE * SIZE)
            .map(|i| (r0..r0 + h).contains(&(i / SIZE)) && (c0..c0 + w).contains(&(i % SIZE)))
            .collect()
    };
    let noise_fill = rng.gen_bool(0.5);
    for (i, &k) in keep.iter().enumerate() {
        if !k {
            for ch in 0..3 {
                sample.pixels[i * 3 + ch] = if noise_fill { rng.gen() } else { 0.0 };
            }
        }
    }
    match sample.patch {
        Some(p) => {
            let mut kept = 0;
            for r in p.row..p.row + p.size {
                for c in p.col..p.col + p.size {
                    kept += keep[r * SIZE + c] as usize;
                }
            }
            kept as f32 / (p.size * p.size) as f32
        }
        None => 0.0,
    }
}

fn soft_target(label: Option<usize>, smoothing: f32, evidence: f32) -> [f32; NUM_CLASSES] {
    let uniform = 1.0 / NUM_CLASSES as f32;
    let mut t = [uniform; NUM_CLASSES];
    if let Some(k) = label {
        for (i, v) in t.iter_mut().enumerate() {
            let onehot = if i == k { 1.0 } else { 0.0 };
            let smoothed = onehot * (1.0 - smoothing) + smoothing * uniform;
            *v = evidence * smoothed + (1.0 - evidence) * uniform;
        }
    }
    t
}

/// Labelled held-out images (no null images, no occlusion).
pub fn test_set(seed: u64, n: usize) -> Vec<QuadrantSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| quadrant_sample(&mut rng, Some(i % NUM_CLASSES))).collect()
}

#[derive(Debug, Clone)]
pub struct FixtureTrainConfig {
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub label_smoothing: f32,
    /// One in `null_every` training images has no patch.
    pub null_every: usize,
    pub occlusion_prob: f64,
    pub test_samples: usize,
}

impl Default for FixtureTrainConfig {
    fn default() -> Self {
        Self {
            samples: 6000,
            epochs: 40,
            batch_size: 64,
            learning_rate: 3e-3,
            label_smoothing: 0.05,
            null_every: 5,
            occlusion_prob: 0.4,
            test_samples: 1000,
        }
    }
}

/// A trained fixture network together with its held-out accuracy.
pub struct TrainedFixture {
    pub(crate) network: TinyCnn,
    pub test_accuracy: f64,
    pub seed: u64,
}

impl TrainedFixture {
    /// Safetensors blob in the format the `tiny-fixture` backend loads.
    pub fn to_safetensors(&self) -> Result<Vec<u8>> {
        let mut meta = HashMap::new();
        meta.insert("seed".to_string(), self.seed.to_string());
        meta.insert("test_accuracy".to_string(), format!("{:.6}", self.test_accuracy));
        self.network.to_safetensors(meta)
    }
}

/// Trains the fixture classifier deterministically from `seed`.
pub fn train_fixture(seed: u64, cfg: &FixtureTrainConfig) -> Result<TrainedFixture> {
    let device = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(cfg.samples * SIZE * SIZE * 3);
    let mut targets = Vec::with_capacity(cfg.samples * NUM_CLASSES);
    for i in 0..cfg.samples {
        let label = if cfg.null_every > 0 && i % cfg.null_every == cfg.null_every - 1 {
            None
        } else {
            Some(i % NUM_CLASSES)
        };
        let mut sample = quadrant_sample(&mut rng, label);
        let evidence = if rng.gen_bool(cfg.occlusion_prob) { occlude(&mut rng, &mut sample) } else { 1.0 };
        images.extend_from_slice(&sample.pixels);
        targets.extend_from_slice(&soft_target(label, cfg.label_smoothing, evidence));
    }
    let images = Tensor::from_vec(images, (cfg.samples, SIZE, SIZE, 3), &device)?.permute((0, 3, 1, 2))?.contiguous()?;
    let targets = Tensor::from_vec(targets, (cfg.samples, NUM_CLASSES), &device)?;

    let net = TinyCnn::init(seed, true, &device)?;
    let mut opt = AdamW::new(
        net.vars().to_vec(),
        ParamsAdamW { lr: cfg.learning_rate, weight_decay: 0.0, ..Default::default() },
    )?;
    let mut order: Vec<u32> = (0..cfg.samples as u32).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let idx = Tensor::from_slice(chunk, chunk.len(), &device)?;
            let x = images.index_select(&idx, 0)?;
            let t = targets.index_select(&idx, 0)?;
            let (_, logits) = net.forward(&x)?;
            let logp = candle_nn::ops::log_softmax(&logits, 1)?;
            let loss = (t * logp)?.sum(1)?.mean(0)?.neg()?;
            opt.backward_step(&loss)?;
        }
    }
    let network = net.frozen()?;
    let test_accuracy = accuracy(&network, &test_set(seed.wrapping_add(1_000_003), cfg.test_samples))?;
    Ok(TrainedFixture { network, test_accuracy, seed })
}

fn accuracy(net: &TinyCnn, samples: &[QuadrantSample]) -> Result<f64> {
    let device = Device::Cpu;
    let mut correct = 0usize;
    for chunk in samples.chunks(256) {
        let data: Vec<f32> = chunk.iter().flat_map(|s| s.pixels.iter().copied()).collect();
        let x = Tensor::from_vec(data, (chunk.len(), SIZE, SIZE, 3), &device)?.permute((0, 3, 1, 2))?.contiguous()?;
        let (_, logits) = net.forward(&x)?;
        let pred = logits.argmax(1)?.to_dtype(DType::U32)?.to_vec1::<u32>()?;
        correct += chunk.iter().zip(pred).filter(|(s, p)| s.label == Some(*p as usize)).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Top-1 accuracy of a loaded handle on labelled samples.
pub fn handle_accuracy(handle: &ClassifierHandle, samples: &[QuadrantSample]) -> Result<f64> {
    let device = handle.device().clone();
    let mut correct = 0usize;
    for chunk in samples.chunks(256) {
        let data: Vec<f32> = chunk.iter().flat_map(|s| s.pixels.iter().copied()).collect();
        let x = Tensor::from_vec(data, (chunk.len(), SIZE, SIZE, 3), &device)?.permute((0, 3, 1, 2))?.contiguous()?;
        let pred = handle.logits_batch(&x)?.argmax(1)?.to_dtype(DType::U32)?.to_vec1::<u32>()?;
        correct += chunk.iter().zip(pred).filter(|(s, p)| s.label == Some(*p as usize)).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}
