//! Reference implementations shared by the oracle tests and the acceptance run.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use minexplain::{ActivationSet, Mask, MaskState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `sum_k p_k ln(p_k / q_k)` with `p = softmax(a)`, `q = softmax(b)`.
pub fn kl_direct(a: &[f64], b: &[f64]) -> f64 {
    let (p, q) = (softmax(a), softmax(b));
    p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum()
}

/// Total variation of the 3x3 binary mask whose row-major bits are `bits`.
pub fn tv_by_hand(bits: u32) -> f64 {
    let px = |r: usize, c: usize| ((bits >> (r * 3 + c)) & 1) as i32;
    let mut s = 0;
    for r in 0..3 {
        for c in 0..3 {
            if r + 1 < 3 {
                s += (px(r, c) - px(r + 1, c)).abs();
            }
            if c + 1 < 3 {
                s += (px(r, c) - px(r, c + 1)).abs();
            }
        }
    }
    s as f64 / 9.0
}

/// Central differences of `loss` at the 4x4 point `m0`, one coordinate at a time.
pub fn numeric_grad(m0: &[f64], loss: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
    let h = 1e-6;
    (0..m0.len())
        .map(|i| {
            let mut up = m0.to_vec();
            let mut dn = m0.to_vec();
            up[i] += h;
            dn[i] -= h;
            let t = |v: Vec<f64>| Tensor::from_vec(v, (4, 4), &Device::Cpu).unwrap();
            (loss(&t(up)) - loss(&t(dn))) / (2.0 * h)
        })
        .collect()
}

pub fn analytic_grad(m0: &[f64], loss: &dyn Fn(&Tensor) -> Tensor) -> Vec<f64> {
    let var = Var::from_vec(m0.to_vec(), (4, 4), &Device::Cpu).unwrap();
    let l = loss(var.as_tensor());
    let grads = l.backward().unwrap();
    grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Largest violation of `|a - n| <= 1e-3 * max(|a|, |n|) + 1e-9`, or `None`.
pub fn relative_mismatch(a: &[f64], n: &[f64]) -> Option<(usize, f64, f64)> {
    a.iter()
        .zip(n)
        .enumerate()
        .find(|(_, (a, n))| (*a - *n).abs() > 1e-3 * a.abs().max(n.abs()) + 1e-9)
        .map(|(i, (a, n))| (i, *a, *n))
}

pub fn soft_mask(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..16).map(|_| rng.gen_range(0.05..0.95)).collect()
}

pub fn soft(t: &Tensor) -> Mask {
    Mask::new(t.clone(), MaskState::Soft).unwrap()
}

/// A small differentiable stand-in for a classifier: two "layers" computed
/// from `m * x` in f64.
pub fn toy_acts(m: &Tensor, x: &Tensor) -> ActivationSet {
    let e = (m * x).unwrap();
    let k = Tensor::new(&[[[[0.3f64, -0.2], [0.5, 0.1]]]], &Device::Cpu).unwrap();
    let l1 = e.unsqueeze(0).unwrap().unsqueeze(0).unwrap().conv2d(&k, 0, 1, 1, 1).unwrap().relu().unwrap();
    let l2 = (e.sqr().unwrap() * 2.0).unwrap().tanh().unwrap();
    ActivationSet { activations: vec![l1, l2], logits: Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap() }
}

pub fn toy_input(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec((0..16).map(|_| rng.gen_range(0.2..1.0)).collect::<Vec<f64>>(), (4, 4), &Device::Cpu).unwrap()
}
