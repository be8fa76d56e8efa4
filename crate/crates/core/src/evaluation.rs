//! Minimality, fidelity, robustness and necessity of a finished mask.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, ClassifierHandle};
use crate::error::{Error, Result};
use crate::perturbation::{compose_tensor, BackgroundSampler};
use crate::tensor::{Image, Mask, MaskState};

/// Counterfactuals are pushed through the classifier in chunks of this size.
const TRIAL_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    /// Fraction of mask pixels equal to 1.
    pub active_fraction: f64,
    /// `argmax f(e) == argmax f(x)`.
    pub label_preserved: bool,
    /// `p_y(f(x))`.
    pub confidence_original: f64,
    /// `p_y(f(e))`.
    pub confidence_explanation: f64,
    /// Share of random-background counterfactuals still classified as `y`.
    pub robustness_rate: f64,
    /// `p_y(f(x)) - p_y(f((1 - m) * x))`.
    pub necessity_drop: f64,
}

fn check(handle: &ClassifierHandle, x: &Image, mask: &Mask, n_trials: usize) -> Result<()> {
    handle.check_image(x)?;
    if (mask.height(), mask.width()) != (x.height(), x.width()) {
        return Err(Error::shape((x.height(), x.width()), (mask.height(), mask.width())));
    }
    if mask.state() != MaskState::Binary {
        return Err(Error::InvalidConfig("metrics need a binary mask".into()));
    }
    if n_trials == 0 {
        return Err(Error::InvalidConfig("n_trials must be at least 1".into()));
    }
    Ok(())
}

fn probs(handle: &ClassifierHandle, batch: &Tensor) -> Result<Vec<Vec<f32>>> {
    let logits = handle.logits_batch(&batch.to_dtype(DType::F32)?)?.detach();
    Ok(candle_nn::ops::softmax(&logits, D::Minus1)?.to_vec2::<f32>()?)
}

/// Mean of a binary mask.
pub fn active_fraction(mask: &Mask) -> Result<f64> {
    mask.mean()
}

/// Fraction of `n_trials` counterfactuals (fresh background each, drawn from
/// a reset copy of `sampler`) whose top-1 class is `y`.
pub fn robustness_rate_for(
    handle: &ClassifierHandle,
    x: &Image,
    mask: &Mask,
    y: usize,
    n_trials: usize,
    sampler: &BackgroundSampler,
) -> Result<f64> {
    check(handle, x, mask, n_trials)?;
    let mut sampler = sampler.clone();
    sampler.reset();
    let dev = handle.device();
    let xt = x.tensor().to_dtype(DType::F32)?.unsqueeze(0)?;
    let m = mask.values().to_dtype(DType::F32)?.unsqueeze(0)?.unsqueeze(0)?;
    let mut hits = 0usize;
    let mut done = 0usize;
    while done < n_trials {
        let n = TRIAL_CHUNK.min(n_trials - done);
        let r = sampler.sample_batch(n, x.shape_hwc(), Some(x), dev)?;
        let batch = compose_tensor(&xt, &m, &r)?;
        hits += probs(handle, &batch)?.iter().filter(|p| argmax(p) == y).count();
        done += n;
    }
    Ok(hits as f64 / n_trials as f64)
}

/// [`robustness_rate_for`] with `y = argmax f(x)`.
pub fn robustness_rate(
    handle: &ClassifierHandle,
    x: &Image,
    mask: &Mask,
    n_trials: usize,
    sampler: &BackgroundSampler,
) -> Result<f64> {
    check(handle, x, mask, n_trials)?;
    let (y, _) = handle.predict(x)?;
    robustness_rate_for(handle, x, mask, y, n_trials, sampler)
}

/// All metrics for one explanation. Deterministic for a given sampler seed.
pub fn evaluate_explanation(
    handle: &ClassifierHandle,
    x: &Image,
    mask: &Mask,
    n_trials: usize,
    sampler: &BackgroundSampler,
) -> Result<MetricBundle> {
    check(handle, x, mask, n_trials)?;
    let xt = x.tensor().to_dtype(DType::F32)?.unsqueeze(0)?;
    let m = mask.values().to_dtype(DType::F32)?.unsqueeze(0)?.unsqueeze(0)?;
    let e = xt.broadcast_mul(&m)?;
    let removed = xt.broadcast_mul(&(1.0 - &m)?)?;
    let p = probs(handle, &Tensor::cat(&[&xt, &e, &removed], 0)?)?;
    let y = argmax(&p[0]);
    Ok(MetricBundle {
        active_fraction: active_fraction(mask)?,
        label_preserved: argmax(&p[1]) == y,
        confidence_original: p[0][y] as f64,
        confidence_explanation: p[1][y] as f64,
        robustness_rate: robustness_rate_for(handle, x, mask, y, n_trials, sampler)?,
        necessity_drop: p[0][y] as f64 - p[2][y] as f64,
    })
}
