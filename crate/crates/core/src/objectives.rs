//! Loss terms and their weighted composition.
//!
//! Every sum over pixels or activation elements is a mean, so the default
//! weights carry across input resolutions. Targets derived from the original
//! image (its activations, distribution and label) are always detached.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::classifier::ActivationSet;
use crate::error::{Error, Result};
use crate::tensor::{scalar, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    Mse,
    Cosine,
}

/// Weights of the composite loss.
///
/// An empty `alpha` means every tap point is weighted 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_act: f64,
    pub lambda_kl: f64,
    pub lambda_ce: f64,
    pub lambda_area: f64,
    pub lambda_bin: f64,
    pub lambda_tv: f64,
    pub lambda_rob: f64,
    pub alpha: Vec<f64>,
    pub distance: Distance,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_act: 1.0,
            lambda_kl: 1.0,
            lambda_ce: 1.0,
            lambda_area: 10.0,
            lambda_bin: 1.0,
            lambda_tv: 0.5,
            lambda_rob: 1.0,
            alpha: Vec::new(),
            distance: Distance::Mse,
        }
    }
}

impl LossWeights {
    /// All weights zero (alpha stays uniform).
    pub fn zeros() -> Self {
        Self {
            lambda_act: 0.0,
            lambda_kl: 0.0,
            lambda_ce: 0.0,
            lambda_area: 0.0,
            lambda_bin: 0.0,
            lambda_tv: 0.0,
            lambda_rob: 0.0,
            ..Self::default()
        }
    }

    /// `[act, kl, ce, area, bin, tv, rob]`.
    pub fn lambdas(&self) -> [f64; 7] {
        [
            self.lambda_act,
            self.lambda_kl,
            self.lambda_ce,
            self.lambda_area,
            self.lambda_bin,
            self.lambda_tv,
            self.lambda_rob,
        ]
    }

    /// Checks non-negativity and, when `taps` is given, the alpha length.
    pub fn validate(&self, taps: Option<usize>) -> Result<()> {
        for (name, v) in TERM_NAMES.iter().zip(self.lambdas()) {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("lambda_{name} must be finite and >= 0, got {v}")));
            }
        }
        if let Some(a) = self.alpha.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(Error::InvalidConfig(format!("alpha entries must be finite and >= 0, got {a}")));
        }
        if let Some(n) = taps {
            if !self.alpha.is_empty() && self.alpha.len() != n {
                return Err(Error::TapCountMismatch { left: self.alpha.len(), right: n });
            }
        }
        Ok(())
    }

    /// Per-layer weights for `taps` tap points.
    pub fn alpha_for(&self, taps: usize) -> Result<Vec<f64>> {
        if self.alpha.is_empty() {
            return Ok(vec![1.0; taps]);
        }
        if self.alpha.len() != taps {
            return Err(Error::TapCountMismatch { left: self.alpha.len(), right: taps });
        }
        Ok(self.alpha.clone())
    }
}

pub const TERM_NAMES: [&str; 7] = ["act", "kl", "ce", "area", "bin", "tv", "rob"];

/// Per-term values of one step, plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub act: f64,
    pub kl: f64,
    pub ce: f64,
    pub area: f64,
    pub bin: f64,
    pub tv: f64,
    pub rob: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Builds a breakdown from `[act, kl, ce, area, bin, tv, rob]`, rejecting
    /// non-finite terms.
    pub fn from_terms(terms: [f64; 7], weights: &LossWeights) -> Result<Self> {
        for (name, v) in TERM_NAMES.iter().zip(terms) {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { term: name, step: None });
            }
        }
        let total: f64 = terms.iter().zip(weights.lambdas()).map(|(t, l)| t * l).sum();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { term: "total", step: None });
        }
        let [act, kl, ce, area, bin, tv, rob] = terms;
        Ok(Self { act, kl, ce, area, bin, tv, rob, total })
    }

    pub fn terms(&self) -> [f64; 7] {
        [self.act, self.kl, self.ce, self.area, self.bin, self.tv, self.rob]
    }
}

fn layer_distance(a: &Tensor, b: &Tensor, distance: Distance) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(a.dims(), b.dims()));
    }
    match distance {
        Distance::Mse => Ok((a - b)?.sqr()?.mean_all()?),
        Distance::Cosine => {
            let (a, b) = (a.flatten_all()?, b.flatten_all()?);
            let dot = (&a * &b)?.sum_all()?;
            let na = a.sqr()?.sum_all()?.sqrt()?;
            let nb = b.sqr()?.sum_all()?.sqrt()?;
            let denom = (na * nb)?;
            // Two all-zero layers (dead ReLUs) count as identical.
            if scalar(&denom)? == 0.0 {
                let either = (scalar(&a.abs()?.sum_all()?)? + scalar(&b.abs()?.sum_all()?)?) > 0.0;
                return Ok(Tensor::new(if either { 1.0 } else { 0.0 }, a.device())?.to_dtype(a.dtype())?);
            }
            Ok((1.0 - dot.div(&denom)?)?)
        }
    }
}

/// `sum_l alpha_l * d(phi_l(x), phi_l(e))`; `acts_x` is treated as a constant.
pub fn activation_match_loss(acts_x: &ActivationSet, acts_e: &ActivationSet, weights: &LossWeights) -> Result<Tensor> {
    let (nx, ne) = (acts_x.activations.len(), acts_e.activations.len());
    if nx != ne {
        return Err(Error::TapCountMismatch { left: nx, right: ne });
    }
    if nx == 0 {
        return Ok(Tensor::new(0f32, acts_x.logits.device())?);
    }
    let alpha = weights.alpha_for(nx)?;
    let mut total: Option<Tensor> = None;
    for ((ax, ae), a) in acts_x.activations.iter().zip(&acts_e.activations).zip(alpha) {
        let d = (layer_distance(&ax.detach(), ae, weights.distance)? * a)?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    Ok(total.expect("at least one tap"))
}

fn log_softmax_1d(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::log_softmax(&logits.flatten_all()?, D::Minus1)?)
}

/// Forward KL from `softmax(logits_x)` to `softmax(logits_e)`; the first
/// argument is detached.
pub fn kl_loss(logits_x: &Tensor, logits_e: &Tensor) -> Result<Tensor> {
    if logits_x.elem_count() != logits_e.elem_count() {
        return Err(Error::shape(logits_x.dims(), logits_e.dims()));
    }
    let log_p = log_softmax_1d(&logits_x.detach())?;
    let p = log_p.exp()?;
    let log_q = log_softmax_1d(logits_e)?;
    Ok((p * (log_p - log_q)?)?.sum_all()?)
}

/// `-log softmax(logits_e)[y]`.
pub fn ce_loss(logits_e: &Tensor, y: usize) -> Result<Tensor> {
    let k = logits_e.elem_count();
    if y >= k {
        return Err(Error::InvalidClassIndex { index: y, num_classes: k });
    }
    Ok(log_softmax_1d(logits_e)?.get(y)?.neg()?)
}

/// Same form as [`ce_loss`], applied to counterfactual logits.
pub fn robustness_loss(logits_tilde: &Tensor, y: usize) -> Result<Tensor> {
    ce_loss(logits_tilde, y)
}

/// Mean of [`robustness_loss`] over the rows of `(R, K)` logits.
pub fn robustness_loss_mean(logits_tilde: &Tensor, y: usize) -> Result<Tensor> {
    let (_, k) = logits_tilde.dims2()?;
    if y >= k {
        return Err(Error::InvalidClassIndex { index: y, num_classes: k });
    }
    let lp = candle_nn::ops::log_softmax(logits_tilde, D::Minus1)?;
    Ok(lp.narrow(1, y, 1)?.mean_all()?.neg()?)
}

pub(crate) fn area_tensor(m: &Tensor) -> Result<Tensor> {
    Ok(m.mean_all()?)
}

pub(crate) fn bin_tensor(m: &Tensor) -> Result<Tensor> {
    Ok((m - m.sqr()?)?.abs()?.mean_all()?)
}

pub(crate) fn tv_tensor(m: &Tensor) -> Result<Tensor> {
    let (h, w) = m.dims2()?;
    if h < 2 || w < 2 {
        return Err(Error::DegenerateShape { height: h, width: w });
    }
    let dv = (m.narrow(0, 1, h - 1)? - m.narrow(0, 0, h - 1)?)?.abs()?.sum_all()?;
    let dh = (m.narrow(1, 1, w - 1)? - m.narrow(1, 0, w - 1)?)?.abs()?.sum_all()?;
    Ok(((dv + dh)? / (h * w) as f64)?)
}

/// Mean mask value.
pub fn area_loss(mask: &Mask) -> Result<Tensor> {
    area_tensor(mask.values())
}

/// Mean of `|m - m^2|`.
pub fn binarization_loss(mask: &Mask) -> Result<Tensor> {
    bin_tensor(mask.values())
}

/// Anisotropic total variation over neighbouring pairs, divided by `H * W`.
pub fn tv_loss(mask: &Mask) -> Result<Tensor> {
    tv_tensor(mask.values())
}

/// Scalar loss tensors of one step.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub act: Tensor,
    pub kl: Tensor,
    pub ce: Tensor,
    pub area: Tensor,
    pub bin: Tensor,
    pub tv: Tensor,
    pub rob: Tensor,
}

impl LossTerms {
    fn as_array(&self) -> [&Tensor; 7] {
        [&self.act, &self.kl, &self.ce, &self.area, &self.bin, &self.tv, &self.rob]
    }
}

/// Weighted sum of the terms. Returns the differentiable total and the
/// per-term breakdown; fails on the first non-finite term.
pub fn composite_loss(terms: &LossTerms, weights: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
    let tensors = terms.as_array();
    let mut values = [0.0; 7];
    for (v, t) in values.iter_mut().zip(tensors) {
        *v = scalar(t)?;
    }
    let breakdown = LossBreakdown::from_terms(values, weights)?;
    let dtype = tensors.iter().map(|t| t.dtype()).max_by_key(|d| d.size_in_bytes()).unwrap_or(DType::F32);
    let mut total: Option<Tensor> = None;
    for (t, l) in tensors.into_iter().zip(weights.lambdas()) {
        if l == 0.0 {
            continue;
        }
        let w = (t.to_dtype(dtype)? * l)?;
        total = Some(match total {
            Some(acc) => (acc + w)?,
            None => w,
        });
    }
    let total = match total {
        Some(t) => t,
        None => Tensor::new(0f64, terms.area.device())?.to_dtype(dtype)?,
    };
    Ok((total, breakdown))
}
