//! Per-image optimisation of the masker under the composite loss.
//!
//! Each step runs the masker once, binarises with the straight-through
//! estimator, and pushes the explanation `e` and the `R` counterfactuals
//! through the classifier as a single `(1 + R)` batch.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, ActivationSet, ClassifierHandle};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_explanation, MetricBundle};
use crate::masker::{apply_mask, binarize_ste_tensor, Masker, MaskerConfig};
use crate::objectives::{
    activation_match_loss, area_tensor, bin_tensor, ce_loss, composite_loss, kl_loss, robustness_loss_mean, tv_tensor,
    LossBreakdown, LossTerms, LossWeights,
};
use crate::perturbation::{compose_tensor, BackgroundSampler};
use crate::tensor::{scalar, Image, Mask, MaskState};

/// Stop once the label is kept, the mask is small enough and the total loss
/// has flattened out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStopping {
    pub target_active_fraction: f64,
    pub window: usize,
    pub relative_tolerance: f64,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self { target_active_fraction: 0.25, window: 50, relative_tolerance: 1e-4 }
    }
}

/// Optimisation settings for one explanation.
///
/// `seed` offsets both the masker's and the sampler's own seeds, so two
/// runs that differ only in `seed` see different initialisations and
/// different background streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub threshold: f64,
    pub sampler: BackgroundSampler,
    pub seed: u64,
    pub robustness_draws_per_step: usize,
    pub masker: MaskerConfig,
    pub early_stopping: Option<EarlyStopping>,
    /// Counterfactual trials for the robustness metric of the final mask.
    pub eval_trials: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 1e-3,
            weights: LossWeights::default(),
            threshold: 0.5,
            sampler: BackgroundSampler::default(),
            seed: 0,
            robustness_draws_per_step: 1,
            masker: MaskerConfig::default(),
            early_stopping: None,
            eval_trials: 16,
        }
    }
}

impl TrainConfig {
    /// Defaults with the step budget suited to `model`.
    pub fn for_model(model: &str) -> Self {
        let steps = if model == crate::classifier::RESNET18_IMAGENET { 2000 } else { 500 };
        Self { steps, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if self.robustness_draws_per_step == 0 {
            return Err(Error::InvalidConfig("robustness_draws_per_step must be at least 1".into()));
        }
        if self.eval_trials == 0 {
            return Err(Error::InvalidConfig("eval_trials must be at least 1".into()));
        }
        self.weights.validate(None)
    }

    fn masker_config(&self) -> MaskerConfig {
        MaskerConfig { seed: self.masker.seed.wrapping_add(self.seed), ..self.masker.clone() }
    }

    fn train_sampler(&self) -> BackgroundSampler {
        self.sampler.with_seed(self.sampler.seed().wrapping_add(self.seed))
    }

    /// The metric stream is kept apart from the training stream.
    fn eval_sampler(&self) -> BackgroundSampler {
        self.sampler.with_seed(self.sampler.seed().wrapping_add(self.seed) ^ 0x9e37_79b9_7f4a_7c15)
    }
}

#[derive(Debug, Clone)]
pub struct ExplanationResult {
    pub mask: Mask,
    pub explanation: Image,
    /// `argmax f(x)`.
    pub y: usize,
    pub loss_trace: Vec<LossBreakdown>,
    pub metrics: MetricBundle,
    pub wall_time_s: f64,
}

/// Constants of the problem for one image: computed once.
#[derive(Debug, Clone)]
pub struct Target {
    pub x: Image,
    pub y: usize,
    /// Batched `(1, ...)`, detached.
    pub acts: ActivationSet,
}

impl Target {
    pub fn new(handle: &ClassifierHandle, x: &Image) -> Result<Self> {
        handle.check_image(x)?;
        let x = Image::from_tensor(x.tensor().to_dtype(DType::F32)?.detach())?;
        let acts = handle.forward_batch(&x.batched()?)?.detach();
        let probs = candle_nn::ops::softmax(&acts.logits, D::Minus1)?.squeeze(0)?.to_vec1::<f32>()?;
        Ok(Self { y: argmax(&probs), x, acts })
    }
}

/// Masker parameters, optimiser moments and background stream.
pub struct TrainState {
    pub masker: Masker,
    optimizer: AdamW,
    sampler: BackgroundSampler,
    pub step: usize,
    plateau: Vec<f64>,
}

impl TrainState {
    pub fn new(handle: &ClassifierHandle, cfg: &TrainConfig) -> Result<Self> {
        let masker = Masker::new(&cfg.masker_config(), handle.input_shape(), DType::F32, handle.device())?;
        Self::with_masker(masker, cfg)
    }

    pub fn with_masker(masker: Masker, cfg: &TrainConfig) -> Result<Self> {
        let params = ParamsAdamW { lr: cfg.learning_rate, weight_decay: 0.0, ..Default::default() };
        let optimizer = AdamW::new(masker.vars().to_vec(), params)?;
        Ok(Self { masker, optimizer, sampler: cfg.train_sampler(), step: 0, plateau: Vec::new() })
    }

    /// Current binary mask (no gradient).
    pub fn mask(&self, x: &Image, threshold: f64) -> Result<Mask> {
        let soft = self.masker.generate_soft_mask(x)?;
        let hard = soft.values().detach().ge(threshold)?.to_dtype(DType::F32)?;
        Ok(Mask::new_unchecked(hard, MaskState::Binary))
    }
}

struct StepOutcome {
    breakdown: LossBreakdown,
    label_kept: bool,
    active_fraction: f64,
}

fn step_inner(state: &mut TrainState, handle: &ClassifierHandle, target: &Target, cfg: &TrainConfig) -> Result<StepOutcome> {
    let xb = target.x.batched()?;
    let soft = state.masker.soft_masks(&xb)?.squeeze(0)?;
    let hard = binarize_ste_tensor(&soft, cfg.threshold)?;
    let m = hard.unsqueeze(0)?.unsqueeze(0)?;
    let draws = cfg.robustness_draws_per_step;
    let r = state.sampler.sample_batch(draws, handle.input_shape(), Some(&target.x), handle.device())?;
    let e = xb.broadcast_mul(&m)?;
    let tilde = compose_tensor(&xb, &m, &r)?;
    let out = handle.forward_batch(&Tensor::cat(&[&e, &tilde], 0)?)?;

    let acts_e = ActivationSet {
        activations: out.activations.iter().map(|a| a.narrow(0, 0, 1)).collect::<candle_core::Result<_>>()?,
        logits: out.logits.narrow(0, 0, 1)?,
    };
    let logits_e = out.logits.get(0)?;
    let logits_x = target.acts.logits.get(0)?;
    let label_kept = argmax(&logits_e.detach().to_vec1::<f32>()?) == target.y;
    let terms = LossTerms {
        act: activation_match_loss(&target.acts, &acts_e, &cfg.weights)?,
        kl: kl_loss(&logits_x, &logits_e)?,
        ce: ce_loss(&logits_e, target.y)?,
        area: area_tensor(&soft)?,
        bin: bin_tensor(&soft)?,
        tv: tv_tensor(&soft)?,
        rob: robustness_loss_mean(&out.logits.narrow(0, 1, draws)?, target.y)?,
    };
    let (total, breakdown) = composite_loss(&terms, &cfg.weights)?;
    let grads = total.backward()?;
    state.optimizer.step(&grads)?;
    state.step += 1;
    Ok(StepOutcome { breakdown, label_kept, active_fraction: scalar(&hard.detach().mean_all()?)? })
}

/// One update of the masker. Errors carry the step index.
pub fn train_step(
    state: &mut TrainState,
    handle: &ClassifierHandle,
    target: &Target,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let step = state.step;
    match step_inner(state, handle, target, cfg) {
        Ok(o) => Ok(o.breakdown),
        Err(Error::NonFiniteLoss { term, .. }) => Err(Error::NonFiniteLoss { term, step: Some(step) }),
        Err(e) => Err(e),
    }
}

fn should_stop(state: &mut TrainState, outcome: &StepOutcome, es: &EarlyStopping) -> bool {
    state.plateau.push(outcome.breakdown.total);
    if state.plateau.len() <= es.window {
        return false;
    }
    let old = state.plateau[state.plateau.len() - 1 - es.window];
    let rel = (outcome.breakdown.total - old).abs() / old.abs().max(f64::EPSILON);
    outcome.label_kept && outcome.active_fraction <= es.target_active_fraction && rel < es.relative_tolerance
}

fn run(state: &mut TrainState, handle: &ClassifierHandle, target: &Target, cfg: &TrainConfig) -> Result<Vec<LossBreakdown>> {
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let step = state.step;
        let outcome = step_inner(state, handle, target, cfg).map_err(|e| match e {
            Error::NonFiniteLoss { term, .. } => Error::NonFiniteLoss { term, step: Some(step) },
            e => e,
        })?;
        trace.push(outcome.breakdown);
        if let Some(es) = &cfg.early_stopping {
            if should_stop(state, &outcome, es) {
                break;
            }
        }
    }
    Ok(trace)
}

fn finish(
    handle: &ClassifierHandle,
    state: &TrainState,
    target: &Target,
    cfg: &TrainConfig,
    loss_trace: Vec<LossBreakdown>,
    started: Instant,
) -> Result<ExplanationResult> {
    let mask = state.mask(&target.x, cfg.threshold)?;
    let explanation = apply_mask(&target.x, &mask)?;
    let metrics = evaluate_explanation(handle, &target.x, &mask, cfg.eval_trials, &cfg.eval_sampler())?;
    Ok(ExplanationResult {
        mask,
        explanation,
        y: target.y,
        loss_trace,
        metrics,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Optimises a fresh masker for `x` and returns its binary mask and metrics.
pub fn explain_image(handle: &ClassifierHandle, x: &Image, cfg: &TrainConfig) -> Result<ExplanationResult> {
    cfg.validate()?;
    cfg.weights.validate(Some(handle.tap_points().len()))?;
    let started = Instant::now();
    let target = Target::new(handle, x)?;
    let mut state = TrainState::new(handle, cfg)?;
    let trace = run(&mut state, handle, &target, cfg)?;
    finish(handle, &state, &target, cfg, trace, started)
}

/// Runs [`explain_image`] over several images on up to `jobs` threads. Each
/// job owns its masker, optimiser and background stream; results keep the
/// input order.
pub fn explain_images(
    handle: &ClassifierHandle,
    images: &[Image],
    cfg: &TrainConfig,
    jobs: usize,
) -> Vec<Result<ExplanationResult>> {
    let jobs = jobs.clamp(1, images.len().max(1));
    if jobs == 1 {
        return images.iter().map(|x| explain_image(handle, x, cfg)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<ExplanationResult>>>> =
        images.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= images.len() {
                    break;
                }
                let r = explain_image(handle, &images[i], cfg);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().expect("result slot").expect("every slot filled")).collect()
}

/// Amortised mode: one masker trained across `images`, visiting them in
/// round-robin order for `cfg.steps` steps in total, then applied to each.
pub fn explain_amortized(
    handle: &ClassifierHandle,
    images: &[Image],
    cfg: &TrainConfig,
) -> Result<(Masker, Vec<ExplanationResult>)> {
    cfg.validate()?;
    cfg.weights.validate(Some(handle.tap_points().len()))?;
    if images.is_empty() {
        return Err(Error::InvalidConfig("amortised training needs at least one image".into()));
    }
    let started = Instant::now();
    let targets = images.iter().map(|x| Target::new(handle, x)).collect::<Result<Vec<_>>>()?;
    let mut state = TrainState::new(handle, cfg)?;
    let mut traces = vec![Vec::new(); targets.len()];
    for step in 0..cfg.steps {
        let k = step % targets.len();
        traces[k].push(train_step(&mut state, handle, &targets[k], cfg)?);
    }
    let results = targets
        .iter()
        .zip(traces)
        .map(|(t, trace)| finish(handle, &state, t, cfg, trace, started))
        .collect::<Result<Vec<_>>>()?;
    Ok((state.masker, results))
}

pub const LOSS_TRACE_HEADER: [&str; 9] = ["step", "act", "kl", "ce", "area", "bin", "tv", "rob", "total"];

/// Writes `step,act,kl,ce,area,bin,tv,rob,total`, one row per step.
pub fn write_loss_trace(trace: &[LossBreakdown], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let io = |e: csv::Error| Error::format(path, e);
    w.write_record(LOSS_TRACE_HEADER).map_err(io)?;
    for (i, b) in trace.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(b.terms().iter().chain([&b.total]).map(|v| v.to_string()));
        w.write_record(&row).map_err(io)?;
    }
    w.into_inner()
        .map_err(|e| Error::format(path, e))?
        .flush()
        .map_err(|e| Error::io(path, e))
}
