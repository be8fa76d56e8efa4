//! Minimal, faithful pixel-mask explanations for frozen image classifiers.
//!
//! A small encoder-decoder ("masker") is optimised per image so that the
//! binary mask it emits keeps the classifier's intermediate activations,
//! output distribution and top-1 label while switching off as many pixels as
//! possible. Random backgrounds behind the mask check that the kept pixels
//! are sufficient on their own.
//!
//! Module map:
//!
//! - [`classifier`]: frozen classifiers with post-ReLU tap points.
//! - [`masker`]: the U-Net mask generator, straight-through binarisation and mask application.
//! - [`objectives`]: every loss term and their weighted composition.
//! - [`perturbation`]: background samplers and counterfactual composition.
//! - [`trainer`]: the optimisation loop producing an [`trainer::ExplanationResult`].
//! - [`evaluation`]: minimality, fidelity, robustness and necessity metrics.
//! - [`config`], [`report`], [`imageio`], [`cli`]: run configuration and artifacts.

pub mod classifier;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod imageio;
pub mod masker;
mod nn;
pub mod objectives;
pub mod perturbation;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use classifier::{load_classifier, ActivationSet, ClassifierHandle, ClassifierSpec, TapDescriptor};
pub use error::{Error, Result};
pub use evaluation::{evaluate_explanation, MetricBundle};
pub use masker::{apply_mask, binarize_ste, Masker, MaskerConfig};
pub use objectives::{LossBreakdown, LossWeights};
pub use perturbation::{compose_counterfactual, BackgroundKind, BackgroundSampler};
pub use tensor::{Image, Mask, MaskState};
pub use trainer::{explain_image, ExplanationResult, TrainConfig};
