//! Frozen classifiers with activations tapped at post-ReLU points.
//!
//! Two backends are registered:
//!
//! - `tiny-fixture`: a 3-block CNN for 32x32 RGB inputs and 4 classes, trained
//!   on the synthetic quadrant dataset in [`fixture`]. Weights for seed 0 ship
//!   with the crate; other seeds are trained on load.
//! - `resnet18-imagenet`: torchvision-layout ResNet-18 with ImageNet weights read
//!   from the weight cache (downloaded on first use).
//!
//! All parameters are plain tensors, never [`candle_core::Var`]s, so no
//! optimiser can touch them. Gradients still flow to the input image.

pub mod fixture;
mod resnet;
mod tiny;

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Image;

pub use resnet::{resnet18_random_weights, IMAGENET_MEAN, IMAGENET_STD};

pub const TINY_FIXTURE: &str = "tiny-fixture";
pub const RESNET18_IMAGENET: &str = "resnet18-imagenet";

/// Environment variable overriding the weight cache directory.
pub const CACHE_DIR_ENV: &str = "MINEXPLAIN_CACHE_DIR";
/// Environment variable overriding the ResNet-18 download URL.
pub const RESNET18_URL_ENV: &str = "MINEXPLAIN_RESNET18_URL";
/// Set to any value to forbid network access when weights are missing.
pub const OFFLINE_ENV: &str = "MINEXPLAIN_OFFLINE";

const DEFAULT_RESNET18_URL: &str = "https://huggingface.co/timm/resnet18.tv_in1k/resolve/main/model.safetensors";
pub(crate) const RESNET18_FILE: &str = "resnet18-imagenet.safetensors";

/// Which classifier to load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub name: String,
    /// Only meaningful for `tiny-fixture`.
    #[serde(default)]
    pub seed: u64,
}

impl ClassifierSpec {
    pub fn tiny_fixture(seed: u64) -> Self {
        Self { name: TINY_FIXTURE.to_string(), seed }
    }

    pub fn resnet18() -> Self {
        Self { name: RESNET18_IMAGENET.to_string(), seed: 0 }
    }
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self::tiny_fixture(0)
    }
}

/// Where to look for (and whether to fetch) pretrained weights.
#[derive(Debug, Clone)]
pub struct BackendOptions {
    pub cache_dir: PathBuf,
    pub download_url: Option<String>,
}

impl BackendOptions {
    /// Reads [`CACHE_DIR_ENV`], [`RESNET18_URL_ENV`] and [`OFFLINE_ENV`].
    pub fn from_env() -> Self {
        let cache_dir = std::env::var_os(CACHE_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| std::env::var_os("XDG_CACHE_HOME").map(|p| PathBuf::from(p).join("minexplain")))
            .or_else(|| std::env::var_os("HOME").map(|p| PathBuf::from(p).join(".cache").join("minexplain")))
            .unwrap_or_else(|| PathBuf::from(".minexplain-cache"));
        let download_url = if std::env::var_os(OFFLINE_ENV).is_some() {
            None
        } else {
            Some(std::env::var(RESNET18_URL_ENV).unwrap_or_else(|_| DEFAULT_RESNET18_URL.to_string()))
        };
        Self { cache_dir, download_url }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TapDescriptor {
    pub name: String,
    pub depth_index: usize,
    pub channels: usize,
}

/// Tapped post-ReLU activations (shallow to deep) plus logits.
///
/// For a single image (from [`ClassifierHandle::forward_with_taps`]) the
/// activations are `(C, H, W)` and the logits `(num_classes,)`; batched calls
/// keep the leading batch dimension on both.
#[derive(Debug, Clone)]
pub struct ActivationSet {
    pub activations: Vec<Tensor>,
    pub logits: Tensor,
}

impl ActivationSet {
    pub fn detach(&self) -> Self {
        Self {
            activations: self.activations.iter().map(Tensor::detach).collect(),
            logits: self.logits.detach(),
        }
    }
}

pub(crate) enum Network {
    Tiny(tiny::TinyCnn),
    Resnet(Box<resnet::ResNet18>),
}

impl Network {
    fn forward(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        match self {
            Network::Tiny(net) => net.forward(x),
            Network::Resnet(net) => net.forward(x),
        }
    }

    fn parameters(&self) -> Vec<(String, Tensor)> {
        match self {
            Network::Tiny(net) => net.parameters(),
            Network::Resnet(net) => net.parameters(),
        }
    }
}

/// A loaded, frozen classifier. Safe to share across threads.
pub struct ClassifierHandle {
    identifier: String,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    tap_points: Vec<TapDescriptor>,
    network: Network,
    device: Device,
}

impl std::fmt::Debug for ClassifierHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClassifierHandle")
            .field("identifier", &self.identifier)
            .field("input_shape", &self.input_shape)
            .field("num_classes", &self.num_classes)
            .field("tap_points", &self.tap_points)
            .finish()
    }
}

impl ClassifierHandle {
    pub(crate) fn new(
        identifier: impl Into<String>,
        input_shape: (usize, usize, usize),
        num_classes: usize,
        tap_points: Vec<TapDescriptor>,
        network: Network,
    ) -> Self {
        Self {
            identifier: identifier.into(),
            input_shape,
            num_classes,
            tap_points,
            network,
            device: Device::Cpu,
        }
    }

    /// Wraps a tiny fixture network, e.g. one freshly produced by [`fixture::train_fixture`].
    pub fn from_tiny(identifier: impl Into<String>, net: fixture::TrainedFixture) -> Self {
        tiny::handle(identifier, net.network)
    }

    /// Builds a ResNet-18 handle from a torchvision-layout tensor map.
    pub fn resnet18_from_tensors(tensors: std::collections::HashMap<String, Tensor>) -> Result<Self> {
        resnet::handle(tensors)
    }

    pub fn identifier(&self) -> &str {
        &self.identifier
    }

    /// `(H, W, C)`.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn tap_points(&self) -> &[TapDescriptor] {
        &self.tap_points
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub(crate) fn check_image(&self, image: &Image) -> Result<()> {
        if image.shape_hwc() != self.input_shape {
            return Err(Error::shape(self.input_shape, image.shape_hwc()));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let (h, w, c) = self.input_shape;
        match batch.dims() {
            [_, bc, bh, bw] if (*bh, *bw, *bc) == (h, w, c) => Ok(()),
            dims => Err(Error::shape(("N", c, h, w), dims)),
        }
    }

    /// Forward pass on one image; gradients flow back to `image` when it is
    /// part of an autograd graph.
    pub fn forward_with_taps(&self, image: &Image) -> Result<ActivationSet> {
        self.check_image(image)?;
        let (acts, logits) = self.network.forward(&image.batched()?.to_dtype(DType::F32)?)?;
        Ok(ActivationSet {
            activations: acts.into_iter().map(|a| a.squeeze(0)).collect::<candle_core::Result<_>>()?,
            logits: logits.squeeze(0)?,
        })
    }

    /// Forward pass on an `(N, C, H, W)` batch.
    pub fn forward_batch(&self, batch: &Tensor) -> Result<ActivationSet> {
        self.check_batch(batch)?;
        let (activations, logits) = self.network.forward(batch)?;
        Ok(ActivationSet { activations, logits })
    }

    /// `(N, num_classes)` logits for an `(N, C, H, W)` batch.
    pub fn logits_batch(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_batch(batch)?.logits)
    }

    /// Top-1 class and softmax probabilities for one image.
    pub fn predict(&self, image: &Image) -> Result<(usize, Vec<f32>)> {
        let logits = self.forward_with_taps(image)?.logits.detach();
        let probs = candle_nn::ops::softmax(&logits, 0)?.to_vec1::<f32>()?;
        Ok((argmax(&probs), probs))
    }

    /// Named parameters in a fixed order.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        self.network.parameters()
    }

    /// SHA-256 over every parameter's name, shape and raw values.
    pub fn parameter_checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, t) in self.parameters() {
            hasher.update(name.as_bytes());
            for d in t.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

pub(crate) fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Loads a classifier using [`BackendOptions::from_env`].
pub fn load_classifier(spec: &ClassifierSpec) -> Result<ClassifierHandle> {
    load_classifier_with(spec, &BackendOptions::from_env())
}

pub fn load_classifier_with(spec: &ClassifierSpec, options: &BackendOptions) -> Result<ClassifierHandle> {
    match spec.name.as_str() {
        TINY_FIXTURE => tiny::load(spec.seed),
        RESNET18_IMAGENET => resnet::load(options),
        other => Err(Error::UnknownBackend(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_backend_is_rejected() {
        let spec = ClassifierSpec { name: "mobilenet-v9".into(), seed: 0 };
        assert!(matches!(load_classifier(&spec), Err(Error::UnknownBackend(n)) if n == "mobilenet-v9"));
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.7, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[3.0]), 0);
    }
}
