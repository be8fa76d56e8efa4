//! ResNet-18 in torchvision's parameter layout, inference only.
//!
//! Batch norms are folded into per-channel scale/shift at load time. ImageNet
//! mean/std normalisation happens inside [`ResNet18::forward`], so callers pass
//! raw `[0, 1]` pixels and a zeroed pixel stays black rather than "mean grey".

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BackendOptions, ClassifierHandle, Network, TapDescriptor, RESNET18_FILE, RESNET18_IMAGENET};
use crate::error::{Error, Result};
use crate::nn::max_pool2d;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

const INPUT_SIZE: usize = 224;
const NUM_CLASSES: usize = 1000;
const STAGES: [(usize, usize); 4] = [(64, 1), (128, 2), (256, 2), (512, 2)];
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct ConvBn {
    weight: Tensor,
    scale: Tensor,
    shift: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvBn {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_mul(&self.scale)?.broadcast_add(&self.shift)?)
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    downsample: Option<ConvBn>,
}

impl BasicBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.relu()?;
        let h = self.conv2.forward(&h)?;
        let skip = match &self.downsample {
            Some(d) => d.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ResNet18 {
    stem: ConvBn,
    stages: Vec<Vec<BasicBlock>>,
    fc_weight: Tensor,
    fc_bias: Tensor,
    mean: Tensor,
    inv_std: Tensor,
    raw: Vec<(String, Tensor)>,
}

struct Loader<'a> {
    tensors: &'a HashMap<String, Tensor>,
    raw: Vec<(String, Tensor)>,
}

impl Loader<'_> {
    fn get(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::WeightsUnavailable(format!("ResNet-18 weights lack `{name}`")))?;
        if t.dims() != shape {
            return Err(Error::shape(shape, t.dims()));
        }
        let t = t.to_dtype(DType::F32)?.detach();
        self.raw.push((name.to_string(), t.clone()));
        Ok(t)
    }

    fn conv_bn(&mut self, conv: &str, bn: &str, out: usize, inp: usize, k: usize, stride: usize) -> Result<ConvBn> {
        let weight = self.get(&format!("{conv}.weight"), &[out, inp, k, k])?;
        let gamma = self.get(&format!("{bn}.weight"), &[out])?;
        let beta = self.get(&format!("{bn}.bias"), &[out])?;
        let mean = self.get(&format!("{bn}.running_mean"), &[out])?;
        let var = self.get(&format!("{bn}.running_var"), &[out])?;
        let scale = gamma.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        let shift = (beta - (mean * &scale)?)?;
        Ok(ConvBn {
            weight,
            scale: scale.reshape((1, out, 1, 1))?,
            shift: shift.reshape((1, out, 1, 1))?,
            stride,
            padding: k / 2,
        })
    }
}

impl ResNet18 {
    pub fn from_tensors(tensors: &HashMap<String, Tensor>) -> Result<Self> {
        let mut ld = Loader { tensors, raw: Vec::new() };
        let stem = ld.conv_bn("conv1", "bn1", 64, 3, 7, 2)?;
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = 64;
        for (s, &(ch, stride)) in STAGES.iter().enumerate() {
            let mut blocks = Vec::with_capacity(2);
            for b in 0..2 {
                let p = format!("layer{}.{b}", s + 1);
                let (inp, st) = if b == 0 { (in_ch, stride) } else { (ch, 1) };
                let conv1 = ld.conv_bn(&format!("{p}.conv1"), &format!("{p}.bn1"), ch, inp, 3, st)?;
                let conv2 = ld.conv_bn(&format!("{p}.conv2"), &format!("{p}.bn2"), ch, ch, 3, 1)?;
                let downsample = if b == 0 && (st != 1 || inp != ch) {
                    let mut d =
                        ld.conv_bn(&format!("{p}.downsample.0"), &format!("{p}.downsample.1"), ch, inp, 1, st)?;
                    d.padding = 0;
                    Some(d)
                } else {
                    None
                };
                blocks.push(BasicBlock { conv1, conv2, downsample });
            }
            stages.push(blocks);
            in_ch = ch;
        }
        let fc_weight = ld.get("fc.weight", &[NUM_CLASSES, 512])?;
        let fc_bias = ld.get("fc.bias", &[NUM_CLASSES])?;
        let dev = Device::Cpu;
        let mean = Tensor::from_slice(&IMAGENET_MEAN, (1, 3, 1, 1), &dev)?;
        let inv_std = Tensor::from_vec(IMAGENET_STD.iter().map(|s| 1.0 / s).collect::<Vec<f32>>(), (1, 3, 1, 1), &dev)?;
        Ok(Self { stem, stages, fc_weight, fc_bias, mean, inv_std, raw: ld.raw })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let x = x.broadcast_sub(&self.mean)?.broadcast_mul(&self.inv_std)?;
        let stem = self.stem.forward(&x)?.relu()?;
        let mut acts = vec![stem.clone()];
        // Zero padding equals -inf padding here since the input is post-ReLU.
        let mut h = max_pool2d(&stem.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?, 3, 2)?;
        for stage in &self.stages {
            for block in stage {
                h = block.forward(&h)?;
            }
            acts.push(h.clone());
        }
        let pooled = h.mean(3)?.mean(2)?;
        let logits = pooled.matmul(&self.fc_weight.t()?)?.broadcast_add(&self.fc_bias)?;
        Ok((acts, logits))
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        self.raw.clone()
    }
}

fn tap_points() -> Vec<TapDescriptor> {
    let mut taps = vec![TapDescriptor { name: "stem".into(), depth_index: 0, channels: 64 }];
    for (i, &(ch, _)) in STAGES.iter().enumerate() {
        taps.push(TapDescriptor { name: format!("layer{}", i + 1), depth_index: i + 1, channels: ch });
    }
    taps
}

pub(crate) fn handle(tensors: HashMap<String, Tensor>) -> Result<ClassifierHandle> {
    let net = ResNet18::from_tensors(&tensors)?;
    Ok(ClassifierHandle::new(
        RESNET18_IMAGENET,
        (INPUT_SIZE, INPUT_SIZE, 3),
        NUM_CLASSES,
        tap_points(),
        Network::Resnet(Box::new(net)),
    ))
}

fn download(url: &str, dest: &Path) -> std::result::Result<(), String> {
    if let Some(dir) = dest.parent() {
        std::fs::create_dir_all(dir).map_err(|e| format!("creating {}: {e}", dir.display()))?;
    }
    let response = ureq::get(url).call().map_err(|e| format!("GET {url}: {e}"))?;
    let partial = dest.with_extension("partial");
    let mut file = std::fs::File::create(&partial).map_err(|e| format!("{}: {e}", partial.display()))?;
    std::io::copy(&mut response.into_reader(), &mut file).map_err(|e| format!("downloading {url}: {e}"))?;
    file.flush().map_err(|e| e.to_string())?;
    std::fs::rename(&partial, dest).map_err(|e| format!("{}: {e}", dest.display()))
}

pub(crate) fn load(options: &BackendOptions) -> Result<ClassifierHandle> {
    let path = options.cache_dir.join(RESNET18_FILE);
    if !path.exists() {
        match &options.download_url {
            Some(url) => download(url, &path).map_err(|e| {
                Error::WeightsUnavailable(format!("{} is missing and the download failed: {e}", path.display()))
            })?,
            None => {
                return Err(Error::WeightsUnavailable(format!(
                    "{} is missing and downloads are disabled",
                    path.display()
                )))
            }
        }
    }
    let tensors = candle_core::safetensors::load(&path, &Device::Cpu)
        .map_err(|e| Error::WeightsUnavailable(format!("{}: {e}", path.display())))?;
    handle(tensors)
}

/// Randomly initialised weights with the ResNet-18 layout, for tests and
/// offline smoke runs. Never used as a fallback for missing pretrained weights.
pub fn resnet18_random_weights(seed: u64) -> Result<HashMap<String, Tensor>> {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = HashMap::new();
    let mut put = |rng: &mut ChaCha8Rng, name: String, shape: &[usize], lo: f32, hi: f32| -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        map.insert(name, Tensor::from_vec(data, shape, &dev)?);
        Ok(())
    };
    let mut conv_bn = |rng: &mut ChaCha8Rng, conv: &str, bn: &str, out: usize, inp: usize, k: usize| -> Result<()> {
        let b = (2.0 / (inp * k * k) as f32).sqrt();
        put(rng, format!("{conv}.weight"), &[out, inp, k, k], -b, b)?;
        put(rng, format!("{bn}.weight"), &[out], 0.5, 1.0)?;
        put(rng, format!("{bn}.bias"), &[out], -0.1, 0.1)?;
        put(rng, format!("{bn}.running_mean"), &[out], -0.1, 0.1)?;
        put(rng, format!("{bn}.running_var"), &[out], 0.5, 1.5)
    };
    conv_bn(&mut rng, "conv1", "bn1", 64, 3, 7)?;
    let mut in_ch = 64;
    for (s, &(ch, stride)) in STAGES.iter().enumerate() {
        for b in 0..2 {
            let p = format!("layer{}.{b}", s + 1);
            let inp = if b == 0 { in_ch } else { ch };
            conv_bn(&mut rng, &format!("{p}.conv1"), &format!("{p}.bn1"), ch, inp, 3)?;
            conv_bn(&mut rng, &format!("{p}.conv2"), &format!("{p}.bn2"), ch, ch, 3)?;
            if b == 0 && (stride != 1 || inp != ch) {
                conv_bn(&mut rng, &format!("{p}.downsample.0"), &format!("{p}.downsample.1"), ch, inp, 1)?;
            }
        }
        in_ch = ch;
    }
    let b = 1.0 / (512f32).sqrt();
    put(&mut rng, "fc.weight".into(), &[NUM_CLASSES, 512], -b, b)?;
    put(&mut rng, "fc.bias".into(), &[NUM_CLASSES], -b, b)?;
    Ok(map)
}
