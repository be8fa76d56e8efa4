//! The mask generator: a small U-Net mapping an image to a soft mask, plus
//! straight-through binarisation and mask application.
//!
//! Each conv block is `conv3x3 -> instance norm -> ReLU`, twice. The
//! normalisation matters for per-image optimisation: without it the sparsity
//! gradient, which is the same sign at every pixel, dominates the shared
//! parameters and drags the whole mask below threshold at once before the
//! fidelity terms can shape it.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{instance_norm, max_pool2d, Conv2d, ParamStore};
use crate::tensor::{Image, Mask, MaskState};

const CHECKPOINT_FORMAT: &str = "minexplain-masker";
const CHECKPOINT_VERSION: &str = "1";
const NORM_EPS: f64 = 1e-5;

/// Soft masks are clamped into `[SOFT_FLOOR, 1 - SOFT_FLOOR]` so they stay
/// strictly inside `(0, 1)` even where the sigmoid rounds to 0 or 1.
pub const SOFT_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskerConfig {
    /// Channels of the first encoder level; doubled at each level below.
    pub base_channels: usize,
    /// Number of resolution levels (so `depth - 1` poolings).
    pub depth: usize,
    /// Seed for the parameter initialisation.
    pub seed: u64,
    /// Initial bias of the output convolution (mask logit offset).
    pub output_bias: f64,
}

impl Default for MaskerConfig {
    fn default() -> Self {
        Self { base_channels: 16, depth: 3, seed: 0, output_bias: 0.0 }
    }
}

#[derive(Debug, Clone)]
struct Block {
    a: Conv2d,
    b: Conv2d,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    fn init(
        store: &mut ParamStore,
        name: &str,
        rng: &mut ChaCha8Rng,
        inp: usize,
        out: usize,
        dtype: DType,
        dev: &Device,
    ) -> Result<Self> {
        Ok(Self {
            a: Conv2d::init(store, &format!("{name}.a"), rng, inp, out, 3, 1, 1, dtype, dev)?,
            b: Conv2d::init(store, &format!("{name}.b"), rng, out, out, 3, 1, 1, dtype, dev)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = instance_norm(&self.a.forward(x)?, NORM_EPS)?.relu()?;
        Ok(instance_norm(&self.b.forward(&h)?, NORM_EPS)?.relu()?)
    }
}

/// Trainable mask generator. Owned by a single explanation job.
#[derive(Debug, Clone)]
pub struct Masker {
    config: MaskerConfig,
    input_shape: (usize, usize, usize),
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    head: Conv2d,
    store: ParamStore,
}

impl Masker {
    /// Fresh parameters for `(H, W, C)` inputs.
    pub fn new(config: &MaskerConfig, input_shape: (usize, usize, usize), dtype: DType, device: &Device) -> Result<Self> {
        Self::build(config, input_shape, dtype, device, None)
    }

    fn build(
        config: &MaskerConfig,
        input_shape: (usize, usize, usize),
        dtype: DType,
        device: &Device,
        weights: Option<&HashMap<String, Tensor>>,
    ) -> Result<Self> {
        let (h, w, c) = input_shape;
        if config.depth == 0 || config.base_channels == 0 {
            return Err(Error::InvalidConfig("masker depth and base_channels must be positive".into()));
        }
        let factor = 1usize << (config.depth - 1);
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "masker depth {} needs input sides divisible by {factor}, got {h}x{w}",
                config.depth
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new(true);
        let widths: Vec<usize> = (0..config.depth).map(|l| config.base_channels << l).collect();
        let mut encoder = Vec::with_capacity(config.depth);
        let mut inp = c;
        for (l, &out) in widths.iter().enumerate() {
            encoder.push(Block::init(&mut store, &format!("enc{l}"), &mut rng, inp, out, dtype, device)?);
            inp = out;
        }
        let mut decoder = Vec::with_capacity(config.depth - 1);
        for l in (0..config.depth - 1).rev() {
            let block = Block::init(&mut store, &format!("dec{l}"), &mut rng, inp + widths[l], widths[l], dtype, device)?;
            decoder.push(block);
            inp = widths[l];
        }
        let mut head_store = ParamStore::new(false);
        let mut head = Conv2d::init(&mut head_store, "head", &mut rng, inp, 1, 1, 1, 0, dtype, device)?;
        head.weight = store.register("head.weight", head.weight.clone())?;
        let bias = Tensor::full(config.output_bias, 1, device)?.to_dtype(dtype)?;
        head.bias = Some(store.register("head.bias", bias)?);

        let mut masker = Self { config: config.clone(), input_shape, encoder, decoder, head, store };
        if let Some(weights) = weights {
            masker.load_weights(weights)?;
        }
        Ok(masker)
    }

    fn load_weights(&mut self, weights: &HashMap<String, Tensor>) -> Result<()> {
        for ((name, _), var) in self.store.entries().iter().zip(self.store.vars()) {
            let t = weights
                .get(name)
                .ok_or_else(|| Error::InvalidConfig(format!("masker checkpoint lacks `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::shape(var.dims(), t.dims()));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    pub fn config(&self) -> &MaskerConfig {
        &self.config
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn vars(&self) -> &[Var] {
        self.store.vars()
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        self.store.entries().to_vec()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.vars().iter().map(|v| v.elem_count()).sum()
    }

    /// Mask logits `(N, H, W)` for an `(N, C, H, W)` batch.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let (h, w, c) = self.input_shape;
        match batch.dims() {
            [_, bc, bh, bw] if (*bh, *bw, *bc) == (h, w, c) => {}
            dims => return Err(Error::shape(("N", c, h, w), dims)),
        }
        let dtype = self.head.weight.dtype();
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut x = batch.to_dtype(dtype)?;
        for (l, block) in self.encoder.iter().enumerate() {
            if l > 0 {
                x = max_pool2d(&x, 2, 2)?;
            }
            x = block.forward(&x)?;
            skips.push(x.clone());
        }
        skips.pop();
        for block in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            let (_, _, sh, sw) = skip.dims4()?;
            let up = x.upsample_nearest2d(sh, sw)?;
            x = block.forward(&Tensor::cat(&[&up, &skip], 1)?)?;
        }
        Ok(self.head.forward(&x)?.squeeze(1)?)
    }

    /// Soft masks `(N, H, W)`, strictly inside `(0, 1)`.
    pub fn soft_masks(&self, batch: &Tensor) -> Result<Tensor> {
        let s = candle_nn::ops::sigmoid(&self.logits(batch)?)?;
        Ok(s.clamp(SOFT_FLOOR, 1.0 - SOFT_FLOOR)?)
    }

    /// Sigmoid of the decoder logits for one image.
    pub fn generate_soft_mask(&self, image: &Image) -> Result<Mask> {
        let (h, w, c) = self.input_shape;
        if image.shape_hwc() != (h, w, c) {
            return Err(Error::shape(self.input_shape, image.shape_hwc()));
        }
        let s = self.soft_masks(&image.batched()?)?.squeeze(0)?;
        Ok(Mask::new_unchecked(s, MaskState::Soft))
    }

    /// Writes a safetensors checkpoint with the config embedded as metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config).expect("config serialises"));
        let (h, w, c) = self.input_shape;
        meta.insert("input_shape".to_string(), format!("{h},{w},{c}"));
        meta.insert("dtype".to_string(), format!("{:?}", self.head.weight.dtype()));
        let entries = self.parameters();
        let bytes = safetensors::serialize(entries.iter().map(|(n, t)| (n.as_str(), t)), Some(meta))
            .map_err(|e| Error::format(path, e))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::format(path, e))?;
        let fields = meta.metadata().clone().unwrap_or_default();
        let field = |k: &str| fields.get(k).ok_or_else(|| Error::format(path, format!("checkpoint lacks `{k}`")));
        if field("format")? != CHECKPOINT_FORMAT {
            return Err(Error::format(path, "not a masker checkpoint"));
        }
        if field("version")? != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {}", field("version")?)));
        }
        let config: MaskerConfig = serde_json::from_str(field("config")?).map_err(|e| Error::format(path, e))?;
        let dims: Vec<usize> = field("input_shape")?
            .split(',')
            .map(|s| s.parse().map_err(|e| Error::format(path, e)))
            .collect::<Result<_>>()?;
        let [h, w, c] = dims[..] else {
            return Err(Error::format(path, "input_shape must have three entries"));
        };
        let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
        let dtype = tensors.get("head.bias").map(|t| t.dtype()).unwrap_or(DType::F32);
        Self::build(&config, (h, w, c), dtype, device, Some(&tensors))
    }
}

/// Thresholds a soft mask: `value >= threshold` becomes 1, else 0. The
/// backward pass is the identity, so gradients reach the soft mask unchanged.
pub fn binarize_ste(soft: &Mask, threshold: f64) -> Result<Mask> {
    Ok(Mask::new_unchecked(binarize_ste_tensor(soft.values(), threshold)?, MaskState::Binary))
}

pub(crate) fn binarize_ste_tensor(soft: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidConfig(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let hard = soft.ge(threshold)?.to_dtype(soft.dtype())?.detach();
    // soft - detach(soft) is exactly zero in value but carries d/dsoft = 1.
    Ok((hard + (soft - soft.detach())?)?)
}

/// `e = m * x`, with the mask broadcast across channels.
pub fn apply_mask(image: &Image, mask: &Mask) -> Result<Image> {
    if (image.height(), image.width()) != (mask.height(), mask.width()) {
        return Err(Error::shape((image.height(), image.width()), (mask.height(), mask.width())));
    }
    let m = mask.values().to_dtype(image.tensor().dtype())?.unsqueeze(0)?;
    Image::from_tensor(image.tensor().broadcast_mul(&m)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, dtype: DType) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = crate::nn::uniform_fan_in(&mut rng, &[3, 8, 8], 1, dtype, &Device::Cpu).unwrap();
        Image::from_tensor(((t + 1.0).unwrap() * 0.5).unwrap()).unwrap()
    }

    fn small() -> MaskerConfig {
        MaskerConfig { base_channels: 4, depth: 3, seed: 7, output_bias: 0.0 }
    }

    #[test]
    fn soft_mask_is_deterministic_and_in_open_unit_interval() {
        let x = image(1, DType::F32);
        let a = Masker::new(&small(), (8, 8, 3), DType::F32, &Device::Cpu).unwrap();
        let b = Masker::new(&small(), (8, 8, 3), DType::F32, &Device::Cpu).unwrap();
        let ma = a.generate_soft_mask(&x).unwrap().to_vec().unwrap();
        let mb = b.generate_soft_mask(&x).unwrap().to_vec().unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.len(), 64);
        assert!(ma.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn output_bias_saturation_stays_strict() {
        let cfg = MaskerConfig { output_bias: 60.0, ..small() };
        let m = Masker::new(&cfg, (8, 8, 3), DType::F32, &Device::Cpu).unwrap();
        let v = m.generate_soft_mask(&image(2, DType::F32)).unwrap().to_vec().unwrap();
        assert!(v.iter().all(|x| *x < 1.0 && *x > 0.99));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = Masker::new(&small(), (8, 8, 3), DType::F32, &Device::Cpu).unwrap();
        let wrong = Image::filled(0.5, (4, 4, 3), &Device::Cpu).unwrap();
        assert!(matches!(m.generate_soft_mask(&wrong), Err(Error::ShapeMismatch { .. })));
        assert!(Masker::new(&small(), (6, 6, 3), DType::F32, &Device::Cpu).is_err());
    }

    #[test]
    fn binarize_thresholds() {
        let dev = Device::Cpu;
        let soft = Mask::from_vec(vec![0.7, 0.3, 0.5, 0.49999], 2, 2, MaskState::Soft, &dev).unwrap();
        let hard = binarize_ste(&soft, 0.5).unwrap();
        assert_eq!(hard.state(), MaskState::Binary);
        assert_eq!(hard.to_vec().unwrap(), vec![1.0, 0.0, 1.0, 0.0]);
        assert!(binarize_ste(&soft, 1.0).is_err());
        assert!(binarize_ste(&soft, 0.0).is_err());
    }

    #[test]
    fn ste_backward_is_identity() {
        let dev = Device::Cpu;
        let s = Var::from_vec(vec![0.2f64, 0.8, 0.5, 0.1, 0.9, 0.6], (2, 3), &dev).unwrap();
        let b = binarize_ste_tensor(s.as_tensor(), 0.5).unwrap();
        let grads = b.sum_all().unwrap().backward().unwrap();
        let g = grads.get(s.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(g, vec![1.0; 6]);
        // weighted sum: gradient is the weight itself
        let w = Tensor::new(&[[1.0f64, -2.0, 3.0], [0.5, 0.0, 4.0]], &dev).unwrap();
        let grads = (b * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g = grads.get(s.as_tensor()).unwrap();
        assert_eq!(g.to_vec2::<f64>().unwrap(), w.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn apply_mask_cases() {
        let dev = Device::Cpu;
        let x = image(3, DType::F32);
        let ones = Mask::ones(8, 8, &dev).unwrap();
        assert_eq!(apply_mask(&x, &ones).unwrap().to_hwc_vec().unwrap(), x.to_hwc_vec().unwrap());
        let zeros = Mask::zeros(8, 8, &dev).unwrap();
        assert!(apply_mask(&x, &zeros).unwrap().to_hwc_vec().unwrap().iter().all(|v| *v == 0.0));
        let rect = Mask::rectangle(8, 8, 2..5, 1..4, &dev).unwrap();
        let e = apply_mask(&x, &rect).unwrap().to_hwc_vec().unwrap();
        let xv = x.to_hwc_vec().unwrap();
        for r in 0..8 {
            for c in 0..8 {
                for ch in 0..3 {
                    let i = (r * 8 + c) * 3 + ch;
                    let inside = (2..5).contains(&r) && (1..4).contains(&c);
                    assert_eq!(e[i], if inside { xv[i] } else { 0.0 });
                }
            }
        }
        let bad = Mask::ones(4, 8, &dev).unwrap();
        assert!(apply_mask(&x, &bad).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("masker.safetensors");
        let m = Masker::new(&small(), (8, 8, 3), DType::F32, &Device::Cpu).unwrap();
        m.save(&path).unwrap();
        let back = Masker::load(&path, &Device::Cpu).unwrap();
        assert_eq!(back.config(), m.config());
        let x = image(4, DType::F32);
        assert_eq!(
            m.generate_soft_mask(&x).unwrap().to_vec().unwrap(),
            back.generate_soft_mask(&x).unwrap().to_vec().unwrap()
        );
    }

    #[test]
    fn default_masker_is_lightweight() {
        let m = Masker::new(&MaskerConfig::default(), (224, 224, 3), DType::F32, &Device::Cpu).unwrap();
        // ResNet-18 has 11,689,512 parameters; 5% of that is ~584k.
        assert!(m.num_parameters() < 584_475, "{}", m.num_parameters());
    }
}
