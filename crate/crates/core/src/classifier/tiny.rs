use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{fixture, ClassifierHandle, Network, TapDescriptor, TINY_FIXTURE};
use crate::error::{Error, Result};
use crate::nn::{uniform_fan_in, Conv2d, Linear, ParamStore};

pub(crate) const INPUT_SIZE: usize = 32;
pub(crate) const NUM_CLASSES: usize = 4;
const CHANNELS: [usize; 3] = [8, 16, 32];
const FLAT: usize = 32 * 4 * 4;

pub(crate) const BLOB_FORMAT: &str = "minexplain-tiny-fixture";
pub(crate) const BLOB_VERSION: &str = "1";

static BUNDLED_SEED0: &[u8] = include_bytes!("../../data/tiny_fixture_v1.safetensors");

/// Three stride-2 conv+ReLU blocks and a linear head on the flattened
/// `32 x 4 x 4` feature map.
#[derive(Debug, Clone)]
pub(crate) struct TinyCnn {
    convs: [Conv2d; 3],
    head: Linear,
    store: ParamStore,
}

impl TinyCnn {
    pub fn init(seed: u64, trainable: bool, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(trainable);
        let mut in_ch = 3;
        let mut convs = Vec::with_capacity(3);
        for (i, &out_ch) in CHANNELS.iter().enumerate() {
            let name = format!("conv{}", i + 1);
            convs.push(Conv2d::init(&mut store, &name, &mut rng, in_ch, out_ch, 3, 2, 1, DType::F32, device)?);
            in_ch = out_ch;
        }
        let w = uniform_fan_in(&mut rng, &[NUM_CLASSES, FLAT], FLAT, DType::F32, device)?;
        let b = uniform_fan_in(&mut rng, &[NUM_CLASSES], FLAT, DType::F32, device)?;
        let head = Linear { weight: store.register("fc.weight", w)?, bias: store.register("fc.bias", b)? };
        let convs: [Conv2d; 3] = convs.try_into().expect("three conv blocks");
        Ok(Self { convs, head, store })
    }

    pub fn from_tensors(tensors: &HashMap<String, Tensor>) -> Result<Self> {
        let get = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::WeightsUnavailable(format!("fixture weights lack `{name}`")))?;
            if t.dims() != shape {
                return Err(Error::shape(shape, t.dims()));
            }
            Ok(t.to_dtype(DType::F32)?.detach())
        };
        let mut store = ParamStore::new(false);
        let mut in_ch = 3;
        let mut convs = Vec::with_capacity(3);
        for (i, &out_ch) in CHANNELS.iter().enumerate() {
            let name = format!("conv{}", i + 1);
            let w = store.register(format!("{name}.weight"), get(&format!("{name}.weight"), &[out_ch, in_ch, 3, 3])?)?;
            let b = store.register(format!("{name}.bias"), get(&format!("{name}.bias"), &[out_ch])?)?;
            convs.push(Conv2d { weight: w, bias: Some(b), stride: 2, padding: 1 });
            in_ch = out_ch;
        }
        let head = Linear {
            weight: store.register("fc.weight", get("fc.weight", &[NUM_CLASSES, FLAT])?)?,
            bias: store.register("fc.bias", get("fc.bias", &[NUM_CLASSES])?)?,
        };
        let convs: [Conv2d; 3] = convs.try_into().expect("three conv blocks");
        Ok(Self { convs, head, store })
    }

    /// A frozen copy with freshly allocated, non-variable tensors.
    pub fn frozen(&self) -> Result<Self> {
        let map: HashMap<String, Tensor> = self
            .store
            .entries()
            .iter()
            .map(|(n, t)| Ok((n.clone(), t.detach().copy()?)))
            .collect::<Result<_>>()?;
        Self::from_tensors(&map)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut acts = Vec::with_capacity(3);
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
            acts.push(h.clone());
        }
        let logits = self.head.forward(&h.flatten_from(1)?)?;
        Ok((acts, logits))
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        self.store.entries().to_vec()
    }

    pub fn vars(&self) -> &[candle_core::Var] {
        self.store.vars()
    }

    /// Serialises to a safetensors blob with format/version metadata.
    pub fn to_safetensors(&self, metadata: HashMap<String, String>) -> Result<Vec<u8>> {
        let mut meta = metadata;
        meta.insert("format".into(), BLOB_FORMAT.into());
        meta.insert("version".into(), BLOB_VERSION.into());
        let entries = self.parameters();
        safetensors::serialize(entries.iter().map(|(n, t)| (n.as_str(), t)), Some(meta))
            .map_err(|e| Error::InvalidConfig(format!("serialising fixture weights: {e}")))
    }

    pub fn from_safetensors(bytes: &[u8]) -> Result<Self> {
        let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::WeightsUnavailable(format!("corrupt fixture blob: {e}")))?;
        let fields = meta.metadata().clone().unwrap_or_default();
        if fields.get("format").map(String::as_str) != Some(BLOB_FORMAT) {
            return Err(Error::WeightsUnavailable("fixture blob has the wrong format tag".into()));
        }
        if fields.get("version").map(String::as_str) != Some(BLOB_VERSION) {
            return Err(Error::WeightsUnavailable(format!(
                "fixture blob version {:?}, expected {BLOB_VERSION}",
                fields.get("version")
            )));
        }
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?;
        Self::from_tensors(&tensors)
    }
}

fn tap_points() -> Vec<TapDescriptor> {
    CHANNELS
        .iter()
        .enumerate()
        .map(|(i, &c)| TapDescriptor { name: format!("block{}", i + 1), depth_index: i, channels: c })
        .collect()
}

pub(crate) fn handle(identifier: impl Into<String>, net: TinyCnn) -> ClassifierHandle {
    ClassifierHandle::new(identifier, (INPUT_SIZE, INPUT_SIZE, 3), NUM_CLASSES, tap_points(), Network::Tiny(net))
}

pub(crate) fn load(seed: u64) -> Result<ClassifierHandle> {
    let net = if seed == 0 {
        if BUNDLED_SEED0.is_empty() {
            return Err(Error::WeightsUnavailable(
                "bundled tiny-fixture weights are missing; regenerate them with `minexplain train-fixture`".into(),
            ));
        }
        TinyCnn::from_safetensors(BUNDLED_SEED0)?
    } else {
        fixture::train_fixture(seed, &fixture::FixtureTrainConfig::default())?.network
    };
    Ok(handle(format!("{TINY_FIXTURE}/seed{seed}"), net))
}
