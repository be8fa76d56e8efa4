//! Random backgrounds and the counterfactual `m * x + (1 - m) * r`.

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Image, Mask};

fn default_mean() -> f64 {
    0.5
}

fn default_std() -> f64 {
    0.25
}

fn default_sigma() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackgroundKind {
    /// i.i.d. `U[0, 1)` per pixel and channel.
    UniformNoise,
    /// i.i.d. normal per pixel and channel, clipped to `[0, 1]`.
    GaussianNoise {
        #[serde(default = "default_mean")]
        mean: f64,
        #[serde(default = "default_std")]
        std: f64,
    },
    Constant { value: f64 },
    /// The source image's pixels in a random spatial order.
    PixelShuffle,
    /// The source image under a Gaussian blur (deterministic).
    Blur {
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
}

impl BackgroundKind {
    pub fn name(&self) -> &'static str {
        match self {
            BackgroundKind::UniformNoise => "uniform_noise",
            BackgroundKind::GaussianNoise { .. } => "gaussian_noise",
            BackgroundKind::Constant { .. } => "constant",
            BackgroundKind::PixelShuffle => "pixel_shuffle",
            BackgroundKind::Blur { .. } => "blur",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = match self {
            BackgroundKind::GaussianNoise { mean, std } => !(mean.is_finite() && std.is_finite() && *std >= 0.0),
            BackgroundKind::Constant { value } => !value.is_finite(),
            BackgroundKind::Blur { sigma } => !(sigma.is_finite() && *sigma > 0.0),
            _ => false,
        };
        if bad {
            return Err(Error::InvalidConfig(format!("bad parameters for {} background: {self:?}", self.name())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SamplerSpec {
    #[serde(flatten)]
    kind: BackgroundKind,
    #[serde(default)]
    seed: u64,
}

/// A seeded background stream. Each draw advances the stream; [`reset`]
/// rewinds it to the seed.
///
/// [`reset`]: BackgroundSampler::reset
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "SamplerSpec", into = "SamplerSpec")]
pub struct BackgroundSampler {
    kind: BackgroundKind,
    seed: u64,
    rng: ChaCha8Rng,
}

impl TryFrom<SamplerSpec> for BackgroundSampler {
    type Error = Error;

    fn try_from(spec: SamplerSpec) -> Result<Self> {
        Self::new(spec.kind, spec.seed)
    }
}

impl From<BackgroundSampler> for SamplerSpec {
    fn from(s: BackgroundSampler) -> Self {
        SamplerSpec { kind: s.kind, seed: s.seed }
    }
}

impl PartialEq for BackgroundSampler {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.seed == other.seed
    }
}

impl Default for BackgroundSampler {
    fn default() -> Self {
        Self::new(BackgroundKind::UniformNoise, 0).expect("uniform noise is valid")
    }
}

impl BackgroundSampler {
    pub fn new(kind: BackgroundKind, seed: u64) -> Result<Self> {
        kind.validate()?;
        Ok(Self { kind, seed, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn kind(&self) -> &BackgroundKind {
        &self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn reset(&mut self) {
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
    }

    /// A fresh sampler with the same kind and a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { kind: self.kind.clone(), seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// One background in interleaved `H x W x C` order.
    fn draw_hwc(&mut self, (h, w, c): (usize, usize, usize), source: Option<&[f32]>) -> Result<Vec<f32>> {
        let n = h * w * c;
        let data = match &self.kind {
            BackgroundKind::UniformNoise => (0..n).map(|_| self.rng.gen::<f32>()).collect(),
            BackgroundKind::GaussianNoise { mean, std } => {
                let normal = Normal::new(*mean, *std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
                (0..n).map(|_| normal.sample(&mut self.rng).clamp(0.0, 1.0) as f32).collect()
            }
            BackgroundKind::Constant { value } => vec![value.clamp(0.0, 1.0) as f32; n],
            BackgroundKind::PixelShuffle => {
                let src = source.ok_or(Error::MissingSource("pixel_shuffle"))?;
                let mut order: Vec<usize> = (0..h * w).collect();
                order.shuffle(&mut self.rng);
                let mut out = Vec::with_capacity(n);
                for p in order {
                    out.extend(src[p * c..(p + 1) * c].iter().map(|v| v.clamp(0.0, 1.0)));
                }
                out
            }
            BackgroundKind::Blur { sigma } => {
                let src = source.ok_or(Error::MissingSource("blur"))?;
                gaussian_blur(src, (h, w, c), *sigma)
            }
        };
        Ok(data)
    }

    fn check_source(shape: (usize, usize, usize), source: Option<&Image>) -> Result<Option<Vec<f32>>> {
        match source {
            Some(img) if img.shape_hwc() != shape => Err(Error::shape(shape, img.shape_hwc())),
            Some(img) => Ok(Some(img.to_hwc_vec()?)),
            None => Ok(None),
        }
    }

    /// Draws one background of shape `(H, W, C)` with values in `[0, 1]`.
    pub fn sample(&mut self, shape: (usize, usize, usize), source: Option<&Image>, device: &Device) -> Result<Image> {
        let src = Self::check_source(shape, source)?;
        let data = self.draw_hwc(shape, src.as_deref())?;
        Image::from_hwc(&data, shape.0, shape.1, shape.2, device)
    }

    /// Draws `n` backgrounds as an `(N, C, H, W)` tensor.
    pub fn sample_batch(
        &mut self,
        n: usize,
        shape: (usize, usize, usize),
        source: Option<&Image>,
        device: &Device,
    ) -> Result<Tensor> {
        let src = Self::check_source(shape, source)?;
        let (h, w, c) = shape;
        let mut all = Vec::with_capacity(n * h * w * c);
        for _ in 0..n {
            all.extend(self.draw_hwc(shape, src.as_deref())?);
        }
        Ok(Tensor::from_vec(all, (n, h, w, c), device)?.permute((0, 3, 1, 2))?.contiguous()?)
    }
}

/// Separable Gaussian blur with clamped borders, kernel radius `ceil(3 sigma)`.
fn gaussian_blur(src: &[f32], (h, w, c): (usize, usize, usize), sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let pass = |input: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0f32; input.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (k, wgt) in kernel.iter().enumerate() {
                        let off = k as isize - radius;
                        let (yy, xx) = if horizontal {
                            (y, (x as isize + off).clamp(0, w as isize - 1) as usize)
                        } else {
                            ((y as isize + off).clamp(0, h as isize - 1) as usize, x)
                        };
                        acc += wgt * input[(yy * w + xx) * c + ch] as f64;
                    }
                    out[(y * w + x) * c + ch] = acc.clamp(0.0, 1.0) as f32;
                }
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// `m * x + (1 - m) * r`: with a binary mask, `x` where the mask is 1 and `r`
/// elsewhere.
pub fn compose_counterfactual(x: &Image, m: &Mask, r: &Image) -> Result<Image> {
    if x.shape_hwc() != r.shape_hwc() {
        return Err(Error::shape(x.shape_hwc(), r.shape_hwc()));
    }
    if (x.height(), x.width()) != (m.height(), m.width()) {
        return Err(Error::shape((x.height(), x.width()), (m.height(), m.width())));
    }
    let dtype = x.tensor().dtype();
    let m = m.values().to_dtype(dtype)?.unsqueeze(0)?;
    Image::from_tensor(compose_tensor(x.tensor(), &m, &r.tensor().to_dtype(dtype)?)?)
}

/// Broadcasting form used by the trainer: `x`, `m` and `r` may carry batch
/// dimensions as long as they broadcast together.
pub(crate) fn compose_tensor(x: &Tensor, m: &Tensor, r: &Tensor) -> Result<Tensor> {
    let kept = x.broadcast_mul(m)?;
    let inv = (1.0 - m)?;
    Ok(kept.broadcast_add(&r.broadcast_mul(&inv)?)?)
}
