//! Image and mask containers.
//!
//! Both wrap a candle [`Tensor`] so that gradients can flow through them during
//! optimisation. Images are stored channel-first `(C, H, W)` because that is the
//! layout the convolutions want; the `*_hwc` helpers convert to and from the
//! interleaved `H x W x C` layout used by image files.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// A float image with values in `[0, 1]`, stored as a `(C, H, W)` tensor.
#[derive(Debug, Clone)]
pub struct Image {
    tensor: Tensor,
}

impl Image {
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(Error::shape("(C, H, W)", tensor.dims()));
        }
        Ok(Self { tensor })
    }

    /// Builds an image from interleaved `H x W x C` values.
    pub fn from_hwc(data: &[f32], height: usize, width: usize, channels: usize, device: &Device) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(height * width * channels, data.len()));
        }
        let tensor = Tensor::from_slice(data, (height, width, channels), device)?.permute((2, 0, 1))?.contiguous()?;
        Ok(Self { tensor })
    }

    pub fn filled(value: f32, (height, width, channels): (usize, usize, usize), device: &Device) -> Result<Self> {
        let tensor = Tensor::full(value, (channels, height, width), device)?;
        Ok(Self { tensor })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[2]
    }

    /// `(H, W, C)`, the order used throughout the public API.
    pub fn shape_hwc(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), self.channels())
    }

    pub fn to_hwc_vec(&self) -> Result<Vec<f32>> {
        Ok(self
            .tensor
            .to_dtype(DType::F32)?
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_vec1::<f32>()?)
    }

    /// `(1, C, H, W)` view for feeding a network.
    pub fn batched(&self) -> Result<Tensor> {
        Ok(self.tensor.unsqueeze(0)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskState {
    /// Values in `[0, 1]`, typically sigmoid outputs.
    Soft,
    /// Values exactly 0 or 1.
    Binary,
}

/// A single-channel `(H, W)` mask.
#[derive(Debug, Clone)]
pub struct Mask {
    values: Tensor,
    state: MaskState,
}

impl Mask {
    /// Wraps an `(H, W)` tensor, validating the range implied by `state`.
    pub fn new(values: Tensor, state: MaskState) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::shape("(H, W)", values.dims()));
        }
        let flat = values.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let ok = match state {
            MaskState::Soft => flat.iter().all(|v| (0.0..=1.0).contains(v)),
            MaskState::Binary => flat.iter().all(|&v| v == 0.0 || v == 1.0),
        };
        if !ok {
            return Err(Error::InvalidConfig(format!("mask values out of range for {state:?} state")));
        }
        Ok(Self { values, state })
    }

    /// Wraps without scanning the values; callers guarantee the range.
    pub(crate) fn new_unchecked(values: Tensor, state: MaskState) -> Self {
        Self { values, state }
    }

    pub fn from_vec(data: Vec<f32>, height: usize, width: usize, state: MaskState, device: &Device) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(height * width, data.len()));
        }
        Self::new(Tensor::from_vec(data, (height, width), device)?, state)
    }

    pub fn ones(height: usize, width: usize, device: &Device) -> Result<Self> {
        Ok(Self::new_unchecked(Tensor::ones((height, width), DType::F32, device)?, MaskState::Binary))
    }

    pub fn zeros(height: usize, width: usize, device: &Device) -> Result<Self> {
        Ok(Self::new_unchecked(Tensor::zeros((height, width), DType::F32, device)?, MaskState::Binary))
    }

    /// Binary mask that is 1 inside the half-open rectangle `rows x cols`.
    pub fn rectangle(
        height: usize,
        width: usize,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
        device: &Device,
    ) -> Result<Self> {
        let mut data = vec![0f32; height * width];
        for r in rows.clone() {
            for c in cols.clone() {
                if r < height && c < width {
                    data[r * width + c] = 1.0;
                }
            }
        }
        Self::from_vec(data, height, width, MaskState::Binary, device)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn state(&self) -> MaskState {
        self.state
    }

    pub fn height(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.values.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
    }

    /// Mean of the mask values.
    pub fn mean(&self) -> Result<f64> {
        Ok(self.values.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?)
    }

    /// `1 - m`, keeping the state.
    pub fn complement(&self) -> Result<Self> {
        Ok(Self::new_unchecked(self.values.affine(-1.0, 1.0)?, self.state))
    }

    /// A copy cut off from any autograd graph.
    pub fn detach(&self) -> Self {
        Self::new_unchecked(self.values.detach(), self.state)
    }
}

/// Scalar value of a rank-0 (or single element) tensor as `f64`.
pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}
