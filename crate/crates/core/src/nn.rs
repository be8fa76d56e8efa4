//! Small building blocks shared by the classifier fixture and the masker.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Named parameters, either frozen tensors or trainable [`Var`]s.
#[derive(Debug, Default, Clone)]
pub(crate) struct ParamStore {
    entries: Vec<(String, Tensor)>,
    vars: Vec<Var>,
    trainable: bool,
}

impl ParamStore {
    pub fn new(trainable: bool) -> Self {
        Self { entries: Vec::new(), vars: Vec::new(), trainable }
    }

    /// Registers `t` under `name` and returns the handle layers should use.
    pub fn register(&mut self, name: impl Into<String>, t: Tensor) -> Result<Tensor> {
        let t = if self.trainable {
            let var = Var::from_tensor(&t)?;
            let handle = var.as_tensor().clone();
            self.vars.push(var);
            handle
        } else {
            t
        };
        self.entries.push((name.into(), t.clone()));
        Ok(t)
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for conv and
/// linear layers.
pub(crate) fn uniform_fan_in(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Freshly initialised `out x in x k x k` convolution with bias.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let w = uniform_fan_in(rng, &[out_ch, in_ch, kernel, kernel], fan_in, dtype, device)?;
        let b = uniform_fan_in(rng, &[out_ch], fan_in, dtype, device)?;
        Ok(Self {
            weight: store.register(format!("{name}.weight"), w)?,
            bias: Some(store.register(format!("{name}.bias"), b)?),
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if self.stride == 1 {
            conv2d_im2col(x, &self.weight, self.padding)?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dims1()?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Stride-1 convolution as shifted views plus one matmul. Same result as
/// `Tensor::conv2d`, but the backward pass only goes through matmul and
/// slicing, which is several times cheaper on CPU than candle's conv backward.
pub(crate) fn conv2d_im2col(x: &Tensor, weight: &Tensor, padding: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(crate::error::Error::shape((o, c, kh, kw), weight.dims()));
    }
    let (ho, wo) = (h + 2 * padding + 1 - kh, w + 2 * padding + 1 - kw);
    let wm = weight.reshape((o, c * kh * kw))?;
    if kh == 1 && kw == 1 && padding == 0 {
        let y = wm.broadcast_matmul(&x.reshape((n, c, h * w))?)?;
        return Ok(y.reshape((n, o, h, w))?);
    }
    let xp = x.pad_with_zeros(2, padding, padding)?.pad_with_zeros(3, padding, padding)?;
    let mut cols = Vec::with_capacity(kh * kw);
    for i in 0..kh {
        for j in 0..kw {
            cols.push(xp.narrow(2, i, ho)?.narrow(3, j, wo)?);
        }
    }
    // (N, C, kh*kw, Ho, Wo) flattens in the same order as the weight's (C, kh, kw)
    let col = Tensor::stack(&cols, 2)?.reshape((n, c * kh * kw, ho * wo))?;
    Ok(wm.broadcast_matmul(&col)?.reshape((n, o, ho, wo))?)
}

/// Max pooling without padding. candle's own `max_pool2d` scales the
/// backward pass by the window size and refuses overlapping windows, so the
/// window maximum is folded from strided views with `maximum` instead, whose
/// gradient is exact (ties share it).
pub(crate) fn max_pool2d(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if kernel == 0 || stride == 0 || h < kernel || w < kernel {
        return Err(crate::error::Error::InvalidConfig(format!(
            "max pool {kernel}/{stride} does not fit a {h}x{w} input"
        )));
    }
    let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
    // room for the last strided read; the extra rows/cols are never selected
    let xp = x.pad_with_zeros(2, 0, stride - 1)?.pad_with_zeros(3, 0, stride - 1)?;
    let strided = |i: usize, j: usize| -> Result<Tensor> {
        let rows = xp.narrow(2, i, stride * ho)?.reshape((n, c, ho, stride, w + stride - 1))?.narrow(3, 0, 1)?;
        let cols = rows.squeeze(3)?.narrow(3, j, stride * wo)?.reshape((n, c, ho, wo, stride))?.narrow(4, 0, 1)?;
        Ok(cols.squeeze(4)?)
    };
    let mut out = strided(0, 0)?;
    for i in 0..kernel {
        for j in 0..kernel {
            if (i, j) != (0, 0) {
                out = out.maximum(&strided(i, j)?)?;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Per-sample, per-channel normalisation over the spatial dims of `(N, C, H, W)`.
pub(crate) fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(2)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.reshape((n, c, h, w))?)
}
