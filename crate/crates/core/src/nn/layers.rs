use candle_core::{Module, Tensor, D};

use super::conv::conv2d;
use super::ops::group_norm;
use super::params::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Kaiming-uniform weights, `padding = kernel / 2`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = store.uniform(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            bound,
        )?;
        let bias = store.uniform(format!("{name}.bias"), &[out_channels], bound)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride,
            padding: kernel / 2,
        })
    }

    /// 1x1 convolution initialized to the identity map (requires `in == out`).
    pub fn identity(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let mut values = vec![0.0; channels * channels];
        for c in 0..channels {
            values[c * channels + c] = 1.0;
        }
        let weight = store.from_values(format!("{name}.weight"), &[channels, channels, 1, 1], values)?;
        let bias = store.constant(format!("{name}.bias"), &[channels], 0.0)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride: 1,
            padding: 0,
        })
    }

    /// 3x3 convolution with all parameters zero.
    pub fn zeros(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize) -> Result<Self> {
        let weight = store.constant(format!("{name}.weight"), &[out_channels, in_channels, 3, 3], 0.0)?;
        let bias = store.constant(format!("{name}.bias"), &[out_channels], 0.0)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride: 1,
            padding: 1,
        })
    }

    /// Frozen convolution from explicit tensors.
    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Conv2d {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        conv2d(xs, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize) -> Result<Self> {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = store.uniform(format!("{name}.weight"), &[out_features, in_features], bound)?;
        let bias = store.uniform(format!("{name}.bias"), &[out_features], bound)?;
        Ok(Self { weight, bias })
    }
}

impl Module for Linear {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        xs.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

/// Largest divisor of `channels` not exceeding `max_groups`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels).max(1))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, max_groups: usize) -> Result<Self> {
        Ok(Self {
            groups: group_count(channels, max_groups),
            weight: store.constant(format!("{name}.weight"), &[channels], 1.0)?,
            bias: store.constant(format!("{name}.bias"), &[channels], 0.0)?,
            eps: 1e-5,
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        group_norm(xs, &self.weight, &self.bias, self.groups, self.eps)
    }
}

/// Nearest-neighbour upsampling by an integer factor, built from broadcasts so
/// its gradient is a plain sum.
pub fn upsample_nearest(xs: &Tensor, factor: usize) -> candle_core::Result<Tensor> {
    if factor == 1 {
        return Ok(xs.clone());
    }
    let (b, c, h, w) = xs.dims4()?;
    xs.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, factor, w, factor))?
        .reshape((b, c, h * factor, w * factor))
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(xs: &Tensor) -> candle_core::Result<Tensor> {
    let max = xs.max_keepdim(D::Minus1)?.detach();
    let exp = xs.broadcast_sub(&max)?.exp()?;
    exp.broadcast_div(&exp.sum_keepdim(D::Minus1)?)
}
