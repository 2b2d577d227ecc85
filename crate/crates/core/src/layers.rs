//! Parameterised layers shared by every network component.

use tdpcr_autodiff::{Scalar, Var};

use crate::error::Result;
use crate::params::{Fwd, Init, ParamId};

/// Dense convolution with square kernel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Uniform fan-in initialisation bound, `1/sqrt(fan_in)`.
fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl Conv2d {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let bound = fan_in_bound(in_channels * kernel * kernel);
        let weight = init.uniform(&format!("{name}.weight"), &[out_channels, in_channels, kernel, kernel], bound);
        let bias = bias.then(|| init.uniform(&format!("{name}.bias"), &[out_channels], bound));
        Self { weight, bias, in_channels, out_channels, kernel, stride, pad: kernel / 2 }
    }

    /// Same geometry, weights and bias start at zero.
    pub fn zeros<T: Scalar>(init: &mut Init<'_, T>, name: &str, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        let weight = init.constant(&format!("{name}.weight"), &[out_channels, in_channels, kernel, kernel], 0.0);
        let bias = Some(init.constant(&format!("{name}.bias"), &[out_channels], 0.0));
        Self { weight, bias, in_channels, out_channels, kernel, stride: 1, pad: kernel / 2 }
    }

    pub fn forward<'t, T: Scalar>(&self, f: &Fwd<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.conv2d(f.p(self.weight), self.bias.map(|b| f.p(b)), self.stride, self.pad)?)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.kernel) / self.stride + 1, (w + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    /// Multiply-accumulates ×2 at input size `h × w`.
    pub fn flops(&self, h: usize, w: usize) -> f64 {
        let (ho, wo) = self.output_hw(h, w);
        2.0 * (self.kernel * self.kernel * self.in_channels * self.out_channels * ho * wo) as f64
    }
}

#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub kernel: usize,
}

impl DepthwiseConv2d {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize, kernel: usize) -> Self {
        let bound = fan_in_bound(kernel * kernel);
        let weight = init.uniform(&format!("{name}.weight"), &[channels, 1, kernel, kernel], bound);
        let bias = init.uniform(&format!("{name}.bias"), &[channels], bound);
        Self { weight, bias, channels, kernel }
    }

    pub fn forward<'t, T: Scalar>(&self, f: &Fwd<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.depthwise_conv2d(f.p(self.weight), Some(f.p(self.bias)), self.kernel / 2)?)
    }

    pub fn flops(&self, h: usize, w: usize) -> f64 {
        2.0 * (self.kernel * self.kernel * self.channels * h * w) as f64
    }
}

/// Channel-wise layer normalization at every pixel.
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm2d {
    pub const EPS: f64 = 1e-6;

    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Self {
        let gamma = init.constant(&format!("{name}.weight"), &[channels], 1.0);
        let beta = init.constant(&format!("{name}.bias"), &[channels], 0.0);
        Self { gamma, beta }
    }

    pub fn forward<'t, T: Scalar>(&self, f: &Fwd<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.layer_norm_channels(f.p(self.gamma), f.p(self.beta), Self::EPS)?)
    }
}
