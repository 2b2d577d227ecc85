//! Degradation prompt: a small convolutional map from the cloudy optical image to a
//! `C_p`-channel conditioning signal, resampled to each encoder stage.

use tdpcr_autodiff::{Scalar, Var};

use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::params::{Fwd, Init};

/// Width of the two hidden layers.
pub const PROMPT_HIDDEN: usize = 16;

#[derive(Clone, Debug)]
pub struct PromptGenerator {
    in_bands: usize,
    prompt_channels: usize,
    convs: [Conv2d; 3],
}

impl PromptGenerator {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, in_bands: usize, prompt_channels: usize) -> Self {
        let convs = [
            Conv2d::new(init, "prompt.conv1", in_bands, PROMPT_HIDDEN, 3, 1, true),
            Conv2d::new(init, "prompt.conv2", PROMPT_HIDDEN, PROMPT_HIDDEN, 3, 1, true),
            Conv2d::new(init, "prompt.conv3", PROMPT_HIDDEN, prompt_channels, 3, 1, true),
        ];
        Self { in_bands, prompt_channels, convs }
    }

    pub fn prompt_channels(&self) -> usize {
        self.prompt_channels
    }

    /// `[B, bands, H, W] -> [B, C_p, H, W]`; GELU after the first two layers only.
    pub fn generate<'t, T: Scalar>(&self, f: &Fwd<'t, T>, cloudy: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, bands, _, _) = cloudy.dims4()?;
        if bands != self.in_bands {
            return Err(Error::Shape(format!("prompt generator expects {} bands, got {bands}", self.in_bands)));
        }
        let h = self.convs[0].forward(f, cloudy)?.gelu();
        let h = self.convs[1].forward(f, h)?.gelu();
        self.convs[2].forward(f, h)
    }

    pub fn flops(&self, h: usize, w: usize) -> f64 {
        self.convs.iter().map(|c| c.flops(h, w)).sum()
    }
}

/// Bilinear resampling of a prompt to a stage resolution (corners not aligned).
/// A same-size request returns the input node unchanged.
pub fn resize_prompt<'t, T: Scalar>(prompt: Var<'t, T>, target: (usize, usize)) -> Result<Var<'t, T>> {
    let (h, w) = target;
    if h == 0 || w == 0 {
        return Err(Error::Argument(format!("prompt resize target must be positive, got {h}x{w}")));
    }
    let (_, _, ph, pw) = prompt.dims4()?;
    if (ph, pw) == (h, w) {
        return Ok(prompt);
    }
    Ok(prompt.resize_bilinear(h, w)?)
}
