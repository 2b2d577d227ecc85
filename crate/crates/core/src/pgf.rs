//! Prompt-guided fusion of optical and SAR feature maps.
//!
//! Two sources of modality logits are summed: a global branch that pools the joint
//! feature into per-channel preferences, and a local branch that turns the resized
//! prompt into per-pixel preferences. A softmax over the two modalities yields blending
//! weights; the blended feature is aligned by a two-layer 1×1 map and added to the
//! optical stream.

use serde::{Deserialize, Serialize};
use tdpcr_autodiff::{Array, Scalar, Var};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, DepthwiseConv2d};
use crate::params::{Fwd, Init};

/// Which logit branches a fusion block carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    GlobalOnly,
    LocalOnly,
    #[default]
    Both,
}

impl BranchMode {
    pub fn has_global(self) -> bool {
        matches!(self, BranchMode::GlobalOnly | BranchMode::Both)
    }

    pub fn has_local(self) -> bool {
        matches!(self, BranchMode::LocalOnly | BranchMode::Both)
    }
}

/// Hidden width of the global branch: `C/16`, but never below 4.
pub fn bottleneck_width(channels: usize) -> usize {
    (channels / 16).max(4)
}

#[derive(Clone, Debug)]
struct GlobalBranch {
    fc1: Conv2d,
    fc2: Conv2d,
}

#[derive(Clone, Debug)]
struct LocalBranch {
    dw: DepthwiseConv2d,
    proj: Conv2d,
}

/// Intermediate values of one fusion, for inspection and tests.
pub struct FusionTrace<'t, T: Scalar> {
    /// `[B, 2, C, 1, 1]` or `[B, 2, C, H, W]` combined logits, modality order (opt, sar).
    pub logits: Var<'t, T>,
    /// Softmax of `logits` over the modality axis.
    pub alpha: Var<'t, T>,
    pub fused: Var<'t, T>,
    pub output: Var<'t, T>,
}

/// Test hook: overrides applied to the combined logits before the softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LogitOverride {
    /// Adds `-inf` to the SAR logit, so the SAR weight is exactly zero.
    pub suppress_sar: bool,
}

#[derive(Clone, Debug)]
pub struct PgfBlock {
    channels: usize,
    prompt_channels: usize,
    mode: BranchMode,
    global: Option<GlobalBranch>,
    local: Option<LocalBranch>,
    psi1: Conv2d,
    psi2: Conv2d,
}

impl PgfBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize, prompt_channels: usize, mode: BranchMode) -> Self {
        let global = mode.has_global().then(|| {
            let hidden = bottleneck_width(channels);
            GlobalBranch {
                fc1: Conv2d::new(init, &format!("{name}.global.fc1"), channels, hidden, 1, 1, true),
                fc2: Conv2d::new(init, &format!("{name}.global.fc2"), hidden, 2 * channels, 1, 1, true),
            }
        });
        let local = mode.has_local().then(|| LocalBranch {
            dw: DepthwiseConv2d::new(init, &format!("{name}.local.dw"), prompt_channels, 3),
            proj: Conv2d::new(init, &format!("{name}.local.proj"), prompt_channels, 2 * channels, 1, 1, true),
        });
        let psi1 = Conv2d::new(init, &format!("{name}.psi.fc1"), channels, channels, 1, 1, true);
        let psi2 = Conv2d::zeros(init, &format!("{name}.psi.fc2"), channels, channels, 1);
        Self { channels, prompt_channels, mode, global, local, psi1, psi2 }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn mode(&self) -> BranchMode {
        self.mode
    }

    pub fn psi_output(&self) -> &Conv2d {
        &self.psi2
    }

    fn check_pair<T: Scalar>(&self, opt: Var<'_, T>, sar: Var<'_, T>) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = opt.dims4()?;
        if sar.shape() != opt.shape() {
            return Err(Error::Shape(format!("optical {:?} vs SAR {:?}", opt.shape(), sar.shape())));
        }
        if c != self.channels {
            return Err(Error::Shape(format!("fusion block expects {} channels, got {c}", self.channels)));
        }
        Ok((b, h, w))
    }

    /// Per-channel modality logits `[B, 2, C]` from the pooled joint feature.
    pub fn global_branch<'t, T: Scalar>(&self, f: &Fwd<'t, T>, opt: Var<'t, T>, sar: Var<'t, T>) -> Result<Var<'t, T>> {
        let (b, _, _) = self.check_pair(opt, sar)?;
        let g = self.global.as_ref().ok_or_else(|| Error::Argument("block has no global branch".into()))?;
        let z = opt.add(sar)?.mean_hw()?;
        let l = g.fc2.forward(f, g.fc1.forward(f, z)?.gelu())?;
        Ok(l.reshape(&[b, 2, self.channels])?)
    }

    /// Per-pixel modality logits `[B, 2, C, H, W]` from the resized prompt.
    pub fn local_branch<'t, T: Scalar>(&self, f: &Fwd<'t, T>, prompt: Var<'t, T>) -> Result<Var<'t, T>> {
        let l = self.local.as_ref().ok_or_else(|| Error::Argument("block has no local branch".into()))?;
        let (b, cp, h, w) = prompt.dims4()?;
        if cp != self.prompt_channels {
            return Err(Error::Shape(format!("fusion block expects {} prompt channels, got {cp}", self.prompt_channels)));
        }
        let out = l.proj.forward(f, l.dw.forward(f, prompt)?)?;
        Ok(out.reshape(&[b, 2, self.channels, h, w])?)
    }

    pub fn fuse<'t, T: Scalar>(&self, f: &Fwd<'t, T>, opt: Var<'t, T>, sar: Var<'t, T>, prompt: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.fuse_traced(f, opt, sar, prompt, LogitOverride::default())?.output)
    }

    pub fn fuse_traced<'t, T: Scalar>(
        &self,
        f: &Fwd<'t, T>,
        opt: Var<'t, T>,
        sar: Var<'t, T>,
        prompt: Var<'t, T>,
        hook: LogitOverride,
    ) -> Result<FusionTrace<'t, T>> {
        let (b, h, w) = self.check_pair(opt, sar)?;
        let c = self.channels;
        let (_, _, ph, pw) = prompt.dims4()?;
        if (ph, pw) != (h, w) {
            return Err(Error::Shape(format!("prompt is {ph}x{pw} but features are {h}x{w}; resize first")));
        }
        let global = match self.mode.has_global() {
            true => Some(self.global_branch(f, opt, sar)?.reshape(&[b, 2, c, 1, 1])?),
            false => None,
        };
        let local = match self.mode.has_local() {
            true => Some(self.local_branch(f, prompt)?),
            false => None,
        };
        let mut logits = match (global, local) {
            (Some(g), Some(l)) => g.add(l)?,
            (Some(g), None) => g,
            (None, Some(l)) => l,
            (None, None) => unreachable!("branch mode selects at least one branch"),
        };
        if logits.value().data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN in fusion logits".into()));
        }
        if hook.suppress_sar {
            let mask = Array::from_vec(&[1, 2, 1, 1, 1], vec![T::zero(), T::neg_infinity()])?;
            logits = logits.add(f.constant(mask))?;
        }
        let alpha = logits.softmax(1)?;
        let (ah, aw) = (alpha.shape()[3], alpha.shape()[4]);
        let a_opt = alpha.narrow(1, 0, 1)?.reshape(&[b, c, ah, aw])?;
        let a_sar = alpha.narrow(1, 1, 1)?.reshape(&[b, c, ah, aw])?;
        let fused = opt.mul(a_opt)?.add(sar.mul(a_sar)?)?;
        let aligned = self.psi2.forward(f, self.psi1.forward(f, fused)?.gelu())?;
        let output = opt.add(aligned)?;
        Ok(FusionTrace { logits, alpha, fused, output })
    }

    pub fn flops(&self, h: usize, w: usize) -> f64 {
        let global = self.global.as_ref().map_or(0.0, |g| g.fc1.flops(1, 1) + g.fc2.flops(1, 1));
        let local = self.local.as_ref().map_or(0.0, |l| l.dw.flops(h, w) + l.proj.flops(h, w));
        global + local + self.psi1.flops(h, w) + self.psi2.flops(h, w)
    }
}
