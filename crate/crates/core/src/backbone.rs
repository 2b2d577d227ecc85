//! Nonlinear-activation-free restoration blocks.
//!
//! A [`NafBlock`] has two residual sub-paths and no pointwise nonlinearity other than
//! the multiplicative [`simple_gate`]:
//!
//! ```text
//! y = x + beta  * W3(SCA(Gate(DW(W1(LN(x))))))
//! z = y + gamma * W5(Gate(W4(LN(y))))
//! ```
//!
//! `SCA` is simplified channel attention: a spatial mean, one 1×1 convolution, then a
//! per-channel rescale. `beta` and `gamma` are per-channel and start at zero, so a fresh
//! block is exactly the identity.

use serde::{Deserialize, Serialize};
use tdpcr_autodiff::{Scalar, Var};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, DepthwiseConv2d, LayerNorm2d};
use crate::params::{Fwd, Init, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    pub dw_expansion: usize,
    pub ffn_expansion: usize,
}

impl BlockConfig {
    pub fn new(channels: usize) -> Self {
        Self { channels, dw_expansion: 2, ffn_expansion: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.dw_expansion == 0 || self.ffn_expansion == 0 {
            return Err(Error::Argument(format!("block widths must be positive: {self:?}")));
        }
        if !(self.channels * self.dw_expansion).is_multiple_of(2) || !(self.channels * self.ffn_expansion).is_multiple_of(2) {
            return Err(Error::Argument(format!("expanded widths must be even for the gate: {self:?}")));
        }
        Ok(())
    }
}

/// Multiplies the first half of the channels by the second half.
pub fn simple_gate<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(x.simple_gate()?)
}

#[derive(Clone, Debug)]
pub struct NafBlock {
    cfg: BlockConfig,
    norm1: LayerNorm2d,
    conv1: Conv2d,
    dwconv: DepthwiseConv2d,
    sca: Conv2d,
    conv3: Conv2d,
    norm2: LayerNorm2d,
    conv4: Conv2d,
    conv5: Conv2d,
    beta: ParamId,
    gamma: ParamId,
}

impl NafBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let dw = c * cfg.dw_expansion;
        let ffn = c * cfg.ffn_expansion;
        Ok(Self {
            cfg,
            norm1: LayerNorm2d::new(init, &format!("{name}.norm1"), c),
            conv1: Conv2d::new(init, &format!("{name}.conv1"), c, dw, 1, 1, true),
            dwconv: DepthwiseConv2d::new(init, &format!("{name}.conv2"), dw, 3),
            sca: Conv2d::new(init, &format!("{name}.sca"), dw / 2, dw / 2, 1, 1, true),
            conv3: Conv2d::new(init, &format!("{name}.conv3"), dw / 2, c, 1, 1, true),
            norm2: LayerNorm2d::new(init, &format!("{name}.norm2"), c),
            conv4: Conv2d::new(init, &format!("{name}.conv4"), c, ffn, 1, 1, true),
            conv5: Conv2d::new(init, &format!("{name}.conv5"), ffn / 2, c, 1, 1, true),
            beta: init.constant(&format!("{name}.beta"), &[1, c, 1, 1], 0.0),
            gamma: init.constant(&format!("{name}.gamma"), &[1, c, 1, 1], 0.0),
        })
    }

    pub fn config(&self) -> BlockConfig {
        self.cfg
    }

    pub fn residual_scalars(&self) -> (ParamId, ParamId) {
        (self.beta, self.gamma)
    }

    pub fn forward<'t, T: Scalar>(&self, f: &Fwd<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.cfg.channels {
            return Err(Error::Shape(format!("NAFBlock expects {} channels, got {c}", self.cfg.channels)));
        }
        let h = self.norm1.forward(f, x)?;
        let h = self.conv1.forward(f, h)?;
        let h = self.dwconv.forward(f, h)?;
        let h = simple_gate(h)?;
        let att = self.sca.forward(f, h.mean_hw()?)?;
        let h = h.mul(att)?;
        let h = self.conv3.forward(f, h)?;
        let y = x.add(h.mul(f.p(self.beta))?)?;

        let h = self.norm2.forward(f, y)?;
        let h = self.conv4.forward(f, h)?;
        let h = simple_gate(h)?;
        let h = self.conv5.forward(f, h)?;
        Ok(y.add(h.mul(f.p(self.gamma))?)?)
    }

    pub fn flops(&self, h: usize, w: usize) -> f64 {
        self.conv1.flops(h, w)
            + self.dwconv.flops(h, w)
            + self.sca.flops(1, 1)
            + self.conv3.flops(h, w)
            + self.conv4.flops(h, w)
            + self.conv5.flops(h, w)
    }
}

/// A run of blocks at one width.
pub fn naf_stage<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize, depth: usize) -> Result<Vec<NafBlock>> {
    (0..depth).map(|i| NafBlock::new(init, &format!("{name}.{i}"), BlockConfig::new(channels))).collect()
}

pub fn run_stage<'t, T: Scalar>(blocks: &[NafBlock], f: &Fwd<'t, T>, mut x: Var<'t, T>) -> Result<Var<'t, T>> {
    for b in blocks {
        x = b.forward(f, x)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Group, ParamStore};
    use crate::rng::substream;
    use tdpcr_autodiff::gradcheck::{central_difference, relative_error};
    use tdpcr_autodiff::{Array, Tape};

    fn block(channels: usize) -> (ParamStore<f64>, NafBlock) {
        let mut store = ParamStore::new();
        let mut rng = substream(1, "naf");
        let b = NafBlock::new(&mut Init::new(&mut store, &mut rng, Group::OpticalEncoder), "blk", BlockConfig::new(channels)).unwrap();
        (store, b)
    }

    fn randomize(store: &mut ParamStore<f64>, seed: u64) {
        use rand::Rng;
        let mut rng = substream(seed, "perturb");
        for (_, p) in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
    }

    fn input(shape: &[usize], seed: u64) -> Array<f64> {
        use rand::Rng;
        let mut rng = substream(seed, "x");
        Array::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn gate_examples() {
        let tape = Tape::<f64>::new();
        let ones = tape.constant(Array::full(&[1, 4, 2, 2], 1.0));
        assert!(simple_gate(ones).unwrap().value().data().iter().all(|&v| v == 1.0));
        let mut half_zero = Array::full(&[1, 4, 2, 2], 3.0);
        half_zero.data_mut()[8..].fill(0.0);
        assert!(simple_gate(tape.constant(half_zero)).unwrap().value().data().iter().all(|&v| v == 0.0));
        let pair = Array::from_f64(&[1, 2, 1, 1], &[2.0, 3.0]).unwrap();
        assert_eq!(simple_gate(tape.constant(pair)).unwrap().value().data(), &[6.0]);
        let odd = tape.constant(Array::full(&[1, 3, 2, 2], 1.0));
        assert!(matches!(simple_gate(odd), Err(Error::Shape(_))));
    }

    #[test]
    fn fresh_block_is_identity() {
        let (store, b) = block(8);
        let x = input(&[2, 8, 5, 4], 2);
        let tape = Tape::new();
        let f = Fwd::new(&tape, &store, false);
        let y = b.forward(&f, tape.constant(x.clone())).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let (store, b) = block(8);
        let tape = Tape::new();
        let f = Fwd::new(&tape, &store, false);
        assert!(matches!(b.forward(&f, tape.constant(Array::zeros(&[1, 4, 2, 2]))), Err(Error::Shape(_))));
        assert!(BlockConfig { channels: 3, dw_expansion: 1, ffn_expansion: 2 }.validate().is_err());
    }

    #[test]
    fn only_gate_nonlinearity() {
        let (mut store, b) = block(4);
        randomize(&mut store, 3);
        let tape = Tape::new();
        let f = Fwd::new(&tape, &store, true);
        b.forward(&f, tape.constant(input(&[1, 4, 3, 3], 4))).unwrap();
        let allowed = ["layer_norm", "conv2d", "depthwise_conv2d", "simple_gate", "mean_hw", "mul", "add"];
        for op in tape.op_names() {
            assert!(allowed.contains(&op), "unexpected op {op}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (mut store, b) = block(4);
        randomize(&mut store, 5);
        let x = input(&[1, 4, 4, 3], 6);
        let eval = |data: &[f64]| {
            let tape = Tape::new();
            let f = Fwd::new(&tape, &store, false);
            let xv = tape.constant(Array::from_vec(x.shape(), data.to_vec()).unwrap());
            b.forward(&f, xv).unwrap().mean_all().value().data()[0]
        };
        let tape = Tape::new();
        let f = Fwd::new(&tape, &store, false);
        let xv = tape.leaf(x.clone(), true);
        let loss = b.forward(&f, xv).unwrap().mean_all();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(xv).unwrap().data().to_vec();
        let idx: Vec<usize> = (0..x.len()).collect();
        let numeric = central_difference(x.data(), &idx, 1e-5, eval);
        assert!(relative_error(&analytic, &numeric, 1e-12) < 1e-4);
    }
}
