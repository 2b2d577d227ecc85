//! A small fully convolutional segmenter trained on clear imagery, used as the fixed
//! downstream model of the direct and restore-then-segment baselines.

use serde::{Deserialize, Serialize};
use tdpcr_autodiff::{Scalar, Var};

use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::params::{Fwd, Group, Init, ParamStore};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub in_bands: usize,
    pub hidden: usize,
    /// Number of 3×3 layers before the 1×1 classifier.
    pub depth: usize,
    pub num_classes: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { in_bands: 13, hidden: 32, depth: 3, num_classes: 6 }
    }
}

#[derive(Clone, Debug)]
pub struct SegProbe {
    cfg: ProbeConfig,
    layers: Vec<Conv2d>,
    classifier: Conv2d,
}

impl SegProbe {
    pub fn build<T: Scalar>(cfg: &ProbeConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        if cfg.in_bands == 0 || cfg.hidden == 0 || cfg.depth == 0 || cfg.num_classes == 0 {
            return Err(Error::Config(format!("probe widths must be positive: {cfg:?}")));
        }
        let mut store = ParamStore::new();
        let mut rng = substream(seed, "init/probe");
        let mut init = Init::new(&mut store, &mut rng, Group::SegHead);
        let layers = (0..cfg.depth)
            .map(|i| {
                let cin = if i == 0 { cfg.in_bands } else { cfg.hidden };
                Conv2d::new(&mut init, &format!("probe.conv{i}"), cin, cfg.hidden, 3, 1, true)
            })
            .collect();
        let classifier = Conv2d::new(&mut init, "probe.classifier", cfg.hidden, cfg.num_classes, 1, 1, true);
        Ok((Self { cfg: cfg.clone(), layers, classifier }, store))
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.cfg
    }

    /// `[B, bands, H, W]` image to `[B, K, H, W]` logits.
    pub fn forward<'t, T: Scalar>(&self, f: &Fwd<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, bands, _, _) = image.dims4()?;
        if bands != self.cfg.in_bands {
            return Err(Error::Shape(format!("probe expects {} bands, got {bands}", self.cfg.in_bands)));
        }
        let mut h = image;
        for l in &self.layers {
            h = l.forward(f, h)?.gelu();
        }
        self.classifier.forward(f, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tdpcr_autodiff::{Array, Tape};

    #[test]
    fn shapes() {
        let (p, store) = SegProbe::build::<f32>(&ProbeConfig::default(), 0).unwrap();
        let tape = Tape::new();
        let f = Fwd::new(&tape, &store, false);
        assert_eq!(p.forward(&f, tape.constant(Array::zeros(&[2, 13, 8, 8]))).unwrap().shape(), vec![2, 6, 8, 8]);
        assert!(p.forward(&f, tape.constant(Array::zeros(&[1, 3, 8, 8]))).is_err());
    }
}
