//! The full model: two encoders with fusion after every stage, a shared U-shaped
//! reconstruction decoder with a global residual, and a multi-scale segmentation head.

use serde::{Deserialize, Serialize};
use tdpcr_autodiff::{Scalar, Var};

use crate::backbone::{naf_stage, run_stage, NafBlock};
use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::params::{Fwd, Group, Init, ParamStore};
use crate::pgf::{BranchMode, LogitOverride, PgfBlock};
use crate::prompt::{resize_prompt, PromptGenerator};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub stage_channels: Vec<usize>,
    pub naf_depths: Vec<usize>,
    pub prompt_channels: usize,
    pub optical_bands: usize,
    pub sar_bands: usize,
    pub num_classes: usize,
    pub seg_unified_channels: usize,
    pub branch_mode: BranchMode,
    /// Build the segmentation head. Without it the model is restoration-only.
    pub seg_head: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![32, 64, 128, 256],
            naf_depths: vec![2, 2, 2, 2],
            prompt_channels: 8,
            optical_bands: 13,
            sar_bands: 2,
            num_classes: 6,
            seg_unified_channels: 32,
            branch_mode: BranchMode::Both,
            seg_head: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let sc = &self.stage_channels;
        if sc.is_empty() || sc.len() != self.naf_depths.len() {
            return Err(Error::Config(format!(
                "stage_channels ({}) and naf_depths ({}) must be non-empty and of equal length",
                sc.len(),
                self.naf_depths.len()
            )));
        }
        if sc[0] == 0 || sc.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::Config(format!("stage_channels must double at every stage: {sc:?}")));
        }
        let positive = [
            ("prompt_channels", self.prompt_channels),
            ("optical_bands", self.optical_bands),
            ("sar_bands", self.sar_bands),
            ("num_classes", self.num_classes),
            ("seg_unified_channels", self.seg_unified_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Spatial dimensions must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.stages() - 1)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub with_seg: bool,
    /// Test hook: zero the SAR weight in every fusion block.
    pub suppress_sar: bool,
}

pub struct ForwardOutput<'t, T: Scalar> {
    pub restored: Var<'t, T>,
    pub logits: Option<Var<'t, T>>,
    pub prompt: Var<'t, T>,
    /// Fusion weights per stage, `[B, 2, C, h, w]` (or `[B, 2, C, 1, 1]` for global-only).
    pub alphas: Vec<Var<'t, T>>,
    /// Decoder outputs, deepest first.
    pub decoder_features: Vec<Var<'t, T>>,
}

#[derive(Clone, Debug)]
struct Encoder {
    input: Conv2d,
    stages: Vec<Vec<NafBlock>>,
    down: Vec<Conv2d>,
}

impl Encoder {
    fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, bands: usize, cfg: &NetworkConfig) -> Result<Self> {
        let sc = &cfg.stage_channels;
        let input = Conv2d::new(init, &format!("{name}.input"), bands, sc[0], 3, 1, true);
        let mut stages = Vec::new();
        let mut down = Vec::new();
        for (l, (&c, &d)) in sc.iter().zip(&cfg.naf_depths).enumerate() {
            stages.push(naf_stage(init, &format!("{name}.stage{l}"), c, d)?);
            if l + 1 < sc.len() {
                down.push(Conv2d::new(init, &format!("{name}.down{l}"), c, 2 * c, 3, 2, true));
            }
        }
        Ok(Self { input, stages, down })
    }

    fn flops(&self, h: usize, w: usize) -> f64 {
        let mut total = self.input.flops(h, w);
        let (mut h, mut w) = (h, w);
        for (l, stage) in self.stages.iter().enumerate() {
            total += stage.iter().map(|b| b.flops(h, w)).sum::<f64>();
            if let Some(d) = self.down.get(l) {
                total += d.flops(h, w);
                (h, w) = d.output_hw(h, w);
            }
        }
        total
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    middle: Vec<NafBlock>,
    ups: Vec<Conv2d>,
    stages: Vec<Vec<NafBlock>>,
    output: Conv2d,
}

#[derive(Clone, Debug)]
struct SegHead {
    proj: Vec<Conv2d>,
    classifier: Conv2d,
}

#[derive(Clone, Debug)]
pub struct TdpCr {
    cfg: NetworkConfig,
    prompt: PromptGenerator,
    optical: Encoder,
    sar: Encoder,
    pgf: Vec<PgfBlock>,
    decoder: Decoder,
    seg: Option<SegHead>,
}

impl TdpCr {
    /// Builds the architecture and its freshly initialised parameters. Each group draws
    /// from its own substream, so toggling one component leaves the others' values intact.
    pub fn build<T: Scalar>(cfg: &NetworkConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let sc = &cfg.stage_channels;
        let stream = |g: Group| substream(seed, &format!("init/{g}"));

        let mut rng = stream(Group::PromptGenerator);
        let prompt = PromptGenerator::new(&mut Init::new(&mut store, &mut rng, Group::PromptGenerator), cfg.optical_bands, cfg.prompt_channels);

        let mut rng = stream(Group::OpticalEncoder);
        let optical = Encoder::new(&mut Init::new(&mut store, &mut rng, Group::OpticalEncoder), "opt", cfg.optical_bands, cfg)?;

        let mut rng = stream(Group::SarEncoder);
        let sar = Encoder::new(&mut Init::new(&mut store, &mut rng, Group::SarEncoder), "sar", cfg.sar_bands, cfg)?;

        let mut rng = stream(Group::PgfBlocks);
        let mut init = Init::new(&mut store, &mut rng, Group::PgfBlocks);
        let pgf = sc
            .iter()
            .enumerate()
            .map(|(l, &c)| PgfBlock::new(&mut init, &format!("pgf{l}"), c, cfg.prompt_channels, cfg.branch_mode))
            .collect();

        let mut rng = stream(Group::SharedDecoder);
        let mut init = Init::new(&mut store, &mut rng, Group::SharedDecoder);
        let deepest = sc.len() - 1;
        let middle = naf_stage(&mut init, "dec.middle", sc[deepest], cfg.naf_depths[deepest])?;
        let mut ups = Vec::new();
        let mut stages = Vec::new();
        for l in (0..deepest).rev() {
            ups.push(Conv2d::new(&mut init, &format!("dec.up{l}"), sc[l + 1], 2 * sc[l + 1], 1, 1, false));
            stages.push(naf_stage(&mut init, &format!("dec.stage{l}"), sc[l], cfg.naf_depths[l])?);
        }
        let output = Conv2d::zeros(&mut init, "dec.output", sc[0], cfg.optical_bands, 3);
        let decoder = Decoder { middle, ups, stages, output };

        let seg = cfg.seg_head.then(|| {
            let mut rng = stream(Group::SegHead);
            let mut init = Init::new(&mut store, &mut rng, Group::SegHead);
            let proj = (0..sc.len())
                .map(|i| Conv2d::new(&mut init, &format!("seg.proj{i}"), sc[deepest - i], cfg.seg_unified_channels, 3, 1, true))
                .collect();
            let classifier = Conv2d::new(&mut init, "seg.classifier", sc.len() * cfg.seg_unified_channels, cfg.num_classes, 1, 1, true);
            SegHead { proj, classifier }
        });

        Ok((Self { cfg: cfg.clone(), prompt, optical, sar, pgf, decoder, seg }, store))
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn pgf_blocks(&self) -> &[PgfBlock] {
        &self.pgf
    }

    pub fn prompt_generator(&self) -> &PromptGenerator {
        &self.prompt
    }

    pub fn has_seg_head(&self) -> bool {
        self.seg.is_some()
    }

    fn check_inputs<T: Scalar>(&self, cloudy: Var<'_, T>, sar: Var<'_, T>) -> Result<(usize, usize)> {
        let (b, bands, h, w) = cloudy.dims4()?;
        let (bs, sbands, hs, ws) = sar.dims4()?;
        if bands != self.cfg.optical_bands {
            return Err(Error::Shape(format!("expected {} optical bands, got {bands}", self.cfg.optical_bands)));
        }
        if sbands != self.cfg.sar_bands {
            return Err(Error::Shape(format!("expected {} SAR bands, got {sbands}", self.cfg.sar_bands)));
        }
        if (b, h, w) != (bs, hs, ws) {
            return Err(Error::Shape(format!("optical {:?} and SAR {:?} disagree", cloudy.shape(), sar.shape())));
        }
        let m = self.cfg.size_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::Argument(format!("spatial size {h}x{w} must be a positive multiple of {m}")));
        }
        Ok((h, w))
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        f: &Fwd<'t, T>,
        cloudy: Var<'t, T>,
        sar: Var<'t, T>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput<'t, T>> {
        let (h, w) = self.check_inputs(cloudy, sar)?;
        if opts.with_seg && self.seg.is_none() {
            return Err(Error::Argument("segmentation requested from a model without a segmentation head".into()));
        }
        let prompt = self.prompt.generate(f, cloudy)?;
        let hook = LogitOverride { suppress_sar: opts.suppress_sar };

        let mut xo = self.optical.input.forward(f, cloudy)?;
        let mut xs = self.sar.input.forward(f, sar)?;
        let mut skips = Vec::with_capacity(self.cfg.stages());
        let mut alphas = Vec::with_capacity(self.cfg.stages());
        for l in 0..self.cfg.stages() {
            let fo = run_stage(&self.optical.stages[l], f, xo)?;
            let fs = run_stage(&self.sar.stages[l], f, xs)?;
            let (_, _, sh, sw) = fo.dims4()?;
            let p = resize_prompt(prompt, (sh, sw))?;
            let trace = self.pgf[l].fuse_traced(f, fo, fs, p, hook)?;
            alphas.push(trace.alpha);
            skips.push(trace.output);
            if l + 1 < self.cfg.stages() {
                xo = self.optical.down[l].forward(f, trace.output)?;
                xs = self.sar.down[l].forward(f, fs)?;
            }
        }

        let deepest = *skips.last().expect("at least one stage");
        let mut g = run_stage(&self.decoder.middle, f, deepest)?;
        let mut decoder_features = vec![g];
        for (i, (up, blocks)) in self.decoder.ups.iter().zip(&self.decoder.stages).enumerate() {
            let skip = skips[skips.len() - 2 - i];
            g = up.forward(f, g)?.pixel_shuffle(2)?.add(skip)?;
            g = run_stage(blocks, f, g)?;
            decoder_features.push(g);
        }
        let restored = cloudy.add(self.decoder.output.forward(f, g)?)?;

        let logits = match opts.with_seg {
            true => Some(self.seg_head(f, &decoder_features, (h, w))?),
            false => None,
        };
        Ok(ForwardOutput { restored, logits, prompt, alphas, decoder_features })
    }

    /// Projects each decoder scale (deepest first) to a common width, upsamples to
    /// `out_hw`, concatenates and classifies.
    pub fn seg_head<'t, T: Scalar>(&self, f: &Fwd<'t, T>, features: &[Var<'t, T>], out_hw: (usize, usize)) -> Result<Var<'t, T>> {
        let head = self.seg.as_ref().ok_or_else(|| Error::Argument("model has no segmentation head".into()))?;
        if features.is_empty() {
            return Err(Error::Argument("segmentation head needs at least one feature map".into()));
        }
        if features.len() > head.proj.len() {
            return Err(Error::Argument(format!("{} feature maps for {} head scales", features.len(), head.proj.len())));
        }
        // a shorter list uses the finest scales
        let offset = head.proj.len() - features.len();
        let mut projected = Vec::with_capacity(features.len());
        for (i, &g) in features.iter().enumerate() {
            let p = head.proj[offset + i].forward(f, g)?;
            projected.push(resize_prompt(p, out_hw)?);
        }
        let cat = match projected.len() {
            1 => projected[0],
            _ => Var::concat(&projected, 1)?,
        };
        let classifier = if offset == 0 {
            head.classifier.forward(f, cat)?
        } else {
            // classifier weights for the omitted scales are skipped
            let u = self.cfg.seg_unified_channels;
            let wt = f.p(head.classifier.weight).narrow(1, offset * u, features.len() * u)?;
            cat.conv2d(wt, head.classifier.bias.map(|b| f.p(b)), 1, 0)?
        };
        Ok(classifier)
    }

    /// Analytic multiply-accumulate count ×2 over every convolution at input `h × w`.
    pub fn flops(&self, h: usize, w: usize) -> f64 {
        let sc = &self.cfg.stage_channels;
        let mut total = self.prompt.flops(h, w) + self.optical.flops(h, w) + self.sar.flops(h, w);
        let dims: Vec<(usize, usize)> = (0..sc.len()).map(|l| (h >> l, w >> l)).collect();
        total += self.pgf.iter().zip(&dims).map(|(p, &(a, b))| p.flops(a, b)).sum::<f64>();
        let (dh, dw) = dims[sc.len() - 1];
        total += self.decoder.middle.iter().map(|b| b.flops(dh, dw)).sum::<f64>();
        for (i, (up, blocks)) in self.decoder.ups.iter().zip(&self.decoder.stages).enumerate() {
            let (ih, iw) = dims[sc.len() - 1 - i];
            let (oh, ow) = dims[sc.len() - 2 - i];
            total += up.flops(ih, iw) + blocks.iter().map(|b| b.flops(oh, ow)).sum::<f64>();
        }
        total += self.decoder.output.flops(h, w);
        if let Some(seg) = &self.seg {
            for (i, p) in seg.proj.iter().enumerate() {
                let (a, b) = dims[sc.len() - 1 - i];
                total += p.flops(a, b);
            }
            total += seg.classifier.flops(h, w);
        }
        total
    }
}

/// Scalar parameter count over the named groups; `None` counts everything.
pub fn count_parameters<T: Scalar>(store: &ParamStore<T>, groups: Option<&[&str]>) -> Result<usize> {
    store.count_by_names(groups)
}

pub fn estimate_flops(cfg: &NetworkConfig, input_hw: (usize, usize)) -> Result<f64> {
    let (net, _) = TdpCr::build::<f32>(cfg, 0)?;
    Ok(net.flops(input_hw.0, input_hw.1))
}
