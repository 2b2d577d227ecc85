//! Two-phase training under freeze policies, evaluation in the four comparison modes,
//! and the ablation/paradigm studies.
//!
//! Phase 1 fits the restoration path with the reconstruction loss. Phase 2 adds the
//! segmentation head and optimises the joint loss; under `peft` only the prompt
//! generator, the fusion blocks and the segmentation head move.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tdpcr_autodiff::{Array, Tape, Var};

use crate::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::data::{augment, random_crop, Batch, BatchSampler, SampleRecord};
use crate::error::{Error, Result};
use crate::network::{ForwardOptions, NetworkConfig, TdpCr};
use crate::objectives::{argmax_classes, psnr, rec_loss, seg_loss, ssim_metric, ConfusionMatrix, LossWeights, MetricReport, SegMetrics, PSNR_TABLE_CAP};
use crate::optim::{AdamW, OptimConfig};
use crate::params::{Fwd, Group, ParamStore};
use crate::pgf::BranchMode;
use crate::probe::{ProbeConfig, SegProbe};
use crate::rng::stream_key;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Tdpcr,
    SegProbe,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Tdpcr => "tdpcr",
            ModelKind::SegProbe => "seg_probe",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Joint training from random initialisation, nothing frozen.
    None,
    #[default]
    Peft,
    Fpft,
}

impl FreezePolicy {
    pub fn name(self) -> &'static str {
        match self {
            FreezePolicy::None => "none",
            FreezePolicy::Peft => "peft",
            FreezePolicy::Fpft => "fpft",
        }
    }
}

/// Trainable flag per parameter group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeManifest(pub BTreeMap<Group, bool>);

impl FreezeManifest {
    pub fn for_run(phase: u8, policy: FreezePolicy) -> Self {
        let trainable = |g: Group| match (phase, policy) {
            (1, _) => g != Group::SegHead,
            (_, FreezePolicy::Peft) => matches!(g, Group::PromptGenerator | Group::PgfBlocks | Group::SegHead),
            _ => true,
        };
        Self(Group::ALL.into_iter().map(|g| (g, trainable(g))).collect())
    }

    pub fn all_trainable() -> Self {
        Self(Group::ALL.into_iter().map(|g| (g, true)).collect())
    }

    pub fn trainable(&self, g: Group) -> bool {
        self.0.get(&g).copied().unwrap_or(false)
    }

    pub fn apply(&self, store: &mut ParamStore<f32>) {
        for g in Group::ALL {
            store.set_trainable(g, self.trainable(g));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub phase: u8,
    pub freeze_policy: FreezePolicy,
    pub network: NetworkConfig,
    pub probe: ProbeConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Square training crop; 0 trains on whole scenes.
    pub crop: usize,
    pub flip: bool,
    /// Validate every this many steps (and after the last step).
    pub val_every: usize,
    /// Validate on at most this many scenes; 0 uses all.
    pub val_limit: usize,
    pub eval_batch: usize,
    /// Phase-1 checkpoint consumed by phase 2.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Tdpcr,
            phase: 1,
            freeze_policy: FreezePolicy::Peft,
            network: NetworkConfig::default(),
            probe: ProbeConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            steps: 5000,
            batch_size: 8,
            seed: 0,
            crop: 128,
            flip: true,
            val_every: 100,
            val_limit: 0,
            eval_batch: 4,
            init_checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.phase, 1 | 2) {
            return Err(Error::Config(format!("phase must be 1 or 2, got {}", self.phase)));
        }
        if self.batch_size == 0 || self.eval_batch == 0 || self.val_every == 0 {
            return Err(Error::Config("batch_size, eval_batch and val_every must be positive".into()));
        }
        if !self.crop.is_multiple_of(8) {
            return Err(Error::Config(format!("crop {} must be a multiple of 8", self.crop)));
        }
        self.network.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if self.probe.num_classes != self.network.num_classes {
            return Err(Error::Config(format!(
                "probe has {} classes but the network has {}",
                self.probe.num_classes, self.network.num_classes
            )));
        }
        Ok(())
    }

    /// Validation score used to pick the best checkpoint: PSNR for restoration
    /// pre-training, mIoU otherwise.
    fn selects_by_psnr(&self) -> bool {
        self.model == ModelKind::Tdpcr && self.phase == 1
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    Tdpcr(TdpCr),
    Probe(SegProbe),
}

/// Loss components of one batch, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub rec: Option<f64>,
    pub seg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub kind: String,
    pub step: usize,
    pub phase: u8,
    pub loss: f64,
    pub rec: Option<f64>,
    pub seg: Option<f64>,
    pub lr: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub kind: String,
    pub step: usize,
    pub phase: u8,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub pa: Option<f64>,
    pub miou: Option<f64>,
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValRecord>,
    pub best_step: usize,
    pub best_score: f64,
    pub best_params: ParamStore<f32>,
}

fn value_stats(a: &Array<f32>) -> String {
    let finite: Vec<f64> = a.data().iter().map(|&v| v as f64).filter(|v| v.is_finite()).collect();
    let bad = a.len() - finite.len();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
    format!("min {lo:.4e} max {hi:.4e} mean {mean:.4e} non-finite {bad}")
}

pub struct Session {
    pub cfg: RunConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub optim: AdamW,
    /// Completed optimizer steps.
    pub step: usize,
}

impl Session {
    /// Fresh session. Phase 2 under `peft`/`fpft` starts from `init`, which must be a
    /// phase-1 parameter set of the same architecture.
    pub fn new(cfg: &RunConfig, init: Option<&ParamStore<f32>>) -> Result<Self> {
        cfg.validate()?;
        let (model, mut store) = match cfg.model {
            ModelKind::Tdpcr => {
                let (net, store) = TdpCr::build::<f32>(&cfg.network, cfg.seed)?;
                (Model::Tdpcr(net), store)
            }
            ModelKind::SegProbe => {
                let (probe, store) = SegProbe::build::<f32>(&cfg.probe, cfg.seed)?;
                (Model::Probe(probe), store)
            }
        };
        let needs_init = cfg.model == ModelKind::Tdpcr && cfg.phase == 2 && cfg.freeze_policy != FreezePolicy::None;
        match init {
            Some(src) => store.copy_values_from(src).map_err(|e| Error::Data(format!("initial parameters do not fit the model: {e}")))?,
            None if needs_init => {
                return Err(Error::Argument(format!("phase 2 with {} needs a phase-1 checkpoint", cfg.freeze_policy.name())));
            }
            None => {}
        }
        let manifest = match cfg.model {
            ModelKind::Tdpcr => FreezeManifest::for_run(cfg.phase, cfg.freeze_policy),
            ModelKind::SegProbe => FreezeManifest::all_trainable(),
        };
        manifest.apply(&mut store);
        let optim = AdamW::new(cfg.optim, cfg.steps, &store);
        Ok(Self { cfg: cfg.clone(), model, store, optim, step: 0 })
    }

    /// Starts from `cfg.init_checkpoint` when set.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        match &cfg.init_checkpoint {
            Some(path) => {
                let ckpt = checkpoint::load(path)?;
                Self::new(cfg, Some(&ckpt.params))
            }
            None => Self::new(cfg, None),
        }
    }

    /// Continues a run saved with optimizer state.
    pub fn resume(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut s = Self::new(&RunConfig { init_checkpoint: None, ..cfg.clone() }, Some(&ckpt.params))?;
        let optim = ckpt.optimizer.clone().ok_or_else(|| Error::Data("checkpoint has no optimizer state to resume from".into()))?;
        let layout_ok = optim.m.len() == s.store.len() && optim.m.iter().zip(s.store.iter()).all(|(m, (_, p))| m.is_some() == p.trainable);
        if !layout_ok {
            return Err(Error::Data("optimizer state does not match the freeze policy of this run".into()));
        }
        s.optim = optim;
        s.step = ckpt.meta.step;
        Ok(s)
    }

    pub fn network(&self) -> Option<&TdpCr> {
        match &self.model {
            Model::Tdpcr(n) => Some(n),
            Model::Probe(_) => None,
        }
    }

    pub fn probe(&self) -> Option<&SegProbe> {
        match &self.model {
            Model::Probe(p) => Some(p),
            Model::Tdpcr(_) => None,
        }
    }

    pub fn meta(&self) -> CheckpointMeta {
        let config = match &self.model {
            Model::Tdpcr(n) => serde_json::to_value(n.config()),
            Model::Probe(p) => serde_json::to_value(p.config()),
        }
        .expect("config serialises");
        CheckpointMeta {
            model: self.cfg.model.name().into(),
            config,
            run_config: serde_json::to_value(&self.cfg).expect("config serialises"),
            phase: self.cfg.phase,
            step: self.step,
            seed: self.cfg.seed,
        }
    }

    pub fn save(&self, path: &Path, with_optimizer: bool) -> Result<()> {
        checkpoint::save(path, &self.meta(), &self.store, with_optimizer.then_some(&self.optim))
    }

    fn batch_loss<'t>(&self, f: &Fwd<'t, f32>, batch: &Batch) -> Result<(Var<'t, f32>, String)> {
        let tape = f.tape();
        match &self.model {
            Model::Tdpcr(net) => {
                let with_seg = self.cfg.phase == 2;
                let out = net.forward(f, tape.constant(batch.cloudy.clone()), tape.constant(batch.sar.clone()), ForwardOptions { with_seg, suppress_sar: false })?;
                let mut diag = format!("restored: {}", value_stats(&out.restored.value()));
                let rec = rec_loss(out.restored, tape.constant(batch.clear.clone()), &self.cfg.loss)?;
                let loss = match out.logits {
                    Some(logits) => {
                        diag += &format!("; logits: {}", value_stats(&logits.value()));
                        let seg = seg_loss(logits, &batch.labels, &self.cfg.loss)?;
                        rec.scale(self.cfg.loss.lambda_rec).add(seg.scale(self.cfg.loss.lambda_seg))?
                    }
                    None => rec,
                };
                Ok((loss, diag))
            }
            Model::Probe(probe) => {
                let logits = probe.forward(f, tape.constant(batch.clear.clone()))?;
                let diag = format!("logits: {}", value_stats(&logits.value()));
                Ok((seg_loss(logits, &batch.labels, &self.cfg.loss)?, diag))
            }
        }
    }

    /// Loss of a batch without updating anything.
    pub fn loss_parts(&self, batch: &Batch) -> Result<LossParts> {
        let tape = Tape::new();
        let f = Fwd::new(&tape, &self.store, false);
        self.parts(&f, batch)
    }

    fn parts(&self, f: &Fwd<'_, f32>, batch: &Batch) -> Result<LossParts> {
        let (loss, _) = self.batch_loss(f, batch)?;
        let total = loss.value().data()[0] as f64;
        // components are recomputed only for logging; the graph above is what trains
        let (rec, seg) = match (&self.model, self.cfg.phase) {
            (Model::Tdpcr(net), phase) => {
                let tape = Tape::new();
                let g = Fwd::new(&tape, &self.store, false);
                let out = net.forward(&g, tape.constant(batch.cloudy.clone()), tape.constant(batch.sar.clone()), ForwardOptions { with_seg: phase == 2, suppress_sar: false })?;
                let rec = rec_loss(out.restored, tape.constant(batch.clear.clone()), &self.cfg.loss)?.value().data()[0] as f64;
                let seg = out.logits.map(|l| seg_loss(l, &batch.labels, &self.cfg.loss).map(|v| v.value().data()[0] as f64)).transpose()?;
                (Some(rec), seg)
            }
            (Model::Probe(_), _) => (None, Some(total)),
        };
        Ok(LossParts { total, rec, seg })
    }

    /// One optimizer update; aborts on a non-finite loss or gradient.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64> {
        let (loss, grads) = {
            let tape = Tape::new();
            let f = Fwd::new(&tape, &self.store, true);
            let (loss, diag) = self.batch_loss(&f, batch)?;
            let lv = loss.value().data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("loss is {lv} at step {}; {diag}", self.step)));
            }
            let mut g = tape.backward(loss)?;
            (lv, f.param_grads(&mut g))
        };
        if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| g.as_ref().is_some_and(|g| !g.all_finite())) {
            let p = self.store.get(self.store.iter().nth(i).expect("index in range").0);
            return Err(Error::Numeric(format!("non-finite gradient for {}/{} at step {}", p.group, p.name, self.step)));
        }
        self.optim.step(&mut self.store, &grads)?;
        self.step += 1;
        Ok(loss)
    }

    /// The (augmented) batch for global step `step`; depends only on the seed and `step`.
    pub fn training_batch(&self, data: &[SampleRecord], step: usize) -> Result<Batch> {
        let sampler = BatchSampler::new(stream_key(self.cfg.seed, "batches"), data.len(), self.cfg.batch_size)?;
        let samples = sampler
            .indices(step)
            .into_iter()
            .enumerate()
            .map(|(j, i)| {
                let s = &data[i];
                let key = stream_key(self.cfg.seed, &format!("augment/{step}/{j}"));
                let crop = (self.cfg.crop > 0 && self.cfg.crop < s.height.min(s.width)).then_some(self.cfg.crop);
                match (self.cfg.flip, crop) {
                    (true, c) => augment(s, key, c.map(|c| (c, c))),
                    (false, Some(c)) => random_crop(s, key, c, c),
                    (false, None) => Ok(s.clone()),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Batch::from_samples(&samples.iter().collect::<Vec<_>>())
    }

    pub fn evaluator(&self) -> Evaluator<'_> {
        match &self.model {
            Model::Tdpcr(n) => Evaluator { net: Some((n, &self.store)), probe: None, batch_size: self.cfg.eval_batch },
            Model::Probe(p) => Evaluator { net: None, probe: Some((p, &self.store)), batch_size: self.cfg.eval_batch },
        }
    }

    fn validation_mode(&self) -> EvalMode {
        match (&self.model, self.cfg.phase) {
            (Model::Probe(_), _) => EvalMode::ClearSeg,
            (Model::Tdpcr(_), 1) => EvalMode::CrOnly,
            (Model::Tdpcr(_), _) => EvalMode::Full,
        }
    }

    /// Trains until `cfg.steps`, validating periodically. With `out`, appends to
    /// `log.jsonl` and writes `best.ckpt` plus a resumable `last.ckpt`.
    pub fn run(&mut self, train: &[SampleRecord], val: &[SampleRecord], out: Option<&Path>) -> Result<RunSummary> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join("log.jsonl");
                Some((OpenOptions::new().create(true).append(true).open(&p).map_err(|e| Error::io(&p, e))?, p))
            }
            None => None,
        };
        let mut write_log = |line: String| -> Result<()> {
            if let Some((f, p)) = log.as_mut() {
                writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
            }
            Ok(())
        };
        let val = match self.cfg.val_limit {
            0 => val,
            n => &val[..n.min(val.len())],
        };
        let start = Instant::now();
        let mut summary = RunSummary { steps: Vec::new(), validations: Vec::new(), best_step: self.step, best_score: f64::NEG_INFINITY, best_params: self.store.clone() };
        while self.step < self.cfg.steps {
            let batch = self.training_batch(train, self.step)?;
            let lr = self.optim.current_lr();
            let loss = self.train_step(&batch)?;
            let rec = StepRecord { kind: "train".into(), step: self.step, phase: self.cfg.phase, loss, rec: None, seg: None, lr, wall_time: start.elapsed().as_secs_f64() };
            write_log(serde_json::to_string(&rec).expect("record serialises"))?;
            summary.steps.push(rec);

            if !val.is_empty() && (self.step.is_multiple_of(self.cfg.val_every) || self.step == self.cfg.steps) {
                let report = self.evaluator().evaluate(val, self.validation_mode())?;
                let v = ValRecord {
                    kind: "val".into(),
                    step: self.step,
                    phase: self.cfg.phase,
                    psnr: report.psnr,
                    ssim: report.ssim,
                    pa: report.seg.as_ref().map(|s| s.pixel_accuracy),
                    miou: report.seg.as_ref().map(|s| s.miou),
                    wall_time: start.elapsed().as_secs_f64(),
                };
                write_log(serde_json::to_string(&v).expect("record serialises"))?;
                let score = if self.cfg.selects_by_psnr() { v.psnr } else { v.miou }.unwrap_or(f64::NEG_INFINITY);
                summary.validations.push(v);
                if score > summary.best_score {
                    summary.best_score = score;
                    summary.best_step = self.step;
                    summary.best_params = self.store.clone();
                    if let Some(dir) = out {
                        checkpoint::save(&dir.join("best.ckpt"), &self.meta(), &self.store, None)?;
                    }
                }
                if let Some(dir) = out {
                    self.save(&dir.join("last.ckpt"), true)?;
                }
            }
        }
        if val.is_empty() {
            summary.best_step = self.step;
            summary.best_params = self.store.clone();
            if let Some(dir) = out {
                checkpoint::save(&dir.join("best.ckpt"), &self.meta(), &self.store, None)?;
            }
        }
        if let Some(dir) = out {
            self.save(&dir.join("last.ckpt"), true)?;
        }
        Ok(summary)
    }
}

/// Phase-1 reconstruction pre-training.
pub fn train_phase1(cfg: &RunConfig, train: &[SampleRecord], val: &[SampleRecord], out: Option<&Path>) -> Result<(Session, RunSummary)> {
    if cfg.phase != 1 {
        return Err(Error::Config(format!("train_phase1 called with phase {}", cfg.phase)));
    }
    let mut s = Session::new(cfg, None)?;
    let summary = s.run(train, val, out)?;
    Ok((s, summary))
}

/// Phase-2 fine-tuning from phase-1 parameters (`None` only for joint training).
pub fn train_phase2(
    cfg: &RunConfig,
    phase1: Option<&ParamStore<f32>>,
    train: &[SampleRecord],
    val: &[SampleRecord],
    out: Option<&Path>,
) -> Result<(Session, RunSummary)> {
    if cfg.phase != 2 {
        return Err(Error::Config(format!("train_phase2 called with phase {}", cfg.phase)));
    }
    let mut s = Session::new(cfg, phase1)?;
    let summary = s.run(train, val, out)?;
    Ok((s, summary))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Segmentation probe applied to the cloudy image.
    DirectSeg,
    /// Restoration metrics only.
    CrOnly,
    /// Restoration, then the probe on the restored image.
    MultiStage,
    /// Restoration and the model's own segmentation head.
    Full,
    /// Probe applied to the clear image (probe validation).
    ClearSeg,
}

impl EvalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct-seg" => Ok(EvalMode::DirectSeg),
            "cr-only" => Ok(EvalMode::CrOnly),
            "multi-stage" => Ok(EvalMode::MultiStage),
            "full" => Ok(EvalMode::Full),
            "clear-seg" => Ok(EvalMode::ClearSeg),
            other => Err(Error::Config(format!("unknown eval mode '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::DirectSeg => "direct-seg",
            EvalMode::CrOnly => "cr-only",
            EvalMode::MultiStage => "multi-stage",
            EvalMode::Full => "full",
            EvalMode::ClearSeg => "clear-seg",
        }
    }

    fn restores(self) -> bool {
        matches!(self, EvalMode::CrOnly | EvalMode::MultiStage | EvalMode::Full)
    }

    fn segments(self) -> bool {
        self != EvalMode::CrOnly
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub samples: usize,
    /// Mean per-image PSNR, each capped at the table cap.
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub seg: Option<SegMetrics>,
}

impl EvalReport {
    pub fn to_metrics(&self) -> MetricReport {
        let mut r = MetricReport::default();
        let n = self.samples as u64;
        if let Some(v) = self.psnr {
            r.push("psnr", v, n);
        }
        if let Some(v) = self.ssim {
            r.push("ssim", v, n);
        }
        if let Some(s) = &self.seg {
            r.push("pa", s.pixel_accuracy, s.pixels);
            r.push("miou", s.miou, s.pixels);
            for (k, iou) in s.per_class_iou.iter().enumerate() {
                if let Some(v) = iou {
                    r.push(format!("iou_class{k}"), *v, s.pixels);
                }
            }
        }
        r
    }
}

/// Model outputs for one batch.
pub struct Prediction {
    pub restored: Option<Array<f32>>,
    pub classes: Option<Vec<u8>>,
}

/// Borrowed models for inference; which are required depends on the mode.
pub struct Evaluator<'a> {
    pub net: Option<(&'a TdpCr, &'a ParamStore<f32>)>,
    pub probe: Option<(&'a SegProbe, &'a ParamStore<f32>)>,
    pub batch_size: usize,
}

impl Evaluator<'_> {
    fn need_net(&self, mode: EvalMode) -> Result<(&TdpCr, &ParamStore<f32>)> {
        self.net.ok_or_else(|| Error::Argument(format!("{} evaluation needs a restoration checkpoint", mode.name())))
    }

    fn need_probe(&self, mode: EvalMode) -> Result<(&SegProbe, &ParamStore<f32>)> {
        self.probe.ok_or_else(|| Error::Argument(format!("{} evaluation needs a segmentation probe", mode.name())))
    }

    fn run_probe(&self, mode: EvalMode, image: &Array<f32>) -> Result<Vec<u8>> {
        let (probe, store) = self.need_probe(mode)?;
        let tape = Tape::new();
        let f = Fwd::new(&tape, store, false);
        argmax_classes(&probe.forward(&f, tape.constant(image.clone()))?.value())
    }

    pub fn predict(&self, batch: &Batch, mode: EvalMode) -> Result<Prediction> {
        let restore = |with_seg: bool| -> Result<(Array<f32>, Option<Vec<u8>>)> {
            let (net, store) = self.need_net(mode)?;
            let tape = Tape::new();
            let f = Fwd::new(&tape, store, false);
            let out = net.forward(&f, tape.constant(batch.cloudy.clone()), tape.constant(batch.sar.clone()), ForwardOptions { with_seg, suppress_sar: false })?;
            let classes = out.logits.map(|l| argmax_classes(&l.value())).transpose()?;
            let restored = (*out.restored.value()).clone();
            Ok((restored, classes))
        };
        Ok(match mode {
            EvalMode::DirectSeg => Prediction { restored: None, classes: Some(self.run_probe(mode, &batch.cloudy)?) },
            EvalMode::ClearSeg => Prediction { restored: None, classes: Some(self.run_probe(mode, &batch.clear)?) },
            EvalMode::CrOnly => Prediction { restored: Some(restore(false)?.0), classes: None },
            EvalMode::MultiStage => {
                let (restored, _) = restore(false)?;
                let classes = self.run_probe(mode, &restored)?;
                Prediction { restored: Some(restored), classes: Some(classes) }
            }
            EvalMode::Full => {
                let (restored, classes) = restore(true)?;
                Prediction { restored: Some(restored), classes }
            }
        })
    }

    pub fn evaluate(&self, samples: &[SampleRecord], mode: EvalMode) -> Result<EvalReport> {
        if samples.is_empty() {
            return Err(Error::Data("evaluation split is empty".into()));
        }
        let k = match (self.net, self.probe) {
            (Some((n, _)), _) => n.config().num_classes,
            (None, Some((p, _))) => p.config().num_classes,
            (None, None) => return Err(Error::Argument("evaluator has no model".into())),
        };
        let mut cm = ConfusionMatrix::new(k);
        let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
        for chunk in samples.chunks(self.batch_size.max(1)) {
            let batch = Batch::from_samples(&chunk.iter().collect::<Vec<_>>())?;
            let pred = self.predict(&batch, mode)?;
            if let Some(restored) = &pred.restored {
                let (b, c, h, w) = restored.dims4()?;
                let n = c * h * w;
                for i in 0..b {
                    let r = Array::from_vec(&[1, c, h, w], restored.data()[i * n..(i + 1) * n].to_vec())?;
                    let t = Array::from_vec(&[1, c, h, w], batch.clear.data()[i * n..(i + 1) * n].to_vec())?;
                    psnr_sum += psnr(&r, &t)?.min(PSNR_TABLE_CAP);
                    ssim_sum += ssim_metric(&r, &t)?;
                }
            }
            if let Some(classes) = &pred.classes {
                cm.add(classes, &batch.labels)?;
            }
        }
        let n = samples.len() as f64;
        Ok(EvalReport {
            mode,
            samples: samples.len(),
            psnr: mode.restores().then_some(psnr_sum / n),
            ssim: mode.restores().then_some(ssim_sum / n),
            seg: mode.segments().then(|| cm.metrics()),
        })
    }
}

/// Mean per-image PSNR and SSIM of the cloudy input against the clear target.
pub fn identity_baseline(samples: &[SampleRecord]) -> Result<(f64, f64)> {
    let (mut p, mut s) = (0.0, 0.0);
    for x in samples {
        let shape = [1, crate::data::OPTICAL_BANDS, x.height, x.width];
        let a = Array::from_vec(&shape, x.opt_cloudy.clone())?;
        let b = Array::from_vec(&shape, x.opt_clear.clone())?;
        p += psnr(&a, &b)?.min(PSNR_TABLE_CAP);
        s += ssim_metric(&a, &b)?;
    }
    let n = samples.len().max(1) as f64;
    Ok((p / n, s / n))
}

/// Settings shared by every run of the comparison studies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub network: NetworkConfig,
    pub probe: ProbeConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub probe_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub crop: usize,
    pub flip: bool,
    pub val_every: usize,
    pub val_limit: usize,
    pub eval_batch: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        let run = RunConfig::default();
        Self {
            network: run.network,
            probe: run.probe,
            loss: run.loss,
            optim: run.optim,
            phase1_steps: 5000,
            phase2_steps: 2000,
            probe_steps: 2000,
            batch_size: run.batch_size,
            seed: 0,
            crop: run.crop,
            flip: run.flip,
            val_every: run.val_every,
            val_limit: run.val_limit,
            eval_batch: run.eval_batch,
        }
    }
}

impl StudyConfig {
    pub fn run_config(&self, phase: u8, policy: FreezePolicy, mode: BranchMode, steps: usize) -> RunConfig {
        RunConfig {
            model: ModelKind::Tdpcr,
            phase,
            freeze_policy: policy,
            network: NetworkConfig { branch_mode: mode, ..self.network.clone() },
            probe: self.probe.clone(),
            loss: self.loss,
            optim: self.optim,
            steps,
            batch_size: self.batch_size,
            seed: self.seed,
            crop: self.crop,
            flip: self.flip,
            val_every: self.val_every,
            val_limit: self.val_limit,
            eval_batch: self.eval_batch,
            init_checkpoint: None,
        }
    }

    pub fn probe_config(&self) -> RunConfig {
        RunConfig { model: ModelKind::SegProbe, steps: self.probe_steps, ..self.run_config(1, FreezePolicy::None, BranchMode::Both, self.probe_steps) }
    }
}

/// One row of the ablation table.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: &'static str,
    pub branch_mode: BranchMode,
    pub policy: FreezePolicy,
    pub pretrained: bool,
    pub result: std::result::Result<(EvalReport, EvalReport), String>,
}

impl AblationRow {
    pub fn val(&self) -> Option<&EvalReport> {
        self.result.as_ref().ok().map(|(v, _)| v)
    }

    pub fn test(&self) -> Option<&EvalReport> {
        self.result.as_ref().ok().map(|(_, t)| t)
    }
}

/// Test-split results of the three paradigms.
#[derive(Clone, Debug)]
pub struct ParadigmReport {
    pub direct: EvalReport,
    pub multi_stage: EvalReport,
    pub multi_task: EvalReport,
    /// Probe on clear test imagery: an upper reference for the probe itself.
    pub probe_on_clear: EvalReport,
}

#[derive(Clone, Debug)]
pub struct StudyReport {
    /// Best validation PSNR of each phase-1 run, keyed by branch mode.
    pub phase1: Vec<(&'static str, std::result::Result<f64, String>)>,
    pub rows: Vec<AblationRow>,
    pub paradigms: std::result::Result<ParadigmReport, String>,
    pub seconds: f64,
}

pub const ABLATION_ROWS: [(&str, BranchMode, FreezePolicy, bool); 5] = [
    ("global_only", BranchMode::GlobalOnly, FreezePolicy::Peft, true),
    ("local_only", BranchMode::LocalOnly, FreezePolicy::Peft, true),
    ("joint_training", BranchMode::Both, FreezePolicy::None, false),
    ("pretrain_fpft", BranchMode::Both, FreezePolicy::Fpft, true),
    ("pretrain_peft", BranchMode::Both, FreezePolicy::Peft, true),
];

fn row_dir(out: Option<&Path>, name: &str) -> Option<PathBuf> {
    out.map(|d| d.join(name))
}

/// Runs the five ablation rows and the three-paradigm comparison with shared seeds.
/// Failures of individual runs are recorded and the remaining runs continue.
pub fn run_study(
    cfg: &StudyConfig,
    train: &[SampleRecord],
    val: &[SampleRecord],
    test: &[SampleRecord],
    out: Option<&Path>,
    progress: &mut dyn FnMut(&str),
) -> Result<StudyReport> {
    let start = Instant::now();
    let mut phase1: BTreeMap<&'static str, std::result::Result<ParamStore<f32>, String>> = BTreeMap::new();
    let mut phase1_psnr = Vec::new();
    for (mode, key) in [(BranchMode::Both, "both"), (BranchMode::GlobalOnly, "global_only"), (BranchMode::LocalOnly, "local_only")] {
        progress(&format!("phase 1 ({key})"));
        let rc = cfg.run_config(1, FreezePolicy::Peft, mode, cfg.phase1_steps);
        let r = train_phase1(&rc, train, val, row_dir(out, &format!("phase1_{key}")).as_deref()).map_err(|e| e.to_string());
        phase1_psnr.push((key, r.as_ref().map(|(_, s)| s.best_score).map_err(Clone::clone)));
        phase1.insert(key, r.map(|(_, s)| s.best_params));
    }

    let mut rows = Vec::new();
    let mut multi_task_params = None;
    for (name, mode, policy, pretrained) in ABLATION_ROWS {
        progress(&format!("ablation row {name}"));
        let result = (|| -> Result<(EvalReport, EvalReport, Session, ParamStore<f32>)> {
            let (init, steps) = match pretrained {
                true => {
                    let key = match mode {
                        BranchMode::Both => "both",
                        BranchMode::GlobalOnly => "global_only",
                        BranchMode::LocalOnly => "local_only",
                    };
                    let p = phase1[key].as_ref().map_err(|e| Error::Data(format!("phase 1 ({key}) failed: {e}")))?;
                    (Some(p), cfg.phase2_steps)
                }
                false => (None, cfg.phase1_steps + cfg.phase2_steps),
            };
            let rc = cfg.run_config(2, policy, mode, steps);
            let (mut session, summary) = train_phase2(&rc, init, train, val, row_dir(out, name).as_deref())?;
            session.store = summary.best_params.clone();
            let ev = session.evaluator();
            let v = ev.evaluate(val, EvalMode::Full)?;
            let t = ev.evaluate(test, EvalMode::Full)?;
            Ok((v, t, session, summary.best_params))
        })();
        let result = match result {
            Ok((v, t, _, params)) => {
                if name == "pretrain_peft" {
                    multi_task_params = Some(params);
                }
                Ok((v, t))
            }
            Err(e) => Err(e.to_string()),
        };
        rows.push(AblationRow { name, branch_mode: mode, policy, pretrained, result });
    }

    progress("paradigms");
    let paradigms = (|| -> Result<ParadigmReport> {
        let (probe_session, probe_summary) = {
            let rc = cfg.probe_config();
            let mut s = Session::new(&rc, None)?;
            let summary = s.run(train, val, row_dir(out, "probe").as_deref())?;
            (s, summary)
        };
        let probe = probe_session.probe().expect("probe session");
        let probe_store = &probe_summary.best_params;
        let cr_params = phase1["both"].as_ref().map_err(|e| Error::Data(format!("phase 1 (both) failed: {e}")))?;
        let (net, _) = TdpCr::build::<f32>(&cfg.network, cfg.seed)?;
        let cr = Evaluator { net: Some((&net, cr_params)), probe: Some((probe, probe_store)), batch_size: cfg.eval_batch };
        let full_params = multi_task_params.as_ref().ok_or_else(|| Error::Data("multi-task row failed".into()))?;
        let full = Evaluator { net: Some((&net, full_params)), probe: None, batch_size: cfg.eval_batch };
        Ok(ParadigmReport {
            direct: cr.evaluate(test, EvalMode::DirectSeg)?,
            multi_stage: cr.evaluate(test, EvalMode::MultiStage)?,
            multi_task: full.evaluate(test, EvalMode::Full)?,
            probe_on_clear: cr.evaluate(test, EvalMode::ClearSeg)?,
        })
    })()
    .map_err(|e| e.to_string());

    Ok(StudyReport { phase1: phase1_psnr, rows, paradigms, seconds: start.elapsed().as_secs_f64() })
}

fn fmt_opt(v: Option<f64>, scale: f64, digits: usize) -> String {
    v.map_or("-".into(), |v| format!("{:.*}", digits, v * scale))
}

impl StudyReport {
    /// Human-readable table followed by key-value records.
    pub fn to_text(&self) -> String {
        let mut s = String::from("phase 1 best val PSNR:");
        for (key, r) in &self.phase1 {
            match r {
                Ok(p) => s += &format!(" {key} {p:.3}"),
                Err(e) => s += &format!(" {key} failed ({e})"),
            }
        }
        s += "\n\n";
        s += &format!("{:<16} {:>8} {:>8} {:>8} {:>8} {:>10}\n", "row", "PSNR", "SSIM", "PA", "mIoU", "val PSNR");
        for r in &self.rows {
            match &r.result {
                Ok((v, t)) => {
                    let seg = t.seg.as_ref();
                    s += &format!(
                        "{:<16} {:>8} {:>8} {:>8} {:>8} {:>10}\n",
                        r.name,
                        fmt_opt(t.psnr, 1.0, 2),
                        fmt_opt(t.ssim, 1.0, 4),
                        fmt_opt(seg.map(|m| m.pixel_accuracy), 100.0, 2),
                        fmt_opt(seg.map(|m| m.miou), 100.0, 2),
                        fmt_opt(v.psnr, 1.0, 2)
                    );
                }
                Err(e) => s += &format!("{:<16} failed: {e}\n", r.name),
            }
        }
        match &self.paradigms {
            Ok(p) => {
                s += "\nparadigm        PA       mIoU\n";
                for (name, r) in [("direct", &p.direct), ("multi_stage", &p.multi_stage), ("multi_task", &p.multi_task), ("probe_clear", &p.probe_on_clear)] {
                    let seg = r.seg.as_ref();
                    s += &format!("{:<14} {:>6} {:>8}\n", name, fmt_opt(seg.map(|m| m.pixel_accuracy), 100.0, 2), fmt_opt(seg.map(|m| m.miou), 100.0, 2));
                }
            }
            Err(e) => s += &format!("\nparadigms failed: {e}\n"),
        }
        s += "\n";
        s += &self.to_metrics().to_text();
        s
    }

    pub fn to_metrics(&self) -> MetricReport {
        let mut m = MetricReport::default();
        for (key, r) in &self.phase1 {
            if let Ok(p) = r {
                m.push(format!("phase1_{key}.val.psnr"), *p, 1);
            }
        }
        for r in &self.rows {
            if let Ok((v, t)) = &r.result {
                for rec in t.to_metrics().records {
                    m.push(format!("{}.test.{}", r.name, rec.name), rec.value, rec.count);
                }
                if let Some(p) = v.psnr {
                    m.push(format!("{}.val.psnr", r.name), p, v.samples as u64);
                }
                if let Some(seg) = &v.seg {
                    m.push(format!("{}.val.miou", r.name), seg.miou, seg.pixels);
                }
            }
        }
        if let Ok(p) = &self.paradigms {
            for (name, r) in [("direct", &p.direct), ("multi_stage", &p.multi_stage), ("multi_task", &p.multi_task), ("probe_clear", &p.probe_on_clear)] {
                for rec in r.to_metrics().records {
                    m.push(format!("paradigm.{name}.{}", rec.name), rec.value, rec.count);
                }
            }
        }
        m
    }
}

/// Writes a metrics report as `<stem>.txt` (records) and `<stem>.json`.
pub fn write_metrics(report: &MetricReport, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let txt = dir.join(format!("{stem}.txt"));
    std::fs::write(&txt, report.to_text()).map_err(|e| Error::io(&txt, e))?;
    let json = dir.join(format!("{stem}.json"));
    let mut f = File::create(&json).map_err(|e| Error::io(&json, e))?;
    let map: BTreeMap<&str, f64> = report.records.iter().map(|r| (r.name.as_str(), r.value)).collect();
    let text = serde_json::to_string_pretty(&map).map_err(|e| Error::Data(e.to_string()))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&json, e))
}
