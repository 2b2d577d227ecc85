use std::path::{Path, PathBuf};

use tdpcr_autodiff::Tape;
use tdpcr_core::checkpoint::{self, Checkpoint};
use tdpcr_core::data::{read_split, Batch, SampleRecord, Split};
use tdpcr_core::network::{ForwardOptions, NetworkConfig, TdpCr};
use tdpcr_core::params::{Fwd, ParamStore};
use tdpcr_core::probe::{ProbeConfig, SegProbe};
use tdpcr_core::trainer::{run_study, write_metrics, EvalMode, Evaluator, ModelKind, Session};
use tdpcr_core::{Error, Result};

use crate::config::{Config, PcaScope};
use crate::image::{render_gray, render_labels, Rgb, Stretch};
use crate::viz::{prompt_to_rgb, rows_from_planar, Pca};

pub enum LoadedModel {
    Network(TdpCr, ParamStore<f32>),
    Probe(SegProbe, ParamStore<f32>),
}

fn meta_config<T: serde::de::DeserializeOwned>(ckpt: &Checkpoint, path: &Path) -> Result<T> {
    serde_json::from_value(ckpt.meta.config.clone()).map_err(|e| Error::Data(format!("{}: architecture config: {e}", path.display())))
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ckpt = checkpoint::load(path)?;
    match ckpt.meta.model.as_str() {
        m if m == ModelKind::Tdpcr.name() => {
            let cfg: NetworkConfig = meta_config(&ckpt, path)?;
            let (net, mut store) = TdpCr::build::<f32>(&cfg, ckpt.meta.seed)?;
            ckpt.load_into(&mut store)?;
            Ok(LoadedModel::Network(net, store))
        }
        m if m == ModelKind::SegProbe.name() => {
            let cfg: ProbeConfig = meta_config(&ckpt, path)?;
            let (probe, mut store) = SegProbe::build::<f32>(&cfg, ckpt.meta.seed)?;
            ckpt.load_into(&mut store)?;
            Ok(LoadedModel::Probe(probe, store))
        }
        other => Err(Error::Data(format!("{}: unknown model kind '{other}'", path.display()))),
    }
}

pub fn gen_data(cfg: &Config) -> Result<PathBuf> {
    let root = cfg.out.clone().map_or_else(|| cfg.data_dir(), Ok)?;
    cfg.dataset.write(&root)?;
    cfg.write_echo(&root)?;
    println!("wrote {}/{}/{} scenes to {}", cfg.dataset.train, cfg.dataset.val, cfg.dataset.test, root.display());
    Ok(root)
}

pub fn train(cfg: &Config) -> Result<()> {
    let data = cfg.data_dir()?;
    let out = cfg.out_dir()?;
    cfg.write_echo(&out)?;
    let train = read_split(&data, Split::Train)?;
    let val = read_split(&data, Split::Val)?;
    let mut session = Session::from_config(&cfg.run)?;
    let summary = session.run(&train, &val, Some(&out))?;
    let last = summary.steps.last();
    println!(
        "trained {} steps; final loss {}; best step {} (score {:.4}); outputs in {}",
        session.step,
        last.map_or("-".into(), |r| format!("{:.5}", r.loss)),
        summary.best_step,
        summary.best_score,
        out.display()
    );
    Ok(())
}

pub fn eval(cfg: &Config) -> Result<()> {
    let data = cfg.data_dir()?;
    let out = cfg.out_dir()?;
    cfg.write_echo(&out)?;
    let e = &cfg.eval;
    let mut net = None;
    let mut probe = None;
    for path in [&e.checkpoint, &e.probe_checkpoint].into_iter().flatten() {
        match load_model(path)? {
            LoadedModel::Network(n, s) => net = Some((n, s)),
            LoadedModel::Probe(p, s) => probe = Some((p, s)),
        }
    }
    if net.is_none() && probe.is_none() {
        return Err(Error::Config("eval needs --ckpt (or eval.checkpoint)".into()));
    }
    let ev = Evaluator { net: net.as_ref().map(|(n, s)| (n, s)), probe: probe.as_ref().map(|(p, s)| (p, s)), batch_size: e.batch_size };
    let samples = read_split(&data, e.split)?;
    let report = ev.evaluate(&samples, e.mode)?;
    let metrics = report.to_metrics();
    write_metrics(&metrics, &out, "metrics")?;
    print!("{} on {} ({} scenes)\n{}", e.mode.name(), e.split.name(), samples.len(), metrics.to_text());
    for (i, s) in samples.iter().take(e.strips).enumerate() {
        strip(&ev, s, e.mode)?.write(&out.join(format!("strip_{i:03}.ppm")))?;
    }
    Ok(())
}

/// cloudy | restored | clear | labels | predicted; missing panels are gray.
fn strip(ev: &Evaluator<'_>, s: &SampleRecord, mode: EvalMode) -> Result<Rgb> {
    let (w, h) = (s.width, s.height);
    let pred = ev.predict(&Batch::from_samples(&[s])?, mode)?;
    let stretch = Stretch::fit(&s.opt_clear, s.pixels());
    let gray = Rgb::filled(w, h, 128);
    Rgb::hstack(&[
        stretch.render(&s.opt_cloudy, w, h),
        pred.restored.as_ref().map_or_else(|| gray.clone(), |r| stretch.render(r.data(), w, h)),
        stretch.render(&s.opt_clear, w, h),
        render_labels(&s.labels, w, h),
        pred.classes.as_ref().map_or(gray, |c| render_labels(c, w, h)),
    ])
}

pub fn ablate(cfg: &Config) -> Result<()> {
    let data = cfg.data_dir()?;
    let out = cfg.out_dir()?;
    cfg.write_echo(&out)?;
    let train = read_split(&data, Split::Train)?;
    let val = read_split(&data, Split::Val)?;
    let test = read_split(&data, Split::Test)?;
    let report = run_study(&cfg.study, &train, &val, &test, Some(&out), &mut |msg| eprintln!("[ablate] {msg}"))?;
    let text = report.to_text();
    let path = out.join("ablation.txt");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    write_metrics(&report.to_metrics(), &out, "ablation_metrics")?;
    print!("{text}");
    Ok(())
}

fn prompt_planar(net: &TdpCr, store: &ParamStore<f32>, s: &SampleRecord) -> Result<(Vec<f32>, usize)> {
    let batch = Batch::from_samples(&[s])?;
    let tape = Tape::new();
    let f = Fwd::new(&tape, store, false);
    let out = net.forward(&f, tape.constant(batch.cloudy), tape.constant(batch.sar), ForwardOptions::default())?;
    let p = out.prompt.value();
    Ok((p.data().to_vec(), p.shape()[1]))
}

pub fn viz_prompt(cfg: &Config) -> Result<()> {
    let data = cfg.data_dir()?;
    let out = cfg.out_dir()?;
    cfg.write_echo(&out)?;
    let v = &cfg.viz;
    let path = v.checkpoint.as_ref().ok_or_else(|| Error::Config("viz-prompt needs --ckpt (or viz.checkpoint)".into()))?;
    let LoadedModel::Network(net, store) = load_model(path)? else {
        return Err(Error::Argument(format!("{} is not a restoration checkpoint", path.display())));
    };
    let cp = net.config().prompt_channels;
    if cp < 3 {
        return Err(Error::Argument(format!("prompt has {cp} channels; an RGB projection needs at least 3")));
    }
    let samples = read_split(&data, v.split)?;
    let s = samples.get(v.index).ok_or_else(|| Error::Argument(format!("{} split has {} scenes, index {} requested", v.split.name(), samples.len(), v.index)))?;
    let (planar, c) = prompt_planar(&net, &store, s)?;
    let rows = rows_from_planar(&planar, c);
    let pca = match v.scope {
        PcaScope::Image => Pca::fit(&rows)?,
        PcaScope::Dataset => {
            let mut all = Vec::new();
            for x in &samples {
                all.push(rows_from_planar(&prompt_planar(&net, &store, x)?.0, c));
            }
            let n: usize = all.iter().map(|m| m.nrows()).sum();
            let mut stacked = nalgebra::DMatrix::zeros(n, c);
            let mut r0 = 0;
            for m in &all {
                stacked.rows_mut(r0, m.nrows()).copy_from(m);
                r0 += m.nrows();
            }
            Pca::fit(&stacked)?
        }
    };
    let img = prompt_to_rgb(&pca, &rows)?;
    if img.degenerate {
        eprintln!("warning: prompt map has no variance; writing a uniform gray image");
    }
    let (w, h) = (s.width, s.height);
    Rgb { width: w, height: h, data: img.rgb }.write(&out.join("prompt_pca.ppm"))?;
    Stretch::fit(&s.opt_clear, s.pixels()).render(&s.opt_cloudy, w, h).write(&out.join("input.ppm"))?;
    render_gray(&s.cloud_alpha, w, h).write(&out.join("cloud_alpha.ppm"))?;
    println!("wrote prompt projection of {} scene {} to {}", v.split.name(), v.index, out.display());
    Ok(())
}
