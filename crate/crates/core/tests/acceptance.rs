//! Acceptance criteria 1–10. Each test prints one `criterion N: PASS|FAIL ...` line
//! straight to stdout (bypassing the harness capture) and asserts the pinned check.
//!
//! Criteria 5–7 train networks; the desk-scale sizes they use are the constants below.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdpcr_autodiff::gradcheck::{central_difference, relative_error};
use tdpcr_autodiff::{Array, Scalar, Tape};
use tdpcr_core::checkpoint;
use tdpcr_core::data::*;
use tdpcr_core::network::{count_parameters, ForwardOptions, NetworkConfig, TdpCr};
use tdpcr_core::objectives::{psnr, rec_loss, seg_loss, seg_metrics, ssim_metric, LossWeights, IGNORE_LABEL};
use tdpcr_core::optim::OptimConfig;
use tdpcr_core::params::{Fwd, Group, Init, ParamStore};
use tdpcr_core::pgf::{BranchMode, LogitOverride, PgfBlock};
use tdpcr_core::trainer::*;

/// Fusion-block widths of the four stages.
const STAGE_WIDTHS: [usize; 4] = [32, 64, 128, 256];
const SIMPLEX_TOL: f64 = 1e-6;
/// Rounding slack for `a·α + b·(1−α)` against `[min(a, b), max(a, b)]`.
const CONVEX_TOL: f64 = 1e-12;
const LOSS_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-3;
const PEFT_STEPS: usize = 500;
const OVERFIT_SCENES: usize = 8;
const OVERFIT_STEPS: usize = 2000;
const OVERFIT_SIZE: usize = 64;
const OVERFIT_BATCH: usize = 2;
const OVERFIT_GAIN_DB: f64 = 5.0;
const OVERFIT_SSIM: f64 = 0.9;
const SSIM_ORACLE_TOL: f64 = 1e-5;
const PARAM_TARGET: f64 = 5.95e6;
const PARAM_BAND: f64 = 0.25;
const ROUND_TRIP_SCENES: usize = 50;

/// Benchmark for criteria 6 and 7: 512/64/64 scenes.
const STUDY_SIZE: usize = 32;
const STUDY_BASE_WIDTH: usize = 16;
const STUDY_PHASE1_STEPS: usize = 600;
const STUDY_PHASE2_STEPS: usize = 300;
const STUDY_PROBE_STEPS: usize = 300;
/// mIoU gap (points) the paradigm ordering is expected to clear; smaller gaps are flagged.
const PARADIGM_GAP: f64 = 1.0;

fn report(n: usize, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" }).unwrap();
    out.flush().unwrap();
}

fn note(text: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "  {text}").unwrap();
}

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Array<f64> {
    Array::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn perturb<T: Scalar>(store: &mut ParamStore<T>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = T::lit(v.as_f64() + rng.gen_range(-scale..scale));
        }
    }
}

fn batch_of(samples: &[SampleRecord]) -> Batch {
    Batch::from_samples(&samples.iter().collect::<Vec<_>>()).unwrap()
}

// Independent reference implementations -------------------------------------------

/// Direct 2-D Gaussian-window SSIM averaged over batch, bands and valid positions.
fn ssim_oracle(x: &Array<f64>, y: &Array<f64>) -> f64 {
    let (b, c, h, w) = x.dims4().unwrap();
    let mut n = 11.min(h).min(w);
    if n % 2 == 0 {
        n -= 1;
    }
    let centre = (n - 1) as f64 / 2.0;
    let mut win = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            win[i * n + j] = (-(((i as f64 - centre).powi(2) + (j as f64 - centre).powi(2)) / (2.0 * 1.5 * 1.5))).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut sum, mut count) = (0.0, 0usize);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..=h - n {
                for ox in 0..=w - n {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..n {
                        for j in 0..n {
                            let g = win[i * n + j];
                            let a = x.get(&[bi, ci, oy + i, ox + j]);
                            let v = y.get(&[bi, ci, oy + i, ox + j]);
                            mx += g * a;
                            my += g * v;
                            sxx += g * a * a;
                            syy += g * v * v;
                            sxy += g * a * v;
                        }
                    }
                    let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    sum += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
    }
    sum / count as f64
}

/// Pixel accuracy and mIoU by per-class set counting.
fn seg_oracle(pred: &[u8], truth: &[u8], k: usize) -> (f64, f64) {
    let valid: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] != IGNORE_LABEL && pred[i] != IGNORE_LABEL).collect();
    let correct = valid.iter().filter(|&&i| pred[i] == truth[i]).count();
    let mut ious = Vec::new();
    for c in 0..k as u8 {
        let inter = valid.iter().filter(|&&i| pred[i] == c && truth[i] == c).count();
        let union = valid.iter().filter(|&&i| pred[i] == c || truth[i] == c).count();
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    let pa = if valid.is_empty() { 0.0 } else { correct as f64 / valid.len() as f64 };
    let miou = if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };
    (pa, miou)
}

// Criteria -------------------------------------------------------------------------

#[test]
fn criterion_01_fusion_normalisation() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_sum, mut worst_out) = (0.0f64, 0.0f64);
    for t in 0..100 {
        let c = STAGE_WIDTHS[t % STAGE_WIDTHS.len()];
        let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let mut store = ParamStore::<f64>::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(t as u64);
        let block = PgfBlock::new(&mut Init::new(&mut store, &mut init_rng, Group::PgfBlocks), "pgf", c, 8, BranchMode::Both);
        perturb(&mut store, 0.5, 1000 + t as u64);
        let scale = 10f64.powf(rng.gen_range(-1.0..1.5));
        let opt = random(&[2, c, h, w], scale, &mut rng);
        let sar = random(&[2, c, h, w], scale, &mut rng);
        let prompt = random(&[2, 8, h, w], scale, &mut rng);
        let tape = Tape::new();
        let f = Fwd::new(&tape, &store, false);
        let tr = block.fuse_traced(&f, tape.constant(opt.clone()), tape.constant(sar.clone()), tape.constant(prompt), LogitOverride::default()).unwrap();
        let alpha = tr.alpha.value();
        let plane = c * h * w;
        for bi in 0..2 {
            for i in 0..plane {
                let s = alpha.data()[2 * bi * plane + i] + alpha.data()[(2 * bi + 1) * plane + i];
                worst_sum = worst_sum.max((s - 1.0).abs());
            }
        }
        for ((&x, &a), &b) in tr.fused.value().data().iter().zip(opt.data()).zip(sar.data()) {
            // excursion beyond [min, max], relative to the operand scale
            let scale = a.abs().max(b.abs()).max(1.0);
            worst_out = worst_out.max((a.min(b) - x) / scale).max((x - a.max(b)) / scale);
        }
    }
    let pass = worst_sum <= SIMPLEX_TOL && worst_out <= CONVEX_TOL;
    report(1, pass, &format!("max |sum(alpha) - 1| = {worst_sum:.2e} (tol {SIMPLEX_TOL:e}); max relative excursion outside [min, max] = {worst_out:.2e} (tol {CONVEX_TOL:e}); {:.1}s", start.elapsed().as_secs_f64()));
    assert!(pass);
}

#[test]
fn criterion_02_identity_at_init() {
    let cfg = RunConfig { crop: 0, flip: false, batch_size: 2, steps: 1, ..Default::default() };
    let session = Session::new(&cfg, None).unwrap();
    let scenes = DatasetConfig { size: 32, train: 2, ..Default::default() }.generate_split(Split::Train).unwrap();
    let batch = batch_of(&scenes);

    let net = session.network().unwrap();
    let tape = Tape::new();
    let f = Fwd::new(&tape, &session.store, false);
    let out = net.forward(&f, tape.constant(batch.cloudy.clone()), tape.constant(batch.sar.clone()), ForwardOptions::default()).unwrap();
    let identical = out.restored.value().data().iter().zip(batch.cloudy.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let mut s = session;
    let step0 = s.train_step(&s.training_batch(&scenes, 0).unwrap()).unwrap();
    let (ic, igt) = (batch.cloudy.cast::<f64>(), batch.clear.cast::<f64>());
    let l1 = ic.data().iter().zip(igt.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / ic.len() as f64;
    let analytic = l1 + LossWeights::default().lambda_ssim * (1.0 - ssim_oracle(&ic, &igt));
    let err = (step0 - analytic).abs();
    let pass = identical && err <= LOSS_TOL;
    report(2, pass, &format!("restored == cloudy bitwise: {identical}; step-0 loss {step0:.8} vs analytic {analytic:.8}, |diff| = {err:.2e} (tol {LOSS_TOL:e})"));
    assert!(pass);
}

#[test]
fn criterion_03_gradients() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    let mut lines = Vec::new();

    // (a) fusion block with respect to its three inputs
    let c = 8;
    let mut store = ParamStore::<f64>::new();
    let block = PgfBlock::new(&mut Init::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), Group::PgfBlocks), "pgf", c, 8, BranchMode::Both);
    perturb(&mut store, 0.3, 2);
    let inputs = [random(&[1, c, 4, 4], 1.0, &mut rng), random(&[1, c, 4, 4], 1.0, &mut rng), random(&[1, 8, 4, 4], 1.0, &mut rng)];
    let probe = random(&[1, c, 4, 4], 1.0, &mut rng);
    let eval = |xs: &[Array<f64>]| {
        let tape = Tape::new();
        let f = Fwd::new(&tape, &store, false);
        let y = block.fuse(&f, tape.constant(xs[0].clone()), tape.constant(xs[1].clone()), tape.constant(xs[2].clone())).unwrap();
        y.value().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let tape = Tape::new();
    let f = Fwd::new(&tape, &store, false);
    let vars: Vec<_> = inputs.iter().map(|a| tape.leaf(a.clone(), true)).collect();
    let y = block.fuse(&f, vars[0], vars[1], vars[2]).unwrap();
    let g = tape.backward(y.mul(tape.constant(probe.clone())).unwrap().sum_all()).unwrap();
    for (i, name) in ["F_opt", "F_sar", "P"].iter().enumerate() {
        let analytic = g.get(vars[i]).unwrap().data().to_vec();
        let idx: Vec<usize> = (0..inputs[i].len()).collect();
        let numeric = central_difference(inputs[i].data(), &idx, FD_STEP, |x| {
            let mut xs = inputs.clone();
            xs[i] = Array::from_vec(inputs[i].shape(), x.to_vec()).unwrap();
            eval(&xs)
        });
        let err = relative_error(&analytic, &numeric, 1e-12);
        worst = worst.max(err);
        lines.push(format!("fusion wrt {name}: {err:.2e}"));
    }

    // (b) one sampled parameter per group through the reconstruction loss (16×16 input);
    // the segmentation head is not on that path and is checked through the segmentation loss
    let (net, mut store) = TdpCr::build::<f64>(&NetworkConfig::default(), 5).unwrap();
    perturb(&mut store, 0.02, 6);
    let scenes = DatasetConfig { size: 16, train: 1, ..Default::default() }.generate_split(Split::Train).unwrap();
    let batch = batch_of(&scenes);
    let (cloudy, sar, clear) = (batch.cloudy.cast::<f64>(), batch.sar.cast::<f64>(), batch.clear.cast::<f64>());
    let w = LossWeights::default();
    let loss_of = |store: &ParamStore<f64>, tape: &Tape<f64>, track: bool, group: Group| -> (f64, Option<Vec<Option<Array<f64>>>>) {
        let f = Fwd::new(tape, store, track);
        let seg = group == Group::SegHead;
        let out = net.forward(&f, tape.constant(cloudy.clone()), tape.constant(sar.clone()), ForwardOptions { with_seg: seg, suppress_sar: false }).unwrap();
        let loss = match seg {
            true => seg_loss(out.logits.unwrap(), &batch.labels, &w).unwrap(),
            false => rec_loss(out.restored, tape.constant(clear.clone()), &w).unwrap(),
        };
        let v = loss.value().data()[0];
        let grads = track.then(|| f.param_grads(&mut tape.backward(loss).unwrap()));
        (v, grads)
    };
    for group in Group::ALL {
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect();
        let id = ids[rng.gen_range(0..ids.len())];
        let tape = Tape::new();
        let (_, grads) = loss_of(&store, &tape, true, group);
        let analytic_full = grads.unwrap()[id.index()].clone().unwrap();
        let n = store.get(id).value.len();
        let idx: Vec<usize> = (0..4.min(n)).map(|_| rng.gen_range(0..n)).collect();
        let analytic: Vec<f64> = idx.iter().map(|&i| analytic_full.data()[i]).collect();
        let orig = store.get(id).value.data().to_vec();
        let mut work = store.clone();
        let numeric = central_difference(&orig, &idx, FD_STEP, |x| {
            work.get_mut(id).value.data_mut().copy_from_slice(x);
            loss_of(&work, &Tape::new(), false, group).0
        });
        let err = relative_error(&analytic, &numeric, 1e-12);
        worst = worst.max(err);
        lines.push(format!("{group} ({}): {err:.2e}", store.get(id).name));
    }
    let pass = worst < FD_TOL;
    report(3, pass, &format!("worst relative error {worst:.2e} (tol {FD_TOL:e}, step {FD_STEP:e}, f64); {:.1}s", start.elapsed().as_secs_f64()));
    lines.iter().for_each(|l| note(l));
    assert!(pass);
}

#[test]
fn criterion_04_peft_freeze() {
    let start = Instant::now();
    let network = NetworkConfig { stage_channels: vec![8, 16, 32, 64], seg_unified_channels: 8, ..Default::default() };
    let base = RunConfig { network, batch_size: 2, crop: 0, val_every: PEFT_STEPS, optim: OptimConfig { lr: 1e-3, ..Default::default() }, ..Default::default() };
    let data = DatasetConfig { size: 16, train: 8, ..Default::default() }.generate_split(Split::Train).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let mut p1 = Session::new(&RunConfig { phase: 1, steps: 20, ..base.clone() }, None).unwrap();
    p1.run(&data, &[], Some(dir.path())).unwrap();
    let init = checkpoint::load(&dir.path().join("last.ckpt")).unwrap().params;

    let checks = |policy: FreezePolicy| {
        let mut s = Session::new(&RunConfig { phase: 2, freeze_policy: policy, steps: PEFT_STEPS, ..base.clone() }, Some(&init)).unwrap();
        let before: Vec<u64> = Group::ALL.iter().map(|&g| s.store.group_checksum(g)).collect();
        s.run(&data, &[], None).unwrap();
        Group::ALL.iter().zip(before).map(|(&g, b)| (g, b != s.store.group_checksum(g))).collect::<Vec<_>>()
    };
    let peft = checks(FreezePolicy::Peft);
    let fpft = checks(FreezePolicy::Fpft);
    let frozen = [Group::OpticalEncoder, Group::SarEncoder, Group::SharedDecoder];
    let peft_ok = peft.iter().all(|&(g, changed)| changed != frozen.contains(&g));
    let fpft_ok = fpft.iter().all(|&(_, changed)| changed);
    let fmt = |v: &[(Group, bool)]| v.iter().map(|(g, c)| format!("{g}:{}", if *c { "changed" } else { "same" })).collect::<Vec<_>>().join(" ");
    report(4, peft_ok && fpft_ok, &format!("{PEFT_STEPS} steps each; {:.1}s", start.elapsed().as_secs_f64()));
    note(&format!("peft: {}", fmt(&peft)));
    note(&format!("fpft: {}", fmt(&fpft)));
    assert!(peft_ok && fpft_ok);
}

#[test]
fn criterion_05_overfit() {
    let start = Instant::now();
    let data = DatasetConfig { size: OVERFIT_SIZE, train: OVERFIT_SCENES, ..Default::default() }.generate_split(Split::Train).unwrap();
    let (id_psnr, id_ssim) = identity_baseline(&data).unwrap();
    let cfg = RunConfig { steps: OVERFIT_STEPS, batch_size: OVERFIT_BATCH, crop: 0, flip: false, val_every: OVERFIT_STEPS, eval_batch: OVERFIT_SCENES, ..Default::default() };
    let mut s = Session::new(&cfg, None).unwrap();
    s.run(&data, &[], None).unwrap();
    let r = s.evaluator().evaluate(&data, EvalMode::CrOnly).unwrap();
    let (p, q) = (r.psnr.unwrap(), r.ssim.unwrap());
    let pass = p >= id_psnr + OVERFIT_GAIN_DB && q >= OVERFIT_SSIM;
    report(
        5,
        pass,
        &format!(
            "train PSNR {p:.2} dB vs identity {id_psnr:.2} dB (need +{OVERFIT_GAIN_DB}); SSIM {q:.4} (identity {id_ssim:.4}, need {OVERFIT_SSIM}); {OVERFIT_SCENES} scenes {OVERFIT_SIZE}x{OVERFIT_SIZE}, {OVERFIT_STEPS} steps, batch {OVERFIT_BATCH}; {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

fn study() -> &'static StudyReport {
    static REPORT: OnceLock<StudyReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let ds = DatasetConfig { size: STUDY_SIZE, ..Default::default() };
        let (train, val, test) = (ds.generate_split(Split::Train).unwrap(), ds.generate_split(Split::Val).unwrap(), ds.generate_split(Split::Test).unwrap());
        let cfg = StudyConfig {
            network: NetworkConfig { stage_channels: (0..4).map(|i| STUDY_BASE_WIDTH << i).collect(), ..Default::default() },
            phase1_steps: STUDY_PHASE1_STEPS,
            phase2_steps: STUDY_PHASE2_STEPS,
            probe_steps: STUDY_PROBE_STEPS,
            crop: 0,
            eval_batch: 16,
            ..Default::default()
        };
        let r = run_study(&cfg, &train, &val, &test, None, &mut |_| {}).unwrap();
        let mut out = std::io::stdout().lock();
        writeln!(out, "desk-scale study ({} train scenes {STUDY_SIZE}x{STUDY_SIZE}, {:.0}s):\n{}", train.len(), r.seconds, r.to_text()).unwrap();
        r
    })
}

#[test]
fn criterion_06_paradigm_ordering() {
    let r = study();
    let p = r.paradigms.as_ref().expect("paradigm runs succeed");
    let miou = |e: &EvalReport| 100.0 * e.seg.as_ref().unwrap().miou;
    let (d, m, t) = (miou(&p.direct), miou(&p.multi_stage), miou(&p.multi_task));
    let ordered = d < m && m < t;
    let flags: Vec<String> = [("multi-stage - direct", m - d), ("multi-task - multi-stage", t - m)]
        .iter()
        .filter(|(_, gap)| *gap <= PARADIGM_GAP)
        .map(|(n, gap)| format!("{n} gap {gap:.2} <= {PARADIGM_GAP}"))
        .collect();
    report(6, ordered, &format!("mIoU direct {d:.2} < multi-stage {m:.2} < multi-task {t:.2}; probe on clear {:.2}", miou(&p.probe_on_clear)));
    if !flags.is_empty() {
        note(&format!("flagged: {}", flags.join("; ")));
    }
    assert!(ordered);
}

#[test]
fn criterion_07_ablation_direction() {
    let r = study();
    let row = |name: &str| r.rows.iter().find(|x| x.name == name).unwrap_or_else(|| panic!("row {name}"));
    let val_psnr = |name: &str| row(name).val().and_then(|v| v.psnr).unwrap_or_else(|| panic!("{name} failed: {:?}", row(name).result.as_ref().err()));
    let val_miou = |name: &str| 100.0 * row(name).val().and_then(|v| v.seg.as_ref()).map(|s| s.miou).unwrap();
    let (both, global, local) = (val_psnr("pretrain_peft"), val_psnr("global_only"), val_psnr("local_only"));
    let (peft, joint) = (val_miou("pretrain_peft"), val_miou("joint_training"));
    let branch_ok = both >= global && both >= local;
    let strategy_ok = peft >= joint;
    report(7, branch_ok && strategy_ok, &format!("val PSNR both {both:.3} vs global {global:.3}, local {local:.3}; val mIoU peft {peft:.2} vs joint {joint:.2} (equal budget)"));
    note(&format!("fpft val mIoU {:.2}, PSNR {:.3}", val_miou("pretrain_fpft"), val_psnr("pretrain_fpft")));
    let p1: Vec<String> = r.phase1.iter().map(|(k, p)| format!("{k} {}", p.as_ref().map_or("failed".into(), |p| format!("{p:.3}")))).collect();
    note(&format!("phase-1 val PSNR (before segmentation fine-tuning): {}", p1.join(", ")));
    assert!(branch_ok && strategy_ok);
}

#[test]
fn criterion_08_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut worst_ssim = 0.0f64;
    let mut seg_exact = true;
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let c = rng.gen_range(1..=3);
        let x: Array<f64> = Array::from_fn(&[1, c, h, w], |_| rng.gen_range(0.0..1.0));
        let y = Array::from_fn(&[1, c, h, w], |i| (x.data()[i] + rng.gen_range(-0.2f64..0.2)).clamp(0.0, 1.0));
        worst_ssim = worst_ssim.max((ssim_metric(&x, &y).unwrap() - ssim_oracle(&x, &y)).abs());

        let k = rng.gen_range(2..=6);
        let label = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.05) { IGNORE_LABEL } else { rng.gen_range(0..k as u8) };
        let truth: Vec<u8> = (0..h * w).map(|_| label(&mut rng)).collect();
        let pred: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..k as u8)).collect();
        let m = seg_metrics(&pred, &truth, k).unwrap();
        let (pa, miou) = seg_oracle(&pred, &truth, k);
        seg_exact &= m.pixel_accuracy == pa && m.miou == miou;
        let perfect = seg_metrics(&truth.iter().map(|&t| if t == IGNORE_LABEL { 0 } else { t }).collect::<Vec<_>>(), &truth, k).unwrap();
        seg_exact &= truth.iter().all(|&t| t == IGNORE_LABEL) || (perfect.pixel_accuracy == 1.0 && perfect.miou == 1.0);
    }
    let a = Array::<f64>::full(&[1, 1, 4, 4], 0.5);
    let b = Array::<f64>::full(&[1, 1, 4, 4], 0.6);
    let db = psnr(&a, &b).unwrap();
    let psnr_ok = (db - 20.0).abs() < 1e-9;
    let pass = seg_exact && worst_ssim <= SSIM_ORACLE_TOL && psnr_ok;
    report(8, pass, &format!("PA/mIoU exact: {seg_exact}; max SSIM deviation {worst_ssim:.2e} (tol {SSIM_ORACLE_TOL:e}); PSNR at MSE 0.01 = {db:.12} dB"));
    assert!(pass);
}

#[test]
fn criterion_09_parameter_count() {
    let full = NetworkConfig::default();
    let (_, store) = TdpCr::build::<f32>(&full, 0).unwrap();
    let total = count_parameters(&store, None).unwrap();
    let (_, cr_store) = TdpCr::build::<f32>(&NetworkConfig { seg_head: false, ..full }, 0).unwrap();
    let cr = count_parameters(&cr_store, None).unwrap();
    let trainable_peft = store.count(Some(&[Group::PromptGenerator, Group::PgfBlocks, Group::SegHead]));
    let (lo, hi) = (PARAM_TARGET * (1.0 - PARAM_BAND), PARAM_TARGET * (1.0 + PARAM_BAND));
    let pass = (lo..=hi).contains(&(total as f64));
    report(9, pass, &format!("{total} parameters (band [{lo:.0}, {hi:.0}]); restoration-only {cr}, segmentation head adds {}", total - cr));
    let by_group: Vec<String> = Group::ALL.iter().map(|&g| format!("{g} {}", store.count(Some(&[g])))).collect();
    note(&by_group.join(", "));
    note(&format!("trainable under peft: {trainable_peft} ({:.2}% of total)", 100.0 * trainable_peft as f64 / total as f64));
    assert!(pass);
}

#[test]
fn criterion_10_data_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let dir = tempfile::tempdir().unwrap();
    let (mut exact, mut identity) = (true, true);
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    for i in 0..ROUND_TRIP_SCENES {
        let spec = SceneSpec::new(rng.gen(), 8 * rng.gen_range(2..6), rng.gen_range(0.0..=1.0));
        let s = generate_scene(&spec).unwrap();
        let path = dir.path().join(format!("{i}"));
        write_sample(&s, &path).unwrap();
        let r = read_sample(&path).unwrap();
        exact &= bits(&r.opt_cloudy) == bits(&s.opt_cloudy)
            && bits(&r.opt_clear) == bits(&s.opt_clear)
            && bits(&r.sar) == bits(&s.sar)
            && bits(&r.cloud_alpha) == bits(&s.cloud_alpha)
            && r.labels == s.labels
            && (r.seed, r.cloud_coverage.to_bits(), r.height, r.width, r.num_classes) == (s.seed, s.cloud_coverage.to_bits(), s.height, s.width, s.num_classes);
        let n = s.pixels();
        for p in (0..n).filter(|&p| s.cloud_alpha[p] == 0.0) {
            for b in 0..OPTICAL_BANDS {
                identity &= s.opt_cloudy[b * n + p].to_bits() == s.opt_clear[b * n + p].to_bits();
            }
        }
    }
    report(10, exact && identity, &format!("{ROUND_TRIP_SCENES} scenes: bit-exact round trip {exact}; cloudy == clear where alpha == 0: {identity}"));
    assert!(exact && identity);
}
