use tdpcr_core::checkpoint;
use tdpcr_core::data::{DatasetConfig, SampleRecord, Split};
use tdpcr_core::network::NetworkConfig;
use tdpcr_core::params::Group;
use tdpcr_core::trainer::*;
use tdpcr_core::Error;

fn tiny_network() -> NetworkConfig {
    NetworkConfig { stage_channels: vec![8, 16], naf_depths: vec![1, 1], seg_unified_channels: 8, ..Default::default() }
}

fn tiny_run(phase: u8, policy: FreezePolicy, steps: usize) -> RunConfig {
    RunConfig { phase, freeze_policy: policy, network: tiny_network(), steps, batch_size: 2, crop: 8, val_every: 2, eval_batch: 2, optim: tdpcr_core::optim::OptimConfig { lr: 1e-3, ..Default::default() }, ..Default::default() }
}

fn scenes(n: usize) -> Vec<SampleRecord> {
    DatasetConfig { size: 16, train: n, val: 2, test: 2, ..Default::default() }.generate_split(Split::Train).unwrap()
}

fn checksums(s: &Session) -> Vec<u64> {
    Group::ALL.iter().map(|&g| s.store.group_checksum(g)).collect()
}

#[test]
fn freeze_manifest_per_phase() {
    let p1 = FreezeManifest::for_run(1, FreezePolicy::Peft);
    assert!(Group::ALL.iter().all(|&g| p1.trainable(g) == (g != Group::SegHead)));
    let peft = FreezeManifest::for_run(2, FreezePolicy::Peft);
    for g in [Group::OpticalEncoder, Group::SarEncoder, Group::SharedDecoder] {
        assert!(!peft.trainable(g));
    }
    for g in [Group::PromptGenerator, Group::PgfBlocks, Group::SegHead] {
        assert!(peft.trainable(g));
    }
    assert!(Group::ALL.iter().all(|&g| FreezeManifest::for_run(2, FreezePolicy::Fpft).trainable(g)));
}

#[test]
fn phase2_without_init_is_rejected() {
    assert!(matches!(Session::new(&tiny_run(2, FreezePolicy::Peft, 1), None), Err(Error::Argument(_))));
    assert!(Session::new(&tiny_run(2, FreezePolicy::None, 1), None).is_ok());
}

#[test]
fn peft_moves_only_unfrozen_groups() {
    let data = scenes(4);
    let mut p1 = Session::new(&tiny_run(1, FreezePolicy::Peft, 3), None).unwrap();
    p1.run(&data, &[], None).unwrap();
    let mut s = Session::new(&tiny_run(2, FreezePolicy::Peft, 3), Some(&p1.store)).unwrap();
    let before = checksums(&s);
    s.run(&data, &[], None).unwrap();
    let after = checksums(&s);
    for (i, g) in Group::ALL.iter().enumerate() {
        let frozen = matches!(g, Group::OpticalEncoder | Group::SarEncoder | Group::SharedDecoder);
        assert_eq!(before[i] == after[i], frozen, "{g}");
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = scenes(4);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(1, FreezePolicy::Peft, 4);

    let mut straight = Session::new(&cfg, None).unwrap();
    straight.run(&data, &[], None).unwrap();

    let mut first = Session::new(&RunConfig { steps: 4, ..cfg.clone() }, None).unwrap();
    for step in 0..2 {
        let b = first.training_batch(&data, step).unwrap();
        first.train_step(&b).unwrap();
    }
    let path = dir.path().join("mid.ckpt");
    first.save(&path, true).unwrap();
    let mut resumed = Session::resume(&cfg, &checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(resumed.step, 2);
    resumed.run(&data, &[], None).unwrap();
    assert_eq!(checksums(&resumed), checksums(&straight));
}

#[test]
fn runs_are_deterministic_and_write_outputs() {
    let data = scenes(4);
    let val = scenes(2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(1, FreezePolicy::Peft, 4);
    let mut a = Session::new(&cfg, None).unwrap();
    let sa = a.run(&data, &val, Some(dir.path())).unwrap();
    let mut b = Session::new(&cfg, None).unwrap();
    let sb = b.run(&data, &val, None).unwrap();
    assert_eq!(sa.steps.iter().map(|r| r.loss).collect::<Vec<_>>(), sb.steps.iter().map(|r| r.loss).collect::<Vec<_>>());
    assert_eq!(sa.validations.len(), 2);
    for f in ["log.jsonl", "best.ckpt", "last.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let lines = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 6);
    let best = checkpoint::load(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(best.meta.step, sa.best_step);
}

#[test]
fn probe_trains_and_evaluates() {
    let data = scenes(4);
    let cfg = RunConfig { model: ModelKind::SegProbe, ..tiny_run(1, FreezePolicy::None, 3) };
    let mut s = Session::new(&cfg, None).unwrap();
    let summary = s.run(&data, &data, None).unwrap();
    assert!(summary.steps.iter().all(|r| r.loss.is_finite()));
    let ev = s.evaluator();
    let direct = ev.evaluate(&data, EvalMode::DirectSeg).unwrap();
    assert!(direct.psnr.is_none() && direct.seg.is_some());
    assert!(matches!(ev.evaluate(&data, EvalMode::MultiStage), Err(Error::Argument(_))));
}

#[test]
fn eval_mode_names_round_trip() {
    for m in [EvalMode::DirectSeg, EvalMode::CrOnly, EvalMode::MultiStage, EvalMode::Full, EvalMode::ClearSeg] {
        assert_eq!(EvalMode::parse(m.name()).unwrap(), m);
    }
    assert!(EvalMode::parse("bogus").is_err());
}
