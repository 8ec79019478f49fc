use std::path::Path;

use styleinject::adapters::{AdapterConfig, Method};
use styleinject::diffusion::NoiseSchedule;
use styleinject::persist::Checkpoint;
use styleinject::run::{cmd_distill, cmd_train, export_router, restore_attached, Mode, RunConfig};
use styleinject::distill::Scenario;
use styleinject::{Error, Parameterized};

fn quick(mode: Mode) -> RunConfig {
    let mut c = RunConfig::new(mode);
    c.pretrain.train.steps = 100;
    c.finetune.train.steps = 20;
    c.finetune.train.batch_size = 8;
    c.finetune.train.checkpoint_interval = 10;
    c.finetune.train.eval_size = 64;
    c.teacher.train.steps = 20;
    c.distill.loss.steps = 10;
    c.distill.loss.batch_size = 8;
    c.distill.loss.checkpoint_interval = 5;
    c.distill.loss.eval_size = 64;
    c
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in [dir.to_path_buf(), dir.join("checkpoints")] {
        for e in std::fs::read_dir(&sub).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn zero_budget_writes_only_the_initial_checkpoint() {
    let mut cfg = quick(Mode::Finetune);
    cfg.finetune.train.steps = 0;
    let dir = tempfile::tempdir().unwrap();
    let report = cmd_train(&cfg, dir.path()).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap(), "step,loss,lr,checkpoint_id\n");
    let ckpts: Vec<_> = std::fs::read_dir(dir.path().join("checkpoints")).unwrap().collect();
    assert_eq!(ckpts.len(), 1);
    assert_eq!(report.checkpoints.len(), 1);
    assert_eq!(report.best_checkpoint, "ckpt-000000");
    assert!(dir.path().join("config.toml").is_file());
    assert!(!dir.path().join(".styleinject.lock").exists());
}

#[test]
fn same_config_same_bytes() {
    let cfg = quick(Mode::Finetune);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_train(&cfg, a.path()).unwrap();
    cmd_train(&cfg, b.path()).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), 7, "{:?}", fa.iter().map(|f| &f.0).collect::<Vec<_>>());
    assert_eq!(fa, fb);

    let c = tempfile::tempdir().unwrap();
    cmd_train(&RunConfig { seed: 1, ..cfg }, c.path()).unwrap();
    assert_ne!(std::fs::read(a.path().join("metrics.csv")).unwrap(), std::fs::read(c.path().join("metrics.csv")).unwrap());
}

#[test]
fn metrics_mark_checkpoint_rows() {
    let cfg = quick(Mode::Fewshot);
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&cfg, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 20);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        let step: u64 = f[0].parse().unwrap();
        assert_eq!(f[3].is_empty(), !step.is_multiple_of(10), "{r}");
    }
}

#[test]
fn invalid_config_fails_before_touching_disk() {
    let mut cfg = quick(Mode::Finetune);
    cfg.adapter = AdapterConfig::lora(64);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    assert!(matches!(cmd_train(&cfg, &out), Err(Error::Config(_))));
    assert!(!out.exists());
    let mut d = quick(Mode::Distill);
    d.distill.loss.scenario = Scenario::Unshared;
    assert!(matches!(cmd_distill(&d, &out), Err(Error::Config(_))));
    assert!(!out.exists());
    assert!(matches!(cmd_distill(&quick(Mode::Finetune), &out), Err(Error::Config(_))));
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".styleinject.lock"), "").unwrap();
    assert!(matches!(cmd_train(&quick(Mode::Finetune), dir.path()), Err(Error::Contract(_))));
}

#[test]
fn checkpoints_restore_the_trained_model() {
    let cfg = quick(Mode::Finetune);
    let dir = tempfile::tempdir().unwrap();
    let report = cmd_train(&cfg, dir.path()).unwrap();
    let last = report.checkpoints.last().unwrap();
    let ckpt = Checkpoint::load(&dir.path().join("checkpoints").join(format!("{}.sinj", last.id)), Some(&cfg.hash().unwrap()), false).unwrap();
    assert_eq!(ckpt.step, 20);
    assert_eq!(ckpt.meta.loss, Some(last.loss));
    let model = restore_attached(&ckpt).unwrap();
    assert_eq!(model.param_count(), report.trainable_params);
    assert_eq!(report.base_hash_before, report.base_hash_after);

    let schedule = NoiseSchedule::from_spec(&cfg.schedule).unwrap();
    let trace = export_router(&model, &schedule, &[0, 5], 5, 3).unwrap();
    let layers = model.routed_layers().len();
    assert_eq!(layers, 2);
    assert_eq!(trace.len(), 2 * layers * 5);
    assert!(trace.iter().all(|r| r.validate().is_ok()));
}

#[test]
fn single_style_export_is_all_ones_and_lora_is_unsupported() {
    let mut cfg = quick(Mode::Finetune);
    cfg.adapter = AdapterConfig::styleinject(4, 1);
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&cfg, dir.path()).unwrap();
    let model = restore_attached(&Checkpoint::load(&dir.path().join("checkpoints/ckpt-000020.sinj"), None, false).unwrap()).unwrap();
    let schedule = NoiseSchedule::from_spec(&cfg.schedule).unwrap();
    let trace = export_router(&model, &schedule, &[1, 2, 3], 4, 0).unwrap();
    assert_eq!(trace.len(), 3 * 2 * 4);
    assert!(trace.iter().all(|r| r.s == vec![1.0]));

    cfg.adapter = AdapterConfig::lora(4);
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&cfg, dir.path()).unwrap();
    let model = restore_attached(&Checkpoint::load(&dir.path().join("checkpoints/ckpt-000000.sinj"), None, false).unwrap()).unwrap();
    let err = export_router(&model, &schedule, &[0], 4, 0).unwrap_err();
    assert!(matches!(err, Error::Unsupported(_)));

    cfg.adapter = AdapterConfig::styleinject(4, 4).with_method(Method::Dma);
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&cfg, dir.path()).unwrap();
}

#[test]
fn distill_runs_record_frozen_hashes() {
    for scenario in [Scenario::Shared, Scenario::Unshared] {
        let mut cfg = quick(Mode::Distill);
        if scenario == Scenario::Unshared {
            cfg.distill.loss.scenario = Scenario::Unshared;
            cfg.distill.loss.lambda_featkd = 0.0;
            cfg.distill.loss.feature_layers.clear();
        }
        let dir = tempfile::tempdir().unwrap();
        let r = cmd_distill(&cfg, dir.path()).unwrap();
        assert_eq!(r.teacher_hash_before, r.teacher_hash_after);
        assert_eq!(r.student_base_hash_before, r.student_base_hash_after);
        assert_eq!(r.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), vec![0, 5, 10]);
        assert!(dir.path().join("teacher.sinj").is_file());
        assert_eq!(dir.path().join("student_base.sinj").is_file(), scenario == Scenario::Unshared);
        let header = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(header.starts_with("step,total,outkd,featkd,lr,checkpoint_id\n"));
    }
}

#[test]
fn teacher_checkpoint_equal_to_base_converges_immediately() {
    let first = tempfile::tempdir().unwrap();
    let mut cfg = quick(Mode::Distill);
    cmd_distill(&cfg, first.path()).unwrap();
    cfg.teacher.checkpoint = Some(first.path().join("base.sinj"));
    let dir = tempfile::tempdir().unwrap();
    let r = cmd_distill(&cfg, dir.path()).unwrap();
    assert!(r.converged_at_init);
    assert_eq!(r.best_ratio, 0.0);
    assert_eq!(r.checkpoints.len(), 1);
    assert!(!dir.path().join("teacher.sinj").exists());

    cfg.teacher.checkpoint = Some(first.path().join("missing.sinj"));
    let err = cmd_distill(&cfg, tempfile::tempdir().unwrap().path()).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}
