//! End-to-end commands: fine-tuning, few-shot, distillation, router export.
//!
//! Every random stream is derived from the run seed, so a config file and
//! the code version pin down every output byte.

pub mod config;

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::diffusion::{ancestral_sample_observed, NoiseSchedule, ToyDataset};
use crate::distill::{run_distillation, Scenario, CONVERGED_LOSS, TeacherStudentPair, Translator};
use crate::error::{Error, Result};
use crate::host::{attach_adapters, AttachedModel, ModelSpec, ToyDenoiser, TrainScope};
use crate::params::{param_hash, Parameterized};
use crate::persist::{
    checkpoint_id, Checkpoint, CheckpointMeta, ConfigHash, DirLock, MetricsWriter, RouterRecord, DISTILL_HEADER,
    TRAIN_HEADER,
};
use crate::tensor::{derive_seed, Tensor};
use crate::train::{train_task, EvalBatch, TrainSpec};

pub use config::{DistillSpec, FinetuneSpec, Mode, PretrainSpec, RunConfig, TeacherSpec};

pub const BASE_PREFIX: &str = "base/";
pub const ADAPTER_PREFIX: &str = "adapter/";

const STREAM_PRETRAIN: u64 = 1;
const STREAM_ADAPTER_INIT: u64 = 2;
const STREAM_FINETUNE: u64 = 3;
const STREAM_TEACHER: u64 = 4;
const STREAM_STUDENT_PRETRAIN: u64 = 5;
const STREAM_DISTILL: u64 = 6;
const STREAM_EVAL: u64 = 7;

/// Copies `source` into `target` by name. Both sides must name exactly the
/// same tensors with the same shapes.
pub fn load_params(target: Vec<(String, &mut Tensor)>, source: &[(String, &Tensor)]) -> Result<()> {
    if target.len() != source.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, checkpoint group has {}",
            target.len(),
            source.len()
        )));
    }
    for (name, t) in target {
        let src = source
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, s)| *s)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
        if src.shape() != t.shape() {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?} in the checkpoint, {:?} in the model",
                src.shape(),
                t.shape()
            )));
        }
        t.assign(src.data())?;
    }
    Ok(())
}

fn prefixed(prefix: &str, params: Vec<(String, &Tensor)>) -> Vec<(String, Tensor)> {
    params.into_iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())).collect()
}

struct RunContext {
    text: String,
    hash: ConfigHash,
    seed: u64,
}

impl RunContext {
    fn checkpoint(&self, step: u64, kind: &str, loss: Option<f64>, tensors: Vec<(String, Tensor)>) -> Checkpoint {
        Checkpoint {
            step,
            config_hash: self.hash,
            meta: CheckpointMeta {
                kind: kind.into(),
                seed: self.seed,
                loss,
                config: self.text.clone(),
            },
            tensors,
        }
    }

    fn base_checkpoint(&self, model: &ToyDenoiser, kind: &str) -> Checkpoint {
        self.checkpoint(0, kind, None, prefixed(BASE_PREFIX, model.named_params()))
    }

    fn attached_checkpoint(&self, step: u64, model: &AttachedModel, loss: f64) -> Checkpoint {
        let mut tensors = prefixed(BASE_PREFIX, model.base().named_params());
        tensors.extend(prefixed(ADAPTER_PREFIX, model.named_params()));
        self.checkpoint(step, "adapters", Some(loss), tensors)
    }
}

fn prepare(cfg: &RunConfig, out_dir: &Path) -> Result<(DirLock, RunContext)> {
    let lock = DirLock::acquire(out_dir)?;
    let text = cfg.canonical_toml()?;
    let path = out_dir.join("config.toml");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    let ckpts = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpts).map_err(|e| Error::io(&ckpts, e))?;
    Ok((
        lock,
        RunContext {
            hash: crate::persist::config_hash(&text),
            text,
            seed: cfg.seed,
        },
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Trains the trunk (everything but the condition table) on broad data.
pub fn pretrain_base(spec: &ModelSpec, schedule: &NoiseSchedule, data: &ToyDataset, train: &TrainSpec, seed: u64) -> Result<ToyDenoiser> {
    let mut base = ToyDenoiser::build(spec)?;
    base.set_train_scope(TrainScope::Trunk);
    train_task(&mut base, schedule, data, train, seed, |_| Ok(()), |_, _| Ok(()))?;
    base.set_train_scope(TrainScope::Frozen);
    Ok(base)
}

/// Rebuilds a base model from the `base/` group of a checkpoint.
pub fn restore_base(ckpt: &Checkpoint, spec: &ModelSpec) -> Result<ToyDenoiser> {
    let mut base = ToyDenoiser::build(spec)?;
    load_params(base.named_params_mut(), &ckpt.group(BASE_PREFIX))?;
    Ok(base)
}

/// Rebuilds the adapted model a training or distillation checkpoint holds.
pub fn restore_attached(ckpt: &Checkpoint) -> Result<AttachedModel> {
    let cfg = RunConfig::from_toml(&ckpt.meta.config)?;
    let base = restore_base(ckpt, &cfg.model)?;
    let mut model = attach_adapters(base, &cfg.adapter, 0)?;
    load_params(model.named_params_mut(), &ckpt.group(ADAPTER_PREFIX))?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointEval {
    pub id: String,
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub mode: Mode,
    pub config_hash: String,
    pub steps: u64,
    pub trainable_params: usize,
    /// Held-out task loss per checkpoint.
    pub checkpoints: Vec<CheckpointEval>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_checkpoint: String,
    pub best_loss: f64,
    pub base_hash_before: String,
    pub base_hash_after: String,
}

fn best_of(evals: &[CheckpointEval]) -> &CheckpointEval {
    let mut best = &evals[0];
    for e in evals {
        if e.loss < best.loss {
            best = e;
        }
    }
    best
}

fn is_checkpoint_step(step: u64, interval: u64, last: u64) -> bool {
    step.is_multiple_of(interval) || step == last
}

/// Adapter fine-tuning (`finetune`) or few-shot adaptation (`fewshot`).
///
/// Writes `config.toml`, `base.sinj`, `metrics.csv`, `checkpoints/` and
/// `report.json` under `out_dir`.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.mode == Mode::Distill {
        return Err(Error::Config("`train` runs finetune or fewshot configs; use `distill`".into()));
    }
    let (_lock, ctx) = prepare(cfg, out_dir)?;
    let schedule = NoiseSchedule::from_spec(&cfg.schedule)?;

    let generic = ToyDataset::generate(&cfg.pretrain.data)?;
    let base = pretrain_base(&cfg.model, &schedule, &generic, &cfg.pretrain.train, derive_seed(cfg.seed, STREAM_PRETRAIN))?;
    ctx.base_checkpoint(&base, "base").save(&out_dir.join("base.sinj"))?;

    let style = ToyDataset::generate(&cfg.finetune.data)?;
    let train_data = match cfg.mode {
        Mode::Fewshot => style.few_shot(cfg.finetune.shots_per_class)?,
        _ => style.clone(),
    };
    let spec = &cfg.finetune.train;
    let eval = EvalBatch::draw(&style, spec.eval_size, derive_seed(cfg.seed, STREAM_EVAL))?;

    let mut model = attach_adapters(base, &cfg.adapter, derive_seed(cfg.seed, STREAM_ADAPTER_INIT))?;
    let base_hash_before = param_hash(&model.base().named_params());
    let mut metrics = MetricsWriter::create(&out_dir.join("metrics.csv"), TRAIN_HEADER)?;
    let mut evals = Vec::new();
    train_task(
        &mut model,
        &schedule,
        &train_data,
        spec,
        derive_seed(cfg.seed, STREAM_FINETUNE),
        |rec| {
            let id = if is_checkpoint_step(rec.step, spec.checkpoint_interval, spec.steps) {
                checkpoint_id(rec.step)
            } else {
                String::new()
            };
            metrics.row(&[rec.step.to_string(), rec.loss.to_string(), rec.lr.to_string(), id])
        },
        |step, m| {
            let loss = eval.task_loss(m, &schedule)?;
            let id = checkpoint_id(step);
            ctx.attached_checkpoint(step, m, loss)
                .save(&out_dir.join("checkpoints").join(format!("{id}.sinj")))?;
            log::info!("{id}: held-out task loss {loss:.6}");
            evals.push(CheckpointEval { id, step, loss });
            Ok(())
        },
    )?;

    let best = best_of(&evals).clone();
    let report = TrainReport {
        mode: cfg.mode,
        config_hash: hex::encode(ctx.hash),
        steps: spec.steps,
        trainable_params: model.param_count(),
        initial_loss: evals[0].loss,
        final_loss: evals.last().expect("initial checkpoint").loss,
        best_checkpoint: best.id,
        best_loss: best.loss,
        checkpoints: evals,
        base_hash_before,
        base_hash_after: param_hash(&model.base().named_params()),
    };
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistillRunReport {
    pub scenario: Scenario,
    pub config_hash: String,
    pub steps: u64,
    pub trainable_params: usize,
    /// Held-out output loss per checkpoint.
    pub checkpoints: Vec<CheckpointEval>,
    pub initial_loss: f64,
    pub best_checkpoint: String,
    pub best_loss: f64,
    /// `best_loss / initial_loss`, or 0 when the student starts converged.
    pub best_ratio: f64,
    pub converged_at_init: bool,
    pub teacher_hash_before: String,
    pub teacher_hash_after: String,
    pub student_base_hash_before: String,
    pub student_base_hash_after: String,
}

/// Teacher to student distillation.
///
/// The teacher comes from `teacher.checkpoint` when set, otherwise it is the
/// pretrained base fully fine-tuned on the style data. Writes `base.sinj`,
/// `teacher.sinj` (when trained here), `student_base.sinj` (unshared only),
/// `metrics.csv`, `checkpoints/` and `report.json`.
pub fn cmd_distill(cfg: &RunConfig, out_dir: &Path) -> Result<DistillRunReport> {
    cfg.validate()?;
    if cfg.mode != Mode::Distill {
        return Err(Error::Config(format!("`distill` needs mode = \"distill\", config has `{}`", cfg.mode)));
    }
    if let Some(p) = &cfg.teacher.checkpoint {
        if !p.is_file() {
            return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "teacher checkpoint not found")));
        }
    }
    let (_lock, ctx) = prepare(cfg, out_dir)?;
    let schedule = NoiseSchedule::from_spec(&cfg.schedule)?;
    let generic = ToyDataset::generate(&cfg.pretrain.data)?;
    let base = pretrain_base(&cfg.model, &schedule, &generic, &cfg.pretrain.train, derive_seed(cfg.seed, STREAM_PRETRAIN))?;
    ctx.base_checkpoint(&base, "base").save(&out_dir.join("base.sinj"))?;

    let teacher = match &cfg.teacher.checkpoint {
        Some(p) => restore_base(&Checkpoint::load(p, None, false)?, &cfg.model)?,
        None => {
            let style = ToyDataset::generate(&cfg.finetune.data)?;
            let mut t = base.clone();
            t.set_train_scope(TrainScope::Trunk);
            train_task(&mut t, &schedule, &style, &cfg.teacher.train, derive_seed(cfg.seed, STREAM_TEACHER), |_| Ok(()), |_, _| Ok(()))?;
            t.set_train_scope(TrainScope::Frozen);
            ctx.base_checkpoint(&t, "teacher").save(&out_dir.join("teacher.sinj"))?;
            t
        }
    };

    let loss_cfg = &cfg.distill.loss;
    let (student_base, translator) = match loss_cfg.scenario {
        Scenario::Shared => (base, Translator::Identity),
        Scenario::Unshared => {
            let tr = Translator::seeded(cfg.model.cond_vocab, cfg.distill.translator_seed);
            let spec = ModelSpec {
                embedder_seed: cfg.distill.student_embedder_seed,
                ..cfg.model.clone()
            };
            let relabeled = generic.relabel(|c| Ok(tr.apply(&[c])?[0]))?;
            let sb = pretrain_base(&spec, &schedule, &relabeled, &cfg.pretrain.train, derive_seed(cfg.seed, STREAM_STUDENT_PRETRAIN))?;
            ctx.base_checkpoint(&sb, "student_base").save(&out_dir.join("student_base.sinj"))?;
            (sb, tr)
        }
    };
    let student = attach_adapters(student_base, &cfg.adapter, derive_seed(cfg.seed, STREAM_ADAPTER_INIT))?;
    let trainable_params = student.param_count();
    let mut pair = TeacherStudentPair::new(teacher, student, translator, loss_cfg.scenario)?;
    let (teacher_hash_before, student_base_hash_before) = pair.frozen_hashes();

    let data = ToyDataset::generate(&cfg.distill.data)?;
    let mut metrics = MetricsWriter::create(&out_dir.join("metrics.csv"), DISTILL_HEADER)?;
    let mut evals = Vec::new();
    run_distillation(
        &mut pair,
        loss_cfg,
        &schedule,
        &data,
        derive_seed(cfg.seed, STREAM_DISTILL),
        |row| {
            let id = if is_checkpoint_step(row.step, loss_cfg.checkpoint_interval, loss_cfg.steps) {
                checkpoint_id(row.step)
            } else {
                String::new()
            };
            metrics.row(&[
                row.step.to_string(),
                row.total.to_string(),
                row.outkd.to_string(),
                row.featkd.to_string(),
                row.lr.to_string(),
                id,
            ])
        },
        |step, m, loss| {
            let id = checkpoint_id(step);
            ctx.attached_checkpoint(step, m, loss)
                .save(&out_dir.join("checkpoints").join(format!("{id}.sinj")))?;
            log::info!("{id}: held-out output loss {loss:.6}");
            evals.push(CheckpointEval { id, step, loss });
            Ok(())
        },
    )?;

    let (teacher_hash_after, student_base_hash_after) = pair.frozen_hashes();
    let best = best_of(&evals).clone();
    let initial = evals[0].loss;
    let converged_at_init = initial <= CONVERGED_LOSS;
    let report = DistillRunReport {
        scenario: loss_cfg.scenario,
        config_hash: hex::encode(ctx.hash),
        steps: loss_cfg.steps,
        trainable_params,
        initial_loss: initial,
        best_checkpoint: best.id,
        best_loss: best.loss,
        best_ratio: if converged_at_init { 0.0 } else { best.loss / initial },
        converged_at_init,
        checkpoints: evals,
        teacher_hash_before,
        teacher_hash_after,
        student_base_hash_before,
        student_base_hash_after,
    };
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

/// Router outputs for every (sampler step, routed layer, instance).
pub fn export_router(model: &AttachedModel, schedule: &NoiseSchedule, conditions: &[usize], steps: usize, seed: u64) -> Result<Vec<RouterRecord>> {
    if model.routed_layers().is_empty() {
        return Err(Error::Unsupported(
            "checkpoint holds no routed adapters (LoRA only), there are no router outputs to export".into(),
        ));
    }
    let mut records = Vec::new();
    ancestral_sample_observed(model, schedule, conditions, seed, steps, &mut |st| {
        for (layer, s) in &st.prediction.routes {
            let n = st.tape.shape(*s)[1];
            for (instance, row) in st.tape.value(*s).chunks(n).enumerate() {
                let rec = RouterRecord {
                    step: st.index,
                    layer: layer.clone(),
                    t: st.t,
                    instance,
                    s: row.to_vec(),
                };
                rec.validate()?;
                records.push(rec);
            }
        }
        Ok(())
    })?;
    Ok(records)
}

/// Output directory from the command line, else from the config.
pub fn resolve_out_dir(cli: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    cli.or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir in the config".into()))
}
