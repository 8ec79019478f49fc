use serde::Serialize;

use crate::diffusion::{noised_batch, NoiseSchedule, NoisedBatch, ToyDataset};
use crate::distill::config::DistillConfig;
use crate::distill::pair::TeacherStudentPair;
use crate::error::{Error, Result};
use crate::host::AttachedModel;
use crate::params::{accumulate_grads, Parameterized};
use crate::tensor::{derive_seed, optimizer_step, OptimizerState, SeededRng, Tape, Tensor};
use crate::train::trainable_mut;

/// One logged optimizer step; losses are means over micro-batches.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistillRow {
    pub step: u64,
    pub total: f64,
    pub outkd: f64,
    pub featkd: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointScore {
    pub step: u64,
    pub heldout_outkd: f64,
}

#[derive(Debug, Clone)]
pub struct DistillReport {
    pub checkpoints: Vec<CheckpointScore>,
    /// Index into `checkpoints` of the lowest held-out loss (earliest on ties).
    pub best: usize,
    /// Adapter tensors at the best checkpoint.
    pub best_params: Vec<(String, Tensor)>,
}

impl DistillReport {
    pub fn initial(&self) -> f64 {
        self.checkpoints[0].heldout_outkd
    }

    pub fn best_score(&self) -> &CheckpointScore {
        &self.checkpoints[self.best]
    }
}

/// Held-out output loss at or below which the student already matches the
/// teacher. Adam moves parameters by roughly `lr` per step whatever the
/// gradient scale, so training from an exact match would only add noise.
pub const CONVERGED_LOSS: f64 = 1e-12;

/// Fixed validation batch for checkpoint selection.
pub fn validation_batch(schedule: &NoiseSchedule, data: &ToyDataset, size: usize, seed: u64) -> Result<NoisedBatch> {
    let mut rng = SeededRng::new(seed);
    let (x0, cond) = data.sample_batch(&mut rng, size)?;
    noised_batch(schedule, &x0, cond, &mut rng)
}

/// Trains the student's adapters on the weighted distillation objective.
///
/// The held-out output loss is scored at step 0, every
/// `checkpoint_interval` steps and at the end. A student that starts within
/// [`CONVERGED_LOSS`] of the teacher is returned untouched after the step-0
/// score. `on_checkpoint` receives the
/// step, the student and that score.
pub fn run_distillation<R, C>(
    pair: &mut TeacherStudentPair,
    config: &DistillConfig,
    schedule: &NoiseSchedule,
    data: &ToyDataset,
    seed: u64,
    mut on_row: R,
    mut on_checkpoint: C,
) -> Result<DistillReport>
where
    R: FnMut(&DistillRow) -> Result<()>,
    C: FnMut(u64, &AttachedModel, f64) -> Result<()>,
{
    config.validate()?;
    let val = validation_batch(schedule, data, config.eval_size, derive_seed(seed, 0xe7a1))?;
    let mut rng = SeededRng::new(derive_seed(seed, 1));
    let mut opt = OptimizerState::adam(config.lr);
    let snapshot = |m: &AttachedModel| -> Vec<(String, Tensor)> {
        m.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect()
    };

    let mut checkpoints = Vec::new();
    let mut best = 0;
    let mut best_params = snapshot(pair.student());
    let mut score = |step: u64, pair: &TeacherStudentPair, checkpoints: &mut Vec<CheckpointScore>| -> Result<()> {
        let h = pair.heldout_outkd(&val)?;
        if !h.is_finite() {
            return Err(Error::Numeric(format!("held-out output loss is {h} at step {step}")));
        }
        on_checkpoint(step, pair.student(), h)?;
        checkpoints.push(CheckpointScore { step, heldout_outkd: h });
        if h < checkpoints[best].heldout_outkd {
            best = checkpoints.len() - 1;
            best_params = snapshot(pair.student());
        }
        Ok(())
    };
    score(0, pair, &mut checkpoints)?;
    if checkpoints[0].heldout_outkd <= CONVERGED_LOSS {
        log::info!(
            "student matches the teacher before training (held-out output loss {:e}); skipping {} steps",
            checkpoints[0].heldout_outkd,
            config.steps
        );
        return Ok(DistillReport {
            checkpoints,
            best,
            best_params,
        });
    }

    let accum = config.grad_accum as f64;
    for step in 1..=config.steps {
        let (mut total, mut outkd, mut featkd) = (0.0, 0.0, 0.0);
        for _ in 0..config.grad_accum {
            let (x0, cond) = data.sample_batch(&mut rng, config.batch_size)?;
            let batch = noised_batch(schedule, &x0, cond, &mut rng)?;
            let mut tape = Tape::new();
            let terms = pair.losses(&mut tape, config, &batch.input)?;
            let t = tape.item(terms.total);
            if !t.is_finite() {
                return Err(Error::Numeric(format!("distillation loss is {t} at step {step}")));
            }
            total += t;
            outkd += tape.item(terms.outkd);
            featkd += terms.featkd.map_or(0.0, |f| tape.item(f));
            let scaled = tape.scale(terms.total, 1.0 / accum);
            tape.backward(scaled)?;
            accumulate_grads(trainable_mut(pair.student_mut()), &tape.param_grads())?;
        }
        optimizer_step(&mut trainable_mut(pair.student_mut()), &mut opt)?;
        on_row(&DistillRow {
            step,
            total: total / accum,
            outkd: outkd / accum,
            featkd: featkd / accum,
            lr: config.lr,
        })?;
        if step % config.checkpoint_interval == 0 || step == config.steps {
            score(step, pair, &mut checkpoints)?;
        }
    }
    Ok(DistillReport {
        checkpoints,
        best,
        best_params,
    })
}
