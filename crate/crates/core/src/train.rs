//! Noise-prediction training loop shared by pretraining, fine-tuning and
//! few-shot runs.

use serde::{Deserialize, Serialize};

use crate::diffusion::{task_loss, NoiseSchedule, ToyDataset};
use crate::error::{Error, Result};
use crate::host::NoisePredictor;
use crate::params::{accumulate_grads, Parameterized};
use crate::tensor::{derive_seed, optimizer_step, OptimizerState, SeededRng, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub checkpoint_interval: u64,
    /// Rows in the fixed held-out batch used for checkpoint selection.
    pub eval_size: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            steps: 600,
            lr: 5e-3,
            batch_size: 32,
            grad_accum: 2,
            checkpoint_interval: 100,
            eval_size: 512,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config("batch_size and grad_accum must be positive".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be positive".into()));
        }
        if self.eval_size == 0 {
            return Err(Error::Config("eval_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// A held-out batch with its timesteps and noise frozen, so the same loss is
/// measured at every checkpoint.
#[derive(Debug, Clone)]
pub struct EvalBatch {
    x0: Tensor,
    cond: Vec<usize>,
    seed: u64,
}

impl EvalBatch {
    pub fn draw(data: &ToyDataset, size: usize, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        let (x0, cond) = data.sample_batch(&mut rng, size)?;
        Ok(EvalBatch {
            x0,
            cond,
            seed: derive_seed(seed, 1),
        })
    }

    pub fn task_loss<M: NoisePredictor + ?Sized>(&self, model: &M, schedule: &NoiseSchedule) -> Result<f64> {
        let mut tape = Tape::new();
        let mut rng = SeededRng::new(self.seed);
        let l = task_loss(model, &mut tape, schedule, &self.x0, self.cond.clone(), &mut rng)?;
        Ok(tape.item(l))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Trainable parameters of `model`, the ones the optimizer touches.
pub fn trainable_mut<M: Parameterized + ?Sized>(model: &mut M) -> Vec<(String, &mut Tensor)> {
    model
        .named_params_mut()
        .into_iter()
        .filter(|(_, t)| t.requires_grad())
        .collect()
}

/// Runs `spec.steps` Adam steps of the noise-prediction loss on `data`.
///
/// `on_step` sees every step's mean micro-batch loss. `on_checkpoint` is
/// called with the step count at 0, at every `checkpoint_interval` and at the
/// end.
pub fn train_task<M, S, C>(
    model: &mut M,
    schedule: &NoiseSchedule,
    data: &ToyDataset,
    spec: &TrainSpec,
    seed: u64,
    mut on_step: S,
    mut on_checkpoint: C,
) -> Result<()>
where
    M: NoisePredictor + Parameterized,
    S: FnMut(&StepRecord) -> Result<()>,
    C: FnMut(u64, &M) -> Result<()>,
{
    spec.validate()?;
    let mut rng = SeededRng::new(seed);
    let mut opt = OptimizerState::adam(spec.lr);
    on_checkpoint(0, model)?;
    for step in 1..=spec.steps {
        let mut total = 0.0;
        for _ in 0..spec.grad_accum {
            let (x0, cond) = data.sample_batch(&mut rng, spec.batch_size)?;
            let mut tape = Tape::new();
            let loss = task_loss(&*model, &mut tape, schedule, &x0, cond, &mut rng)?;
            let l = tape.item(loss);
            if !l.is_finite() {
                return Err(Error::Numeric(format!("task loss is {l} at step {step}")));
            }
            total += l;
            let scaled = tape.scale(loss, 1.0 / spec.grad_accum as f64);
            tape.backward(scaled)?;
            accumulate_grads(trainable_mut(model), &tape.param_grads())?;
        }
        optimizer_step(&mut trainable_mut(model), &mut opt)?;
        on_step(&StepRecord {
            step,
            loss: total / spec.grad_accum as f64,
            lr: spec.lr,
        })?;
        if step % spec.checkpoint_interval == 0 || step == spec.steps {
            on_checkpoint(step, model)?;
        }
    }
    Ok(())
}
