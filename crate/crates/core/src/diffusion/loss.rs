use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::host::{DenoiseInput, NoisePredictor, Prediction};
use crate::tensor::{SeededRng, Tape, Tensor, Var};

/// A clean batch pushed to random timesteps, with the noise that was used.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedBatch {
    pub input: DenoiseInput,
    pub noise: Tensor,
}

/// Draws one `t` per row uniformly from `[0, T)`, then the noise, then
/// forms `z_t`.
pub fn noised_batch(schedule: &NoiseSchedule, x0: &Tensor, cond: Vec<usize>, rng: &mut SeededRng) -> Result<NoisedBatch> {
    if x0.shape().len() != 2 {
        return Err(Error::shape("noised_batch (expects B×D)", x0.shape(), &[]));
    }
    let rows = x0.shape()[0];
    let t: Vec<usize> = (0..rows).map(|_| rng.below(schedule.len())).collect();
    let noise = Tensor::new(x0.shape().to_vec(), rng.normals(x0.numel()))?;
    let z = schedule.q_sample(x0, &t, &noise)?;
    Ok(NoisedBatch {
        input: DenoiseInput::new(z, cond, t)?,
        noise,
    })
}

/// Mean over all elements of `(ε − ε̂)²`.
pub fn noise_mse(tape: &mut Tape, pred: &Prediction, noise: &Tensor) -> Result<Var> {
    let target = tape.constant(noise.clone());
    tape.mse(pred.eps, target)
}

/// Noise-prediction loss on a freshly noised copy of `x0`.
pub fn task_loss<M: NoisePredictor + ?Sized>(
    model: &M,
    tape: &mut Tape,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    cond: Vec<usize>,
    rng: &mut SeededRng,
) -> Result<Var> {
    let batch = noised_batch(schedule, x0, cond, rng)?;
    let pred = model.predict(tape, &batch.input)?;
    noise_mse(tape, &pred, &batch.noise)
}
