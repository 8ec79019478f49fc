//! Ancestral (DDPM) sampling over a respaced timestep grid.

use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::host::{DenoiseInput, NoisePredictor, Prediction};
use crate::tensor::{SeededRng, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Timesteps visited, from noisiest to cleanest.
    pub timesteps: Vec<usize>,
    /// The initial noise followed by the state after every update.
    pub states: Vec<Tensor>,
}

impl Trajectory {
    pub fn final_sample(&self) -> &Tensor {
        self.states.last().expect("trajectory holds the initial state")
    }

    /// `step,row,x0,x1,...` rows for every stored state.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(first) = self.states.first() {
            let width = first.shape()[1];
            out.push_str("step,row");
            for k in 0..width {
                out.push_str(&format!(",x{k}"));
            }
            out.push('\n');
        }
        for (step, s) in self.states.iter().enumerate() {
            let width = s.shape()[1];
            for (row, vals) in s.data().chunks(width).enumerate() {
                out.push_str(&format!("{step},{row}"));
                for v in vals {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// What an observer sees after each model call.
pub struct SampleStep<'a> {
    /// Position in the sampler loop, `0` for the first (noisiest) update.
    pub index: usize,
    pub t: usize,
    pub tape: &'a Tape,
    pub prediction: &'a Prediction,
}

pub fn ancestral_sample<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    cond: &[usize],
    seed: u64,
    steps: usize,
) -> Result<Trajectory> {
    ancestral_sample_observed(model, schedule, cond, seed, steps, &mut |_| Ok(()))
}

/// Starts from `N(0, I)` and applies one posterior step per respaced
/// timestep; the last step lands on `ᾱ = 1` and adds no noise.
pub fn ancestral_sample_observed<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    cond: &[usize],
    seed: u64,
    steps: usize,
    observer: &mut dyn FnMut(&SampleStep<'_>) -> Result<()>,
) -> Result<Trajectory> {
    if cond.is_empty() {
        return Err(Error::Degenerate("sampling needs at least one condition".into()));
    }
    let grid = schedule.respaced(steps)?;
    let (b, dd) = (cond.len(), model.data_dim());
    let mut rng = SeededRng::new(seed);
    let mut z = Tensor::new(vec![b, dd], rng.normals(b * dd))?;
    let mut states = vec![z.clone()];
    let mut visited = Vec::with_capacity(steps);

    for (index, i) in (0..grid.len()).rev().enumerate() {
        let t = grid[i];
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = if i == 0 { 1.0 } else { schedule.alpha_bar(grid[i - 1])? };
        let beta = 1.0 - ab / ab_prev;

        let mut tape = Tape::new();
        let input = DenoiseInput::new(z.clone(), cond.to_vec(), vec![t; b])?;
        let pred = model.predict(&mut tape, &input)?;
        observer(&SampleStep {
            index,
            t,
            tape: &tape,
            prediction: &pred,
        })?;
        let eps = tape.value(pred.eps);
        if let Some(bad) = eps.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite noise estimate at t={t}, element {bad}")));
        }

        let c_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let c_z = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        let noise = if i > 0 { rng.normals(b * dd) } else { vec![0.0; b * dd] };
        let next: Vec<f64> = z
            .data()
            .iter()
            .zip(eps)
            .zip(&noise)
            .map(|((&zt, &e), &n)| {
                let x0 = (zt - (1.0 - ab).sqrt() * e) / ab.sqrt();
                c_x0 * x0 + c_z * zt + var.sqrt() * n
            })
            .collect();
        z = Tensor::new(vec![b, dd], next)?;
        states.push(z.clone());
        visited.push(t);
    }
    Ok(Trajectory {
        timesteps: visited,
        states,
    })
}
