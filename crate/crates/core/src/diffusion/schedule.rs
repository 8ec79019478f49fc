use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

/// Linear-β DDPM schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "schedule bounds must satisfy 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        // Past this point the product loses precision and then hits zero.
        if acc < f64::MIN_POSITIVE {
            return Err(Error::Config(format!(
                "schedule ({steps}, {beta_min}, {beta_max}) drives alpha_bar below f64 range; use fewer steps or smaller betas"
            )));
        }
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    pub fn from_spec(spec: &ScheduleSpec) -> Result<Self> {
        Self::new(spec.steps, spec.beta_min, spec.beta_max)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or_else(|| {
            Error::Contract(format!("timestep {t} outside schedule of {} steps", self.len()))
        })
    }

    /// `z_t = √ᾱ_t·x0 + √(1−ᾱ_t)·noise`, one timestep per row of `x0`
    /// (or one for the whole batch).
    pub fn q_sample(&self, x0: &Tensor, t: &[usize], noise: &Tensor) -> Result<Tensor> {
        if x0.shape() != noise.shape() {
            return Err(Error::shape("q_sample", x0.shape(), noise.shape()));
        }
        let rows = x0.shape()[0];
        if t.len() != rows && t.len() != 1 {
            return Err(Error::Contract(format!("{} timesteps for {rows} rows", t.len())));
        }
        let width = x0.numel() / rows;
        let mut out = Vec::with_capacity(x0.numel());
        for r in 0..rows {
            let ab = self.alpha_bar(t[if t.len() == 1 { 0 } else { r }])?;
            let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
            let xs = &x0.data()[r * width..(r + 1) * width];
            let ns = &noise.data()[r * width..(r + 1) * width];
            out.extend(xs.iter().zip(ns).map(|(x, n)| a * x + s * n));
        }
        Tensor::new(x0.shape().to_vec(), out)
    }

    /// Evenly spaced timesteps for a `steps`-step sampler, ascending.
    pub fn respaced(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.len();
        if steps == 0 || steps > t {
            return Err(Error::Config(format!("sampler steps must be in 1..={t}, got {steps}")));
        }
        Ok((0..steps).map(|i| (i + 1) * t / steps - 1).collect())
    }
}
