mod common;

use std::collections::BTreeMap;

use common::*;
use styleinject::adapters::AdapterConfig;
use styleinject::diffusion::{ancestral_sample, noised_batch, task_loss, DatasetSpec, NoiseSchedule, ToyDataset};
use styleinject::host::{attach_adapters, DenoiseInput, ModelSpec, NoisePredictor, Prediction, ToyDenoiser};
use styleinject::tensor::{SeededRng, Tape, Tensor};
use styleinject::{Error, Result};

/// Predicts the exact noise for data concentrated on `point`.
struct PointMassOracle {
    point: Vec<f64>,
    schedule: NoiseSchedule,
}

impl NoisePredictor for PointMassOracle {
    fn predict(&self, tape: &mut Tape, input: &DenoiseInput) -> Result<Prediction> {
        let d = self.point.len();
        let mut eps = Vec::new();
        for (row, &t) in input.z.data().chunks(d).zip(&input.t) {
            let ab = self.schedule.alpha_bar(t)?;
            eps.extend(row.iter().zip(&self.point).map(|(z, x)| (z - ab.sqrt() * x) / (1.0 - ab).sqrt()));
        }
        Ok(Prediction {
            eps: tape.constant(Tensor::new(input.z.shape().to_vec(), eps)?),
            features: BTreeMap::new(),
            routes: Vec::new(),
        })
    }

    fn data_dim(&self) -> usize {
        self.point.len()
    }
}

struct Zero(usize);

impl NoisePredictor for Zero {
    fn predict(&self, tape: &mut Tape, input: &DenoiseInput) -> Result<Prediction> {
        Ok(Prediction {
            eps: tape.constant(Tensor::zeros(input.z.shape().to_vec())),
            features: BTreeMap::new(),
            routes: Vec::new(),
        })
    }

    fn data_dim(&self) -> usize {
        self.0
    }
}

fn default_schedule() -> NoiseSchedule {
    NoiseSchedule::new(1000, 1e-4, 0.02).unwrap()
}

#[test]
fn alpha_bars_are_the_running_product() {
    let s = default_schedule();
    let mut prod = 1.0;
    for t in 0..1000 {
        let beta = 1e-4 + (0.02 - 1e-4) * t as f64 / 999.0;
        assert!((s.betas()[t] - beta).abs() < 1e-15);
        prod *= 1.0 - beta;
        assert!((s.alpha_bars()[t] - prod).abs() < 1e-12);
    }
    assert!(s.alpha_bar(999).unwrap() < 0.01);
    assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    assert!(matches!(s.alpha_bar(1000), Err(Error::Contract(_))));
}

#[test]
fn q_sample_matches_formula() {
    let s = default_schedule();
    let mut rng = SeededRng::new(31);
    let x0 = random(&mut rng, &[4, 8], 1.0);
    let noise = random(&mut rng, &[4, 8], 1.0);
    let t = [0, 10, 500, 999];
    let z = s.q_sample(&x0, &t, &noise).unwrap();
    for r in 0..4 {
        let ab = s.alpha_bars()[t[r]];
        for c in 0..8 {
            let want = ab.sqrt() * x0.at(&[r, c]) + (1.0 - ab).sqrt() * noise.at(&[r, c]);
            assert!((z.at(&[r, c]) - want).abs() < 1e-12);
        }
    }
    let zero = s.q_sample(&x0, &[500], &Tensor::zeros(vec![4, 8])).unwrap();
    let ab = s.alpha_bars()[500];
    assert!(max_abs_diff(zero.data(), &x0.data().iter().map(|v| ab.sqrt() * v).collect::<Vec<_>>()) < 1e-15);
}

#[test]
fn q_sample_preserves_marginal_variance() {
    let s = default_schedule();
    let mut rng = SeededRng::new(32);
    let n = 10_000;
    let x0_std = 2.0;
    let x0 = random(&mut rng, &[n, 1], x0_std);
    let noise = random(&mut rng, &[n, 1], 1.0);
    for t in [50, 300, 800] {
        let z = s.q_sample(&x0, &[t], &noise).unwrap();
        let (_, var) = two_pass(z.data());
        let (_, var_x0) = two_pass(x0.data());
        let ab = s.alpha_bars()[t];
        let want = ab * var_x0 + (1.0 - ab);
        assert!((var - want).abs() / want < 0.05, "t={t}: {var} vs {want}");
    }
}

#[test]
fn task_loss_of_oracle_is_zero_and_of_zero_model_is_unit() {
    let s = default_schedule();
    let point = vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.5, 0.25, 1.0];
    let oracle = PointMassOracle {
        point: point.clone(),
        schedule: s.clone(),
    };
    let x0 = Tensor::new(vec![64, 8], point.repeat(64)).unwrap();
    let mut tape = Tape::new();
    let l = task_loss(&oracle, &mut tape, &s, &x0, vec![0; 64], &mut SeededRng::new(1)).unwrap();
    assert!(tape.item(l) < 1e-18);

    // Mean over all elements, so a zero predictor scores E[ε²] = 1 and the
    // per-sample squared norm is the data width.
    let x0 = Tensor::zeros(vec![1000, 8]);
    let mut tape = Tape::new();
    let l = task_loss(&Zero(8), &mut tape, &s, &x0, vec![0; 1000], &mut SeededRng::new(2)).unwrap();
    let mean = tape.item(l);
    assert!((mean - 1.0).abs() < 0.1, "{mean}");
    let batch = noised_batch(&s, &x0, vec![0; 1000], &mut SeededRng::new(2)).unwrap();
    let per_row: f64 = batch.noise.data().iter().map(|e| e * e).sum::<f64>() / 1000.0;
    assert!((per_row - 8.0).abs() < 0.8, "{per_row}");
    assert!((per_row / 8.0 - mean).abs() < 1e-12);

    let mut t1 = Tape::new();
    let mut t2 = Tape::new();
    let a = task_loss(&Zero(8), &mut t1, &s, &x0, vec![0; 1000], &mut SeededRng::new(3)).unwrap();
    let b = task_loss(&Zero(8), &mut t2, &s, &x0, vec![0; 1000], &mut SeededRng::new(3)).unwrap();
    assert_eq!(t1.item(a).to_bits(), t2.item(b).to_bits());
}

#[test]
fn oracle_sampler_lands_on_the_point_mass() {
    let s = default_schedule();
    let point = vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.5, 0.25, 1.0];
    let oracle = PointMassOracle {
        point: point.clone(),
        schedule: s.clone(),
    };
    for steps in [1, 10, 50] {
        let traj = ancestral_sample(&oracle, &s, &[0, 1, 2], 7, steps).unwrap();
        assert_eq!(traj.timesteps.len(), steps);
        assert_eq!(traj.states.len(), steps + 1);
        for row in traj.final_sample().data().chunks(8) {
            assert!(max_abs_diff(row, &point) < 0.1);
        }
    }
    let once = ancestral_sample(&oracle, &s, &[0], 7, 1).unwrap();
    assert_eq!(once.timesteps, vec![999]);
}

#[test]
fn sampling_is_seeded_and_init_adapters_do_not_move_it() {
    let s = default_schedule();
    let base = ToyDenoiser::build(&ModelSpec::default()).unwrap();
    let a = ancestral_sample(&base, &s, &[0, 3], 11, 20).unwrap();
    let b = ancestral_sample(&base, &s, &[0, 3], 11, 20).unwrap();
    assert_eq!(a, b);
    let attached = attach_adapters(base, &AdapterConfig::styleinject(4, 4), 5).unwrap();
    let c = ancestral_sample(&attached, &s, &[0, 3], 11, 20).unwrap();
    assert!(max_abs_diff(a.final_sample().data(), c.final_sample().data()) < 1e-5);
    let csv = a.to_csv();
    assert!(csv.starts_with("step,row,x0,x1"));
    assert_eq!(csv.lines().count(), 1 + 21 * 2);
}

#[test]
fn datasets_are_reproducible() {
    let spec = DatasetSpec::default();
    let a = ToyDataset::generate(&spec).unwrap();
    let b = ToyDataset::generate(&spec).unwrap();
    assert!(a.samples().bit_eq(b.samples()));
    assert_eq!(a.conds(), b.conds());
    let c = ToyDataset::generate(&DatasetSpec { seed: spec.seed + 1, ..spec }).unwrap();
    assert!(!a.samples().bit_eq(c.samples()));
}
