mod common;

use common::*;
use styleinject::adapters::{AdapterConfig, Method};
use styleinject::gradcheck;
use styleinject::host::{attach_adapters, AttachedModel, DenoiseInput, ModelSpec, NoisePredictor, ToyDenoiser};
use styleinject::params::param_hash;
use styleinject::tensor::{SeededRng, Tape, Tensor, Var};
use styleinject::Parameterized;

fn random_input(rng: &mut SeededRng, spec: &ModelSpec, batch: usize) -> DenoiseInput {
    let z = random(rng, &[batch, spec.data_dim], 1.0);
    let cond = (0..batch).map(|_| rng.below(spec.cond_vocab)).collect();
    let t = (0..batch).map(|_| rng.below(1000)).collect();
    DenoiseInput::new(z, cond, t).unwrap()
}

fn eps_of<M: NoisePredictor>(m: &M, input: &DenoiseInput) -> Vec<f64> {
    let mut tape = Tape::new();
    let p = m.predict(&mut tape, input).unwrap();
    tape.value(p.eps).to_vec()
}

#[test]
fn fresh_adapters_leave_the_output_unchanged() {
    let spec = ModelSpec::default();
    let base = ToyDenoiser::build(&spec).unwrap();
    let mut rng = SeededRng::new(21);
    for (i, cfg) in [
        AdapterConfig::styleinject(4, 4),
        AdapterConfig::styleinject(2, 16),
        AdapterConfig::lora(4),
        AdapterConfig::styleinject(4, 4).with_method(Method::Dma),
        AdapterConfig::styleinject(4, 4).with_method(Method::Sta),
    ]
    .iter()
    .enumerate()
    {
        let attached = attach_adapters(base.clone(), cfg, 100 + i as u64).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let input = random_input(&mut rng, &spec, 1);
            worst = worst.max(max_abs_diff(&eps_of(&attached, &input), &eps_of(&base, &input)));
        }
        assert!(worst < 1e-5, "{:?}: {worst}", cfg.method);
    }
}

/// Nonzero values everywhere so no gradient is trivially zero.
fn perturbed(cfg: &AdapterConfig, seed: u64) -> AttachedModel {
    let spec = ModelSpec::default();
    let mut m = attach_adapters(ToyDenoiser::build(&spec).unwrap(), cfg, seed).unwrap();
    let mut rng = SeededRng::new(seed + 1);
    for (_, t) in m.named_params_mut() {
        let v: Vec<f64> = rng.normals(t.numel()).into_iter().map(|x| 0.2 * x).collect();
        t.assign(&v).unwrap();
    }
    m
}

fn mse_loss<'a>(input: &'a DenoiseInput, target: &'a Tensor) -> impl Fn(&AttachedModel, &mut Tape) -> styleinject::Result<Var> + 'a {
    move |m, tape| {
        let p = m.predict(tape, input)?;
        let t = tape.constant(target.clone());
        tape.mse(p.eps, t)
    }
}

#[test]
fn adapter_gradients_match_central_differences() {
    let spec = ModelSpec::default();
    assert_eq!(spec.blocks, 2);
    let mut rng = SeededRng::new(22);
    let input = random_input(&mut rng, &spec, 3);
    let target = random(&mut rng, &[3, spec.data_dim], 1.0);
    let mut model = perturbed(&AdapterConfig::styleinject(3, 3), 30);
    let report = gradcheck::check(&mut model, mse_loss(&input, &target), 1e-5, 0).unwrap();

    let names = report.names();
    for part in ["styleinject.a.0", "styleinject.a.2", "styleinject.b", "router.weight", "router.bias", "hypernet.weight", "hypernet.bias", "lora.a", "lora.b"] {
        assert!(names.iter().any(|n| n.ends_with(part)), "{part} not probed: {names:?}");
    }
    assert_eq!(report.entries.len(), model.param_count());
    let worst = report.worst().unwrap();
    assert!(report.max_rel_err() < 1e-3, "{worst:?}");
}

#[test]
fn base_receives_no_gradient() {
    let spec = ModelSpec::default();
    let mut rng = SeededRng::new(23);
    let input = random_input(&mut rng, &spec, 2);
    let target = random(&mut rng, &[2, spec.data_dim], 1.0);
    let model = perturbed(&AdapterConfig::styleinject(2, 2), 40);
    let mut tape = Tape::new();
    let l = mse_loss(&input, &target)(&model, &mut tape).unwrap();
    tape.backward(l).unwrap();
    let grads = tape.param_grads();
    let adapter_names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    assert_eq!(grads.keys().cloned().collect::<Vec<_>>().len(), adapter_names.len());
    for n in grads.keys() {
        assert!(adapter_names.contains(n), "base parameter {n} was differentiated");
    }
    let before = param_hash(&model.base().named_params());
    assert_eq!(before, param_hash(&ToyDenoiser::build(&spec).unwrap().named_params()));
}

#[test]
fn routes_are_probability_vectors_everywhere() {
    let spec = ModelSpec::default();
    let mut rng = SeededRng::new(24);
    let model = perturbed(&AdapterConfig::styleinject(4, 5), 50);
    for _ in 0..20 {
        let input = random_input(&mut rng, &spec, 4);
        let mut tape = Tape::new();
        let p = model.predict(&mut tape, &input).unwrap();
        assert_eq!(p.routes.len(), model.routed_layers().len());
        for (_, s) in &p.routes {
            for row in tape.value(*s).chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }
}
