//! A frozen base denoiser plus per-layer adapters.

use crate::adapters::config::AdapterConfig;
use crate::adapters::count::{plan_adapters, AdapterKind};
use crate::adapters::lora::LoraAdapter;
use crate::adapters::router::Pooling;
use crate::adapters::styleinject::{StyleInjectAdapter, StyleInjectInit};
use crate::error::Result;
use crate::host::denoiser::{DenoiseInput, NoisePredictor, Prediction, ProjectionHook, ToyDenoiser, TrainScope};
use crate::params::Parameterized;
use crate::tensor::{derive_seed, SeededRng, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Lora(LoraAdapter),
    StyleInject(StyleInjectAdapter),
}

impl Adapter {
    pub fn as_styleinject(&self) -> Option<&StyleInjectAdapter> {
        match self {
            Adapter::StyleInject(s) => Some(s),
            Adapter::Lora(_) => None,
        }
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Adapter::Lora(a) => a.named_params(),
            Adapter::StyleInject(a) => a.named_params(),
        }
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            Adapter::Lora(a) => a.named_params_mut(),
            Adapter::StyleInject(a) => a.named_params_mut(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttachedModel {
    base: ToyDenoiser,
    config: AdapterConfig,
    /// `(layer, adapter)` in manifest order.
    adapters: Vec<(String, Adapter)>,
}

/// Freezes `model` and attaches adapters chosen by `config`. Layer `i` of the
/// plan is initialized from its own stream of `seed`.
pub fn attach_adapters(model: ToyDenoiser, config: &AdapterConfig, seed: u64) -> Result<AttachedModel> {
    let mut base = model;
    base.set_train_scope(TrainScope::Frozen);
    let plan = plan_adapters(config, &base.manifest())?;
    let mut adapters = Vec::with_capacity(plan.len());
    for (i, p) in plan.iter().enumerate() {
        let mut rng = SeededRng::new(derive_seed(seed, i as u64 + 1));
        let e = &p.entry;
        let adapter = match p.kind {
            AdapterKind::Lora => Adapter::Lora(LoraAdapter::init(&e.name, e.d_in, e.d_out, config.rank, config.alpha(), &mut rng)?),
            AdapterKind::StyleInject { styles, variant } => Adapter::StyleInject(StyleInjectAdapter::init(
                &StyleInjectInit {
                    layer: &e.name,
                    d_in: e.d_in,
                    d_out: e.d_out,
                    rank: config.rank,
                    styles,
                    alpha: config.alpha(),
                    eps: config.eps,
                    pooling: Pooling::from(e.kind),
                    variant,
                },
                &mut rng,
            )?),
        };
        adapters.push((e.name.clone(), adapter));
    }
    Ok(AttachedModel {
        base,
        config: config.clone(),
        adapters,
    })
}

impl AttachedModel {
    pub fn base(&self) -> &ToyDenoiser {
        &self.base
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn adapters(&self) -> &[(String, Adapter)] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [(String, Adapter)] {
        &mut self.adapters
    }

    pub fn adapter(&self, layer: &str) -> Option<&Adapter> {
        self.adapters.iter().find(|(n, _)| n == layer).map(|(_, a)| a)
    }

    /// Layers carrying a routed adapter.
    pub fn routed_layers(&self) -> Vec<&str> {
        self.adapters
            .iter()
            .filter(|(_, a)| a.as_styleinject().is_some())
            .map(|(n, _)| n.as_str())
            .collect()
    }

    /// Exactly the adapter parameters, in manifest then component order.
    pub fn trainable_parameters(&self) -> Vec<(String, &Tensor)> {
        self.named_params()
    }

    /// Drops every adapter and returns the untouched base.
    pub fn detach(self) -> ToyDenoiser {
        self.base
    }
}

impl ProjectionHook for AttachedModel {
    fn project(&self, tape: &mut Tape, layer: &str, w0: Var, x: Var, routes: &mut Vec<(String, Var)>) -> Result<Option<Var>> {
        match self.adapter(layer) {
            None => Ok(None),
            Some(Adapter::Lora(a)) => a.forward(tape, w0, x).map(Some),
            Some(Adapter::StyleInject(a)) => {
                let out = a.forward(tape, w0, x)?;
                routes.push((layer.to_string(), out.s));
                Ok(Some(out.h_star))
            }
        }
    }
}

impl NoisePredictor for AttachedModel {
    fn predict(&self, tape: &mut Tape, input: &DenoiseInput) -> Result<Prediction> {
        self.base.forward_hooked(tape, input, self)
    }

    fn data_dim(&self) -> usize {
        self.base.spec().data_dim
    }
}

impl Parameterized for AttachedModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.adapters.iter().flat_map(|(_, a)| a.params()).collect()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.adapters.iter_mut().flat_map(|(_, a)| a.params_mut()).collect()
    }
}
