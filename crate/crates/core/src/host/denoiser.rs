//! Toy conditional noise predictor with attention-style projections.
//!
//! Each of the `D` data coordinates becomes a token of width `d`:
//!
//! ```text
//! H₀[j]  = z[j]·w_in + pos[j] + gain ⊙ temb(t)
//! q      = to_q(H)            k = to_k(C)      v = to_v(C)
//! H     += tanh(to_out(q + softmax(q·kᵀ/√d)·v))
//! ε̂[j]  = head(H[j])
//! ```
//!
//! `C` holds `M` condition tokens of width `c` looked up from a fixed table,
//! the stand-in for a frozen text encoder.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::manifest::{AdaptPolicy, LayerKind, LayerManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::tensor::{derive_seed, SeededRng, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// Data width `D`; also the token count.
    pub data_dim: usize,
    /// Hidden width `d`.
    pub width: usize,
    /// Number of blocks `K`.
    pub blocks: usize,
    pub cond_vocab: usize,
    /// Tokens per condition `M`.
    pub cond_tokens: usize,
    /// Condition token width `c`.
    pub cond_width: usize,
    /// Seed for every trunk weight.
    pub seed: u64,
    /// Seed for the condition table alone.
    pub embedder_seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            data_dim: 8,
            width: 16,
            blocks: 2,
            cond_vocab: 8,
            cond_tokens: 4,
            cond_width: 12,
            seed: 1,
            embedder_seed: 2,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("data_dim", self.data_dim),
            ("width", self.width),
            ("blocks", self.blocks),
            ("cond_vocab", self.cond_vocab),
            ("cond_tokens", self.cond_tokens),
            ("cond_width", self.cond_width),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model {name} must be positive")));
            }
        }
        if !self.width.is_multiple_of(2) {
            return Err(Error::Config("model width must be even (sinusoidal time embedding)".into()));
        }
        Ok(())
    }

    /// The adaptable layers in forward order.
    pub fn manifest(&self) -> LayerManifest {
        let (d, c) = (self.width, self.cond_width);
        let mut entries = Vec::new();
        let lin = |name: String, d_in, d_out, policy| ManifestEntry {
            name,
            kind: LayerKind::Linear,
            d_in,
            d_out,
            policy,
        };
        for i in 0..self.blocks {
            entries.push(lin(format!("blocks.{i}.to_q"), d, d, AdaptPolicy::StyleInject));
            entries.push(lin(format!("blocks.{i}.to_k"), c, d, AdaptPolicy::Frozen));
            entries.push(lin(format!("blocks.{i}.to_v"), c, d, AdaptPolicy::Lora));
            entries.push(lin(format!("blocks.{i}.to_out"), d, d, AdaptPolicy::Frozen));
        }
        entries.push(lin("head".into(), d, 1, AdaptPolicy::Frozen));
        LayerManifest::new(entries).expect("generated names are unique")
    }
}

/// One batch of denoiser inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseInput {
    /// `B × D` noisy samples.
    pub z: Tensor,
    pub cond: Vec<usize>,
    pub t: Vec<usize>,
}

impl DenoiseInput {
    pub fn new(z: Tensor, cond: Vec<usize>, t: Vec<usize>) -> Result<Self> {
        if z.shape().len() != 2 {
            return Err(Error::shape("denoiser input (expects B×D)", z.shape(), &[]));
        }
        let b = z.shape()[0];
        if cond.len() != b || t.len() != b {
            return Err(Error::Contract(format!(
                "batch of {b} samples with {} conditions and {} timesteps",
                cond.len(),
                t.len()
            )));
        }
        Ok(DenoiseInput { z, cond, t })
    }

    pub fn batch(&self) -> usize {
        self.z.shape()[0]
    }
}

/// Values recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// `B × D` noise estimate.
    pub eps: Var,
    /// Block outputs (`blocks.i`, `B × D × d`) and projection outputs by layer name.
    pub features: BTreeMap<String, Var>,
    /// `(layer, B × n routing probabilities)` for every routed adapter, in forward order.
    pub routes: Vec<(String, Var)>,
}

#[derive(Default)]
struct Recorded {
    features: BTreeMap<String, Var>,
    routes: Vec<(String, Var)>,
}

/// Anything that predicts noise from `(z_t, condition, t)`.
pub trait NoisePredictor {
    fn predict(&self, tape: &mut Tape, input: &DenoiseInput) -> Result<Prediction>;
    fn data_dim(&self) -> usize;
}

/// Per-layer override of a projection. Returns `None` to use the frozen
/// weight as is.
pub(crate) trait ProjectionHook {
    fn project(&self, tape: &mut Tape, layer: &str, w0: Var, x: Var, routes: &mut Vec<(String, Var)>)
        -> Result<Option<Var>>;
}

struct NoHook;

impl ProjectionHook for NoHook {
    fn project(&self, _: &mut Tape, _: &str, _: Var, _: Var, _: &mut Vec<(String, Var)>) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// Which base parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    Frozen,
    /// Everything except the condition table.
    Trunk,
    All,
}

pub const EMBEDDER_TABLE: &str = "embedder.table";

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    spec: ModelSpec,
    params: BTreeMap<String, Tensor>,
}

fn gaussian(rng: &mut SeededRng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    let v = rng.normals(n).into_iter().map(|x| x * std).collect();
    Tensor::new(shape, v).expect("positive extents")
}

/// Sinusoidal embedding of raw timesteps, `B × 1 × d`.
pub fn time_embedding(t: &[usize], width: usize) -> Tensor {
    let half = width / 2;
    let mut out = Vec::with_capacity(t.len() * width);
    for &ti in t {
        for j in 0..half {
            let freq = 1.0 / 10000f64.powf(2.0 * j as f64 / width as f64);
            let a = ti as f64 * freq;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    Tensor::new(vec![t.len(), 1, width], out).expect("positive extents")
}

impl ToyDenoiser {
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let (dd, d, c, m) = (spec.data_dim, spec.width, spec.cond_width, spec.cond_tokens);
        let mut params = BTreeMap::new();
        let mut emb_rng = SeededRng::new(spec.embedder_seed);
        params.insert(EMBEDDER_TABLE.to_string(), gaussian(&mut emb_rng, vec![spec.cond_vocab, m * c], 1.0));

        // Each tensor draws from its own stream so adding a layer does not
        // reshuffle the others.
        let mut stream = 0u64;
        let mut draw = |shape: Vec<usize>, std: f64| {
            stream += 1;
            gaussian(&mut SeededRng::new(derive_seed(spec.seed, stream)), shape, std)
        };
        params.insert("lift.w_in".into(), draw(vec![d, 1], 1.0));
        params.insert("lift.pos".into(), draw(vec![dd, d], 0.5));
        params.insert("lift.time_gain".into(), Tensor::full(vec![d], 1.0));
        for e in spec.manifest().entries() {
            let std = 1.0 / (e.d_in as f64).sqrt();
            params.insert(format!("{}.weight", e.name), draw(vec![e.d_out, e.d_in], std));
        }
        params.insert("head.bias".into(), Tensor::zeros(vec![1]));
        Ok(ToyDenoiser { spec: spec.clone(), params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn manifest(&self) -> LayerManifest {
        self.spec.manifest()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn set_train_scope(&mut self, scope: TrainScope) {
        for (name, t) in &mut self.params {
            let on = match scope {
                TrainScope::Frozen => false,
                TrainScope::Trunk => name != EMBEDDER_TABLE,
                TrainScope::All => true,
            };
            t.set_requires_grad(on);
        }
    }

    /// Replaces the condition table, e.g. to give a student its own encoder.
    pub fn set_embedder(&mut self, table: Tensor) -> Result<()> {
        let cur = &self.params[EMBEDDER_TABLE];
        if cur.shape() != table.shape() {
            return Err(Error::shape("embedder table", table.shape(), cur.shape()));
        }
        let trainable = cur.requires_grad();
        let mut table = table;
        table.set_requires_grad(trainable);
        self.params.insert(EMBEDDER_TABLE.into(), table);
        Ok(())
    }

    /// Parameters outside the condition table.
    pub fn trunk_params(&self) -> Vec<(String, &Tensor)> {
        self.named_params().into_iter().filter(|(n, _)| n != EMBEDDER_TABLE).collect()
    }

    fn p(&self, tape: &mut Tape, name: &str) -> Var {
        tape.param(name, &self.params[name])
    }

    fn project(
        &self,
        tape: &mut Tape,
        hook: &dyn ProjectionHook,
        layer: &str,
        x: Var,
        rec: &mut Recorded,
    ) -> Result<Var> {
        let w0 = self.p(tape, &format!("{layer}.weight"));
        let out = match hook.project(tape, layer, w0, x, &mut rec.routes)? {
            Some(v) => v,
            None => tape.linear(x, w0)?,
        };
        rec.features.insert(layer.to_string(), out);
        Ok(out)
    }

    pub(crate) fn forward_hooked(&self, tape: &mut Tape, input: &DenoiseInput, hook: &dyn ProjectionHook) -> Result<Prediction> {
        let s = &self.spec;
        let (dd, d) = (s.data_dim, s.width);
        if input.z.shape()[1] != dd {
            return Err(Error::shape("denoiser input", input.z.shape(), &[input.batch(), dd]));
        }
        let b = input.batch();
        let mut rec = Recorded::default();

        let table = self.p(tape, EMBEDDER_TABLE);
        let cond = tape.embedding(table, &input.cond)?;
        let cond = tape.reshape(cond, &[b, s.cond_tokens, s.cond_width])?;

        let z = tape.constant(input.z.clone().reshape(vec![b, dd, 1])?);
        let w_in = self.p(tape, "lift.w_in");
        let mut h = tape.linear(z, w_in)?;
        let pos = self.p(tape, "lift.pos");
        let pos = tape.reshape(pos, &[1, dd, d])?;
        h = tape.add_bcast(h, pos)?;
        let temb = tape.constant(time_embedding(&input.t, d));
        let gain = self.p(tape, "lift.time_gain");
        let gain = tape.reshape(gain, &[1, 1, d])?;
        let temb = tape.mul_bcast(temb, gain)?;
        h = tape.add_bcast(h, temb)?;

        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        for i in 0..s.blocks {
            let q = self.project(tape, hook, &format!("blocks.{i}.to_q"), h, &mut rec)?;
            let k = self.project(tape, hook, &format!("blocks.{i}.to_k"), cond, &mut rec)?;
            let v = self.project(tape, hook, &format!("blocks.{i}.to_v"), cond, &mut rec)?;
            let kt = tape.transpose_last2(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, inv_sqrt_d);
            let attn = tape.softmax(scores, 2)?;
            let mixed = tape.matmul(attn, v)?;
            let mixed = tape.add(q, mixed)?;
            let o = self.project(tape, hook, &format!("blocks.{i}.to_out"), mixed, &mut rec)?;
            let o = tape.tanh(o);
            h = tape.add(h, o)?;
            rec.features.insert(format!("blocks.{i}"), h);
        }

        let out = self.project(tape, hook, "head", h, &mut rec)?;
        let bias = self.p(tape, "head.bias");
        let bias = tape.reshape(bias, &[1, 1, 1])?;
        let out = tape.add_bcast(out, bias)?;
        Ok(Prediction {
            eps: tape.reshape(out, &[b, dd])?,
            features: rec.features,
            routes: rec.routes,
        })
    }
}

impl NoisePredictor for ToyDenoiser {
    fn predict(&self, tape: &mut Tape, input: &DenoiseInput) -> Result<Prediction> {
        self.forward_hooked(tape, input, &NoHook)
    }

    fn data_dim(&self) -> usize {
        self.spec.data_dim
    }
}

impl Parameterized for ToyDenoiser {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.clone(), t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_audit() {
        let m = ModelSpec::default().manifest();
        assert_eq!(m.len(), 2 * 4 + 1);
        assert_eq!(m.entries().last().unwrap().name, "head");
    }

    #[test]
    fn zero_input_is_finite() {
        let model = ToyDenoiser::build(&ModelSpec::default()).unwrap();
        let input = DenoiseInput::new(Tensor::zeros(vec![2, 8]), vec![0, 0], vec![0, 999]).unwrap();
        let mut tape = Tape::new();
        let p = model.predict(&mut tape, &input).unwrap();
        assert_eq!(tape.shape(p.eps), &[2, 8]);
        assert!(tape.value(p.eps).iter().all(|v| v.is_finite()));
        assert!(p.routes.is_empty());
        assert!(p.features.contains_key("blocks.1"));
    }

    #[test]
    fn bad_condition_is_contract_error() {
        let model = ToyDenoiser::build(&ModelSpec::default()).unwrap();
        let input = DenoiseInput::new(Tensor::zeros(vec![1, 8]), vec![99], vec![0]).unwrap();
        assert!(matches!(model.predict(&mut Tape::new(), &input), Err(Error::Contract(_))));
    }

    #[test]
    fn scope_controls_trainable_set() {
        let mut model = ToyDenoiser::build(&ModelSpec::default()).unwrap();
        assert!(model.named_params().iter().all(|(_, t)| !t.requires_grad()));
        model.set_train_scope(TrainScope::Trunk);
        let on: Vec<String> = model
            .named_params()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n)
            .collect();
        assert!(!on.contains(&EMBEDDER_TABLE.to_string()));
        assert_eq!(on.len(), model.named_params().len() - 1);
    }
}
