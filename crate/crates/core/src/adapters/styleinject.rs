//! Routed multi-style low-rank adaptation with variance injection.
//!
//! For a frozen projection `h = W₀x` the adapter computes
//!
//! ```text
//! s      = softmax(router(pool(x)))              one vector per instance
//! u      = Σᵢ sᵢ · Aᵢx                            routed low-rank code
//! Δh     = (α/r) · B u                            shared up-projection
//! ĥ,μ,σ  = adain(h)                               per instance, per channel
//! σ̂      = σ ⊙ (1 + g(pool(u)))                   one-layer hypernetwork g
//! h*     = ĥ ⊙ σ̂ + μ + Δh
//! ```
//!
//! `B` and the hypernetwork start at zero, so a fresh adapter returns `h`.
//! Per-channel statistics are taken over the token (or spatial) axis of a
//! `B × P × d` feature map; `σ` is the standard deviation floored at `eps`.

use crate::adapters::lora::check_rank;
use crate::adapters::router::{pool, Pooling, StyleRouter};
use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::tensor::{SeededRng, Tape, Tensor, Var};

/// Tolerance on `Σ sᵢ = 1` accepted by [`StyleInjectAdapter::dma_delta`].
pub const ROUTE_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct Adain {
    pub h_hat: Var,
    pub mu: Var,
    pub sigma: Var,
}

/// Splits `h` into normalized features, mean and floored standard deviation,
/// reducing over `axes` (statistics keep those axes with extent 1).
pub fn adain_decompose(tape: &mut Tape, h: Var, axes: &[usize], eps: f64) -> Result<Adain> {
    let (mu, var) = tape.moments(h, axes)?;
    let sigma = tape.sqrt_floor(var, eps);
    let shape = tape.shape(h).to_vec();
    let mu_b = tape.broadcast_to(mu, &shape)?;
    let centered = tape.sub(h, mu_b)?;
    let sigma_b = tape.broadcast_to(sigma, &shape)?;
    let h_hat = tape.div(centered, sigma_b)?;
    Ok(Adain { h_hat, mu, sigma })
}

/// Variance-injection variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// `h* = ĥ·σ̂ + μ + Δh`
    Full,
    /// `h* = h + Δh`, no normalization or hypernetwork.
    DmaOnly,
}

#[derive(Debug, Clone, PartialEq)]
struct Hypernet {
    /// `d × r`
    weight: Tensor,
    /// `d`
    bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct StyleInjectOutput {
    pub h_star: Var,
    /// `B × n` routing probabilities.
    pub s: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleInjectAdapter {
    layer: String,
    /// `n` down-projections, each `r × k`.
    a: Vec<Tensor>,
    /// Shared `d × r` up-projection.
    b: Tensor,
    router: StyleRouter,
    hypernet: Option<Hypernet>,
    alpha: f64,
    eps: f64,
}

pub struct StyleInjectInit<'a> {
    pub layer: &'a str,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub styles: usize,
    pub alpha: f64,
    pub eps: f64,
    pub pooling: Pooling,
    pub variant: Variant,
}

impl StyleInjectAdapter {
    /// `Aᵢ ~ N(0, 1/r²)`, router `~ N(0, 0.02²)`, `B = 0`, hypernetwork `= 0`.
    pub fn init(spec: &StyleInjectInit<'_>, rng: &mut SeededRng) -> Result<Self> {
        check_rank(spec.layer, spec.rank, spec.d_in, spec.d_out)?;
        if spec.styles < 1 {
            return Err(Error::Config("style count n must be at least 1".into()));
        }
        let std = 1.0 / spec.rank as f64;
        let mut a = Vec::with_capacity(spec.styles);
        for _ in 0..spec.styles {
            let v: Vec<f64> = rng.normals(spec.rank * spec.d_in).into_iter().map(|x| x * std).collect();
            a.push(Tensor::new(vec![spec.rank, spec.d_in], v)?.trainable());
        }
        let router = StyleRouter::init(spec.layer, spec.d_in, spec.styles, spec.pooling, rng)?;
        let hypernet = match spec.variant {
            Variant::Full => Some(Hypernet {
                weight: Tensor::zeros(vec![spec.d_out, spec.rank]).trainable(),
                bias: Tensor::zeros(vec![spec.d_out]).trainable(),
            }),
            Variant::DmaOnly => None,
        };
        Ok(StyleInjectAdapter {
            layer: spec.layer.to_string(),
            a,
            b: Tensor::zeros(vec![spec.d_out, spec.rank]).trainable(),
            router,
            hypernet,
            alpha: spec.alpha,
            eps: spec.eps,
        })
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn styles(&self) -> usize {
        self.a.len()
    }

    pub fn rank(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn variant(&self) -> Variant {
        if self.hypernet.is_some() {
            Variant::Full
        } else {
            Variant::DmaOnly
        }
    }

    pub fn router(&self) -> &StyleRouter {
        &self.router
    }

    pub fn router_mut(&mut self) -> &mut StyleRouter {
        &mut self.router
    }

    pub fn a(&self) -> &[Tensor] {
        &self.a
    }

    pub fn a_mut(&mut self) -> &mut [Tensor] {
        &mut self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn b_mut(&mut self) -> &mut Tensor {
        &mut self.b
    }

    /// Hypernetwork weight (`d × r`) and bias (`d`), if this is the full variant.
    pub fn hypernet_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        self.hypernet.as_mut().map(|h| (&mut h.weight, &mut h.bias))
    }

    fn name(&self, part: &str) -> String {
        format!("{}.styleinject.{part}", self.layer)
    }

    /// Routing probabilities for `x` of shape `B × P × k`.
    pub fn route(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.router.route(tape, x)
    }

    /// `u = Σᵢ sᵢ·Aᵢx`, shape `B × P × r`.
    pub fn routed_code(&self, tape: &mut Tape, x: Var, s: Var) -> Result<Var> {
        let xs = tape.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("styleinject (expects B×P×k)", &xs, &[]));
        }
        let (batch, pos) = (xs[0], xs[1]);
        let (n, r) = (self.styles(), self.rank());
        if tape.shape(s) != [batch, n] {
            return Err(Error::shape("routing vector", tape.shape(s), &[batch, n]));
        }
        let parts: Vec<Var> = self
            .a
            .iter()
            .enumerate()
            .map(|(i, a)| tape.param(&self.name(&format!("a.{i}")), a))
            .collect();
        let a_all = tape.concat0(&parts)?;
        let u_all = tape.linear(x, a_all)?;
        let u_all = tape.reshape(u_all, &[batch, pos, n, r])?;
        let s4 = tape.reshape(s, &[batch, 1, n, 1])?;
        let weighted = tape.mul_bcast(u_all, s4)?;
        let summed = tape.sum_axes(weighted, &[2])?;
        tape.reshape(summed, &[batch, pos, r])
    }

    fn check_routes(&self, tape: &Tape, s: Var) -> Result<()> {
        let n = self.styles();
        for (row, chunk) in tape.value(s).chunks(n).enumerate() {
            let sum: f64 = chunk.iter().sum();
            if (sum - 1.0).abs() > ROUTE_SUM_TOL {
                return Err(Error::Contract(format!(
                    "routing vector for instance {row} of `{}` sums to {sum}",
                    self.layer
                )));
            }
        }
        Ok(())
    }

    fn up_project(&self, tape: &mut Tape, code: Var) -> Result<Var> {
        let b = tape.param(&self.name("b"), &self.b);
        let bu = tape.linear(code, b)?;
        Ok(tape.scale(bu, self.scale()))
    }

    /// `Δh = (α/r)·B Σᵢ sᵢAᵢx` for a given routing vector `s` (`B × n`).
    pub fn dma_delta(&self, tape: &mut Tape, x: Var, s: Var) -> Result<Var> {
        self.check_routes(tape, s)?;
        let code = self.routed_code(tape, x, s)?;
        self.up_project(tape, code)
    }

    /// `σ̂ = σ ⊙ (1 + g(code))` with `code` of shape `B × r` and `sigma` of
    /// shape `B × 1 × d`. Without a hypernetwork `σ̂ = σ`.
    pub fn hypernet_scale(&self, tape: &mut Tape, code: Var, sigma: Var) -> Result<Var> {
        let Some(hn) = &self.hypernet else {
            return Ok(sigma);
        };
        let w = tape.param(&self.name("hypernet.weight"), &hn.weight);
        let c = tape.param(&self.name("hypernet.bias"), &hn.bias);
        let g = tape.linear(code, w)?;
        let batch = tape.shape(g)[0];
        let d = self.d_out();
        let c = tape.reshape(c, &[1, d])?;
        let g = tape.add_bcast(g, c)?;
        let g = tape.add_scalar(g, 1.0);
        let g = tape.reshape(g, &[batch, 1, d])?;
        tape.mul(sigma, g)
    }

    /// Full adapted projection of `x` (`B × P × k`) through frozen `w0` (`d × k`).
    pub fn forward(&self, tape: &mut Tape, w0: Var, x: Var) -> Result<StyleInjectOutput> {
        let h = tape.linear(x, w0)?;
        let s = self.route(tape, x)?;
        self.check_routes(tape, s)?;
        let code = self.routed_code(tape, x, s)?;
        let delta = self.up_project(tape, code)?;
        let h_star = match self.hypernet {
            None => tape.add(h, delta)?,
            Some(_) => {
                let Adain { h_hat, mu, sigma } = adain_decompose(tape, h, &[1], self.eps)?;
                let pooled = pool(tape, code, self.router.pooling())?;
                let sigma_hat = self.hypernet_scale(tape, pooled, sigma)?;
                let styled = tape.mul_bcast(h_hat, sigma_hat)?;
                let rebuilt = tape.add_bcast(styled, mu)?;
                tape.add(rebuilt, delta)?
            }
        };
        Ok(StyleInjectOutput { h_star, s })
    }
}

impl Parameterized for StyleInjectAdapter {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .a
            .iter()
            .enumerate()
            .map(|(i, a)| (self.name(&format!("a.{i}")), a))
            .collect();
        out.push((self.name("b"), &self.b));
        out.extend(self.router.named_params());
        if let Some(hn) = &self.hypernet {
            out.push((self.name("hypernet.weight"), &hn.weight));
            out.push((self.name("hypernet.bias"), &hn.bias));
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names: Vec<String> = (0..self.a.len()).map(|i| self.name(&format!("a.{i}"))).collect();
        let b_name = self.name("b");
        let hn_names = (self.name("hypernet.weight"), self.name("hypernet.bias"));
        let mut out: Vec<(String, &mut Tensor)> = names.into_iter().zip(self.a.iter_mut()).collect();
        out.push((b_name, &mut self.b));
        out.extend(self.router.named_params_mut());
        if let Some(hn) = &mut self.hypernet {
            out.push((hn_names.0, &mut hn.weight));
            out.push((hn_names.1, &mut hn.bias));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng_normal;

    fn spec(n: usize, variant: Variant) -> StyleInjectInit<'static> {
        StyleInjectInit {
            layer: "blk.to_q",
            d_in: 4,
            d_out: 4,
            rank: 2,
            styles: n,
            alpha: 2.0,
            eps: 1e-5,
            pooling: Pooling::TokenMean,
            variant,
        }
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(vec![1, 3, 1], vec![7.0; 3]).unwrap());
        let a = adain_decompose(&mut tape, h, &[1], 1e-5).unwrap();
        assert_eq!(tape.value(a.h_hat), &[0.0, 0.0, 0.0]);
        assert_eq!(tape.value(a.mu), &[7.0]);
        assert_eq!(tape.value(a.sigma), &[1e-5]);
    }

    #[test]
    fn two_point_channel() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(vec![1, 2, 1], vec![1.0, 3.0]).unwrap());
        let a = adain_decompose(&mut tape, h, &[1], 1e-5).unwrap();
        assert_eq!(tape.value(a.mu), &[2.0]);
        assert_eq!(tape.value(a.sigma), &[1.0]);
        assert_eq!(tape.value(a.h_hat), &[-1.0, 1.0]);
    }

    #[test]
    fn fresh_hypernet_keeps_sigma_bits() {
        let mut rng = SeededRng::new(1);
        let ad = StyleInjectAdapter::init(&spec(3, Variant::Full), &mut rng).unwrap();
        let mut tape = Tape::new();
        let code = tape.constant(rng_normal(4, vec![2, 2]));
        let sigma = tape.constant(rng_normal(5, vec![2, 1, 4]));
        let out = ad.hypernet_scale(&mut tape, code, sigma).unwrap();
        assert!(tape.tensor(out).bit_eq(&tape.tensor(sigma)));
    }

    #[test]
    fn hypernet_minus_one_erases_sigma() {
        let mut rng = SeededRng::new(1);
        let mut ad = StyleInjectAdapter::init(&spec(3, Variant::Full), &mut rng).unwrap();
        let (_, bias) = ad.hypernet_mut().unwrap();
        bias.assign(&[-1.0; 4]).unwrap();
        let mut tape = Tape::new();
        let code = tape.constant(rng_normal(4, vec![2, 2]));
        let sigma = tape.constant(rng_normal(5, vec![2, 1, 4]));
        let out = ad.hypernet_scale(&mut tape, code, sigma).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unnormalized_routes_rejected() {
        let mut rng = SeededRng::new(1);
        let ad = StyleInjectAdapter::init(&spec(2, Variant::Full), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rng_normal(4, vec![1, 3, 4]));
        let s = tape.constant(Tensor::new(vec![1, 2], vec![0.5, 0.6]).unwrap());
        assert!(matches!(ad.dma_delta(&mut tape, x, s), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_b_gives_zero_delta() {
        let mut rng = SeededRng::new(1);
        let ad = StyleInjectAdapter::init(&spec(3, Variant::Full), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rng_normal(4, vec![2, 3, 4]));
        let s = ad.route(&mut tape, x).unwrap();
        let d = ad.dma_delta(&mut tape, x, s).unwrap();
        assert!(tape.value(d).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dma_variant_has_no_hypernet() {
        let mut rng = SeededRng::new(1);
        let ad = StyleInjectAdapter::init(&spec(3, Variant::DmaOnly), &mut rng).unwrap();
        assert_eq!(ad.variant(), Variant::DmaOnly);
        assert_eq!(ad.param_count(), 3 * 8 + 8 + 3 * 4 + 3);
    }

    #[test]
    fn rank_guard() {
        let mut rng = SeededRng::new(1);
        let mut s = spec(2, Variant::Full);
        s.rank = 4;
        assert!(matches!(StyleInjectAdapter::init(&s, &mut rng), Err(Error::Config(_))));
    }
}
