//! Low-rank update beside a frozen weight: `h* = W₀x + (α/r)·B(Ax)`.

use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::tensor::{SeededRng, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    layer: String,
    /// `r × k` down-projection.
    a: Tensor,
    /// `d × r` up-projection, zero at initialization.
    b: Tensor,
    alpha: f64,
}

pub(crate) fn check_rank(layer: &str, rank: usize, d_in: usize, d_out: usize) -> Result<()> {
    if rank == 0 || rank >= d_in.min(d_out) {
        return Err(Error::Config(format!(
            "rank {rank} for layer `{layer}` must satisfy 0 < r < min(d_in={d_in}, d_out={d_out})"
        )));
    }
    Ok(())
}

impl LoraAdapter {
    /// Gaussian `A` with std `1/r`, zero `B`.
    pub fn init(layer: &str, d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut SeededRng) -> Result<Self> {
        check_rank(layer, rank, d_in, d_out)?;
        let std = 1.0 / rank as f64;
        let a: Vec<f64> = rng.normals(rank * d_in).into_iter().map(|v| v * std).collect();
        Ok(LoraAdapter {
            layer: layer.to_string(),
            a: Tensor::new(vec![rank, d_in], a)?.trainable(),
            b: Tensor::zeros(vec![d_out, rank]).trainable(),
            alpha,
        })
    }

    pub fn from_parts(layer: &str, a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[0] != b.shape()[1] {
            return Err(Error::shape("lora", a.shape(), b.shape()));
        }
        Ok(LoraAdapter {
            layer: layer.to_string(),
            a: a.trainable(),
            b: b.trainable(),
            alpha,
        })
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn b_mut(&mut self) -> &mut Tensor {
        &mut self.b
    }

    /// `(α/r)·B(Ax)`.
    pub fn delta(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let names = self.param_names();
        let a = tape.param(&names[0], &self.a);
        let b = tape.param(&names[1], &self.b);
        let ax = tape.linear(x, a)?;
        let bax = tape.linear(ax, b)?;
        Ok(tape.scale(bax, self.scale()))
    }

    /// `W₀x + (α/r)·B(Ax)` for `x` with last axis `k` and `w0` stored `d × k`.
    pub fn forward(&self, tape: &mut Tape, w0: Var, x: Var) -> Result<Var> {
        let h = tape.linear(x, w0)?;
        let dh = self.delta(tape, x)?;
        tape.add(h, dh)
    }

    fn param_names(&self) -> [String; 2] {
        [format!("{}.lora.a", self.layer), format!("{}.lora.b", self.layer)]
    }
}

impl Parameterized for LoraAdapter {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let [a, b] = self.param_names();
        vec![(a, &self.a), (b, &self.b)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let [a, b] = self.param_names();
        vec![(a, &mut self.a), (b, &mut self.b)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng_normal;

    #[test]
    fn fresh_adapter_is_identity() {
        let mut rng = SeededRng::new(3);
        let lora = LoraAdapter::init("l", 4, 4, 2, 2.0, &mut rng).unwrap();
        let w0 = rng_normal(1, vec![4, 4]);
        let x = rng_normal(2, vec![3, 4]);
        let mut tape = Tape::new();
        let (wv, xv) = (tape.leaf(&w0), tape.leaf(&x));
        let out = lora.forward(&mut tape, wv, xv).unwrap();
        let base = tape.linear(xv, wv).unwrap();
        assert_eq!(tape.value(out), tape.value(base));
    }

    #[test]
    fn rank_must_be_below_both_dims() {
        let mut rng = SeededRng::new(3);
        assert!(matches!(LoraAdapter::init("l", 4, 4, 4, 4.0, &mut rng), Err(Error::Config(_))));
        assert!(matches!(LoraAdapter::init("l", 8, 2, 2, 2.0, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn pass_through_construction() {
        // W₀ = 0, α/r = 1, A and B identity-padded: output is x projected onto
        // the first r coordinates.
        let eye_a = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        let eye_b = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let lora = LoraAdapter::from_parts("l", eye_a, eye_b, 2.0).unwrap();
        let mut tape = Tape::new();
        let w0 = tape.constant(Tensor::zeros(vec![4, 4]));
        let x = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = lora.forward(&mut tape, w0, x).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn gradients_reach_only_a_and_b() {
        let mut rng = SeededRng::new(5);
        let mut lora = LoraAdapter::init("l", 4, 4, 2, 2.0, &mut rng).unwrap();
        lora.b_mut().assign(&rng.normals(8)).unwrap();
        let mut tape = Tape::new();
        let w0 = tape.param("w0", &rng_normal(1, vec![4, 4]));
        let x = tape.constant(rng_normal(2, vec![3, 4]));
        let out = lora.forward(&mut tape, w0, x).unwrap();
        let loss = tape.mean_all(out).unwrap();
        tape.backward(loss).unwrap();
        let grads = tape.param_grads();
        let names: Vec<&str> = grads.keys().map(String::as_str).collect();
        assert_eq!(names, vec!["l.lora.a", "l.lora.b"]);
    }
}
