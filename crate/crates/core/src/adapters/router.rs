use crate::adapters::manifest::LayerKind;
use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::tensor::{SeededRng, Tape, Tensor, Var};

/// How instance features are pooled before routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Mean over tokens (sequence inputs of linear layers).
    TokenMean,
    /// Sum over spatial positions (1×1 convolution inputs).
    SpatialSum,
}

impl From<LayerKind> for Pooling {
    fn from(kind: LayerKind) -> Self {
        match kind {
            LayerKind::Linear => Pooling::TokenMean,
            LayerKind::Conv1x1 => Pooling::SpatialSum,
        }
    }
}

pub const ROUTER_INIT_STD: f64 = 0.02;

/// Maps pooled instance features (width `k`) to a probability vector over
/// `n` styles: `s = softmax(W·pool(x) + c)`. One `s` per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleRouter {
    layer: String,
    /// `n × k`
    weight: Tensor,
    /// `n`
    bias: Tensor,
    pooling: Pooling,
}

impl StyleRouter {
    pub fn init(layer: &str, d_in: usize, styles: usize, pooling: Pooling, rng: &mut SeededRng) -> Result<Self> {
        if styles < 1 {
            return Err(Error::Config("router needs at least one style".into()));
        }
        let w: Vec<f64> = rng
            .normals(styles * d_in)
            .into_iter()
            .map(|v| v * ROUTER_INIT_STD)
            .collect();
        Ok(StyleRouter {
            layer: layer.to_string(),
            weight: Tensor::new(vec![styles, d_in], w)?.trainable(),
            bias: Tensor::zeros(vec![styles]).trainable(),
            pooling,
        })
    }

    pub fn from_parts(layer: &str, weight: Tensor, bias: Tensor, pooling: Pooling) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::shape("router", weight.shape(), bias.shape()));
        }
        Ok(StyleRouter {
            layer: layer.to_string(),
            weight: weight.trainable(),
            bias: bias.trainable(),
            pooling,
        })
    }

    pub fn styles(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        &mut self.weight
    }

    /// Pools `x` of shape `B × P × k` to `B × k`.
    pub fn pool(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        pool(tape, x, self.pooling)
    }

    /// Style probabilities `B × n` for features `x` of shape `B × P × k`.
    pub fn route(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let pooled = self.pool(tape, x)?;
        let names = self.param_names();
        let w = tape.param(&names[0], &self.weight);
        let c = tape.param(&names[1], &self.bias);
        let logits = tape.linear(pooled, w)?;
        let shape = tape.shape(logits).to_vec();
        let c = tape.reshape(c, &[1, shape[1]])?;
        let logits = tape.add_bcast(logits, c)?;
        tape.softmax(logits, 1)
    }

    fn param_names(&self) -> [String; 2] {
        [
            format!("{}.router.weight", self.layer),
            format!("{}.router.bias", self.layer),
        ]
    }
}

pub(crate) fn pool(tape: &mut Tape, x: Var, pooling: Pooling) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("route (expects B×P×k)", &s, &[]));
    }
    let reduced = match pooling {
        Pooling::TokenMean => tape.mean_axes(x, &[1])?,
        Pooling::SpatialSum => tape.sum_axes(x, &[1])?,
    };
    tape.reshape(reduced, &[s[0], s[2]])
}

impl Parameterized for StyleRouter {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let [w, b] = self.param_names();
        vec![(w, &self.weight), (b, &self.bias)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let [w, b] = self.param_names();
        vec![(w, &mut self.weight), (b, &mut self.bias)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng_normal;

    #[test]
    fn zero_weights_route_uniformly() {
        let r = StyleRouter::from_parts("l", Tensor::zeros(vec![4, 3]), Tensor::zeros(vec![4]), Pooling::TokenMean).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rng_normal(1, vec![2, 5, 3]));
        let s = r.route(&mut tape, x).unwrap();
        assert_eq!(tape.shape(s), &[2, 4]);
        assert!(tape.value(s).iter().all(|&v| v == 0.25));
    }

    #[test]
    fn single_style_is_certain() {
        let mut rng = SeededRng::new(2);
        let r = StyleRouter::init("l", 3, 1, Pooling::SpatialSum, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rng_normal(1, vec![3, 4, 3]));
        let s = r.route(&mut tape, x).unwrap();
        assert_eq!(tape.value(s), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_styles_rejected() {
        let mut rng = SeededRng::new(2);
        assert!(matches!(
            StyleRouter::init("l", 3, 0, Pooling::TokenMean, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_unpooled_input() {
        let mut rng = SeededRng::new(2);
        let r = StyleRouter::init("l", 3, 2, Pooling::TokenMean, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rng_normal(1, vec![4, 3]));
        assert!(r.route(&mut tape, x).is_err());
    }
}
