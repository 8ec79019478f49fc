use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::tensor::Tensor;

/// Anything that owns named tensors.
pub trait Parameterized {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Adds tape gradients (as returned by [`crate::tensor::Tape::param_grads`])
/// into the matching parameters. Parameters absent from `grads` are left as is.
pub fn accumulate_grads(params: Vec<(String, &mut Tensor)>, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    for (name, t) in params {
        if let Some(g) = grads.get(&name) {
            t.accumulate_grad(g)?;
        }
    }
    Ok(())
}

/// SHA-256 over names, shapes and value bits, hex encoded.
pub fn param_hash(params: &[(String, &Tensor)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
