//! Shape arithmetic shared by the value-level kernels and the tape.

use crate::error::{Error, Result};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

/// Shape after reducing `axes` with the reduced extents kept as 1.
pub fn reduced_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    if axes.is_empty() {
        return Err(Error::Degenerate("reduction over an empty axis list".into()));
    }
    let mut out = shape.to_vec();
    for (i, &a) in axes.iter().enumerate() {
        if a >= shape.len() {
            return Err(Error::Degenerate(format!(
                "axis {a} out of range for shape {shape:?}"
            )));
        }
        if axes[..i].contains(&a) {
            return Err(Error::Degenerate(format!("axis {a} repeated in {axes:?}")));
        }
        if shape[a] == 0 {
            return Err(Error::Degenerate(format!(
                "reduction over zero-extent axis {a} of {shape:?}"
            )));
        }
        out[a] = 1;
    }
    Ok(out)
}

/// For every flat index of `big`, the flat index of `small` it maps to when
/// `small` is broadcast up to `big`. Both shapes have equal rank and every
/// extent of `small` is either 1 or equal to the matching extent of `big`.
pub fn broadcast_map(small: &[usize], big: &[usize]) -> Result<Vec<usize>> {
    if small.len() != big.len()
        || small
            .iter()
            .zip(big)
            .any(|(&s, &b)| s != b && s != 1)
    {
        return Err(Error::shape("broadcast", small, big));
    }
    let small_strides = strides(small);
    let n = numel(big);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; big.len()];
    for _ in 0..n {
        let mut off = 0;
        for d in 0..big.len() {
            if small[d] != 1 {
                off += idx[d] * small_strides[d];
            }
        }
        map.push(off);
        for d in (0..big.len()).rev() {
            idx[d] += 1;
            if idx[d] < big[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(map)
}

/// Splits `shape` around `axis` into (outer, extent, inner) products.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}
