//! Dense kernels over flat row-major buffers. Every sum runs in sequential
//! index order so results are bit-stable from run to run.

use super::shape::split_axis;

/// `out[b] = a[b] (m×k) · c[b] (k×p)` for `batch` independent products.
pub fn batched_matmul(a: &[f64], c: &[f64], batch: usize, m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * p];
    for b in 0..batch {
        let ao = b * m * k;
        let co = b * k * p;
        let oo = b * m * p;
        for i in 0..m {
            for j in 0..p {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a[ao + i * k + l] * c[co + l * p + j];
                }
                out[oo + i * p + j] = acc;
            }
        }
    }
    out
}

/// Swaps the last two axes of a `batch × m × p` buffer.
pub fn transpose_last2(x: &[f64], batch: usize, m: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let o = b * m * p;
        for i in 0..m {
            for j in 0..p {
                out[o + j * m + i] = x[o + i * p + j];
            }
        }
    }
    out
}

/// `out[n, j] = Σ_i x[n, i] · w[j, i]` with `w` stored as `d × k`.
pub fn linear(x: &[f64], w: &[f64], rows: usize, k: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * d];
    for n in 0..rows {
        let xr = &x[n * k..(n + 1) * k];
        for j in 0..d {
            let wr = &w[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for i in 0..k {
                acc += xr[i] * wr[i];
            }
            out[n * d + j] = acc;
        }
    }
    out
}

pub fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    out
}

/// Sums `x` into `out_len` buckets following `map` (input index → output index).
pub fn reduce_sum(x: &[f64], map: &[usize], out_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_len];
    for (i, &o) in map.iter().enumerate() {
        out[o] += x[i];
    }
    out
}
