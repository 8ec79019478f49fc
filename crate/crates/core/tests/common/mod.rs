//! Plain-loop reference implementations shared by the integration tests.
//! Nothing here goes through the tape or the library kernels.
#![allow(dead_code)]

use styleinject::tensor::{SeededRng, Tensor};

pub fn random(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normals(n).into_iter().map(|v| v * std).collect()).unwrap()
}

/// `y[i][o] = Σ_j x[i][j]·w[o][j]` with `w` stored `out × in`.
pub fn linear_rows(x: &[f64], rows: usize, w: &Tensor) -> Vec<f64> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), rows * inp);
    let mut y = vec![0.0; rows * out];
    for i in 0..rows {
        for o in 0..out {
            let mut acc = 0.0;
            for j in 0..inp {
                acc += x[i * inp + j] * w.data()[o * inp + j];
            }
            y[i * out + o] = acc;
        }
    }
    y
}

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z = compensated_sum(e.iter().copied());
    e.iter().map(|v| v / z).collect()
}

/// Two-pass mean and population variance.
pub fn two_pass(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = compensated_sum(xs.iter().copied()) / n;
    let var = compensated_sum(xs.iter().map(|x| (x - mean) * (x - mean))) / n;
    (mean, var)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn named<'a>(params: &'a [(String, &'a Tensor)], suffix: &str) -> &'a Tensor {
    params
        .iter()
        .find(|(n, _)| n.ends_with(suffix))
        .map(|(_, t)| *t)
        .unwrap_or_else(|| panic!("no parameter ending in {suffix}"))
}
