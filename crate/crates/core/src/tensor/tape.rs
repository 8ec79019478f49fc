//! Wengert-list tape for reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so every node's inputs precede it
//! and a single reverse sweep visits each node once. Leaf gradients persist on
//! the tape and accumulate across repeated [`Tape::backward`] calls until
//! [`Tape::zero_grads`].

use std::collections::BTreeMap;

use super::kernels;
use super::shape::{self, broadcast_map, numel, reduced_shape, split_axis};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Tanh(Var),
    SqrtFloor { x: Var, eps: f64 },
    Reshape(Var),
    /// `map[i]` is the source index of output element `i`.
    Broadcast { x: Var, map: Vec<usize> },
    /// `map[i]` is the output index input element `i` is summed into.
    SumAxes { x: Var, map: Vec<usize> },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, p: usize },
    Transpose { x: Var, batch: usize, m: usize, p: usize },
    Linear { x: Var, w: Var, rows: usize, k: usize, d: usize },
    Softmax { x: Var, axis: usize },
    Embedding { table: Var, ids: Vec<usize>, width: usize },
    Concat0(Vec<Var>),
    Narrow { x: Var, axis: usize, start: usize },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Runs [`Tape::backward`]; free-function form.
pub fn backward(tape: &mut Tape, loss: Var) -> Result<()> {
    tape.backward(loss)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = match &op {
            Op::Leaf => false,
            op => inputs(op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t` as a leaf; differentiable when `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf);
        self.nodes[v.0].requires_grad = t.requires_grad();
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf)
    }

    /// Records a named parameter leaf. Trainable parameters are remembered
    /// so [`Tape::param_grads`] can hand their gradients back by name.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        let v = self.leaf(t);
        if t.requires_grad() {
            self.params.push((name.to_string(), v));
        }
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold valid shapes")
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Gradients of trainable named parameters, summed when a name was
    /// recorded more than once.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (name, v) in &self.params {
            let n = &self.nodes[v.0];
            let g = n.grad.clone().unwrap_or_else(|| vec![0.0; n.value.len()]);
            match out.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }

    // ---- elementwise -------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, rec))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, rec: Op) -> Var {
        let value = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, rec)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    /// `max(sqrt(x), eps)`; the floor branch passes no gradient.
    pub fn sqrt_floor(&mut self, x: Var, eps: f64) -> Var {
        self.map(x, |v| v.max(0.0).sqrt().max(eps), Op::SqrtFloor { x, eps })
    }

    /// `a + b` with `b` broadcast up to the shape of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast_to(b, &shape)?;
        self.add(a, bb)
    }

    /// `a ⊙ b` with `b` broadcast up to the shape of `a`.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast_to(b, &shape)?;
        self.mul(a, bb)
    }

    // ---- shape -------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[x.0].value.len() || shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = self.nodes[x.0].value.clone();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x)))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let map = broadcast_map(self.shape(x), shape)?;
        let src = &self.nodes[x.0].value;
        let value = map.iter().map(|&i| src[i]).collect();
        Ok(self.push(shape.to_vec(), value, Op::Broadcast { x, map }))
    }

    /// Concatenation along axis 0.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Degenerate("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(Error::shape("concat0", self.shape(*first), self.shape(p)));
            }
            rows += self.shape(p)[0];
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(shape, value, Op::Concat0(parts.to_vec())))
    }

    /// Slice `start..start + len` along `axis`; the axis is kept.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("narrow", &shape, &[axis, start, len]));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(out_shape, value, Op::Narrow { x, axis, start }))
    }

    // ---- reductions --------------------------------------------------------

    /// Sum over `axes`, reduced extents kept as 1.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let out_shape = reduced_shape(&in_shape, axes)?;
        let map = broadcast_map(&out_shape, &in_shape)?;
        let value = kernels::reduce_sum(&self.nodes[x.0].value, &map, numel(&out_shape));
        Ok(self.push(out_shape, value, Op::SumAxes { x, map }))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let in_n = self.nodes[x.0].value.len();
        let s = self.sum_axes(x, axes)?;
        let count = in_n / self.nodes[s.0].value.len();
        Ok(self.scale(s, 1.0 / count as f64))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.sum_axes(x, &axes)?;
        self.reshape(s, &[1])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        let s = self.sum_all(x)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Population mean and variance over `axes` (divide by count).
    pub fn moments(&mut self, x: Var, axes: &[usize]) -> Result<(Var, Var)> {
        let mean = self.mean_axes(x, axes)?;
        let centered = {
            let shape = self.shape(x).to_vec();
            let mb = self.broadcast_to(mean, &shape)?;
            self.sub(x, mb)?
        };
        let sq = self.square(centered);
        let var = self.mean_axes(sq, axes)?;
        Ok((mean, var))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        self.mean_all(sq)
    }

    // ---- linear algebra ----------------------------------------------------

    /// Matrix product over the last two axes. Leading axes are batch axes and
    /// must agree; 2-D inputs are a batch of one.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, p) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch = numel(&sa[..r - 2]);
        let value = kernels::batched_matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, batch, m, k, p);
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, p]);
        Ok(self.push(shape, value, Op::MatMul { a, b, batch, m, k, p }))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let r = s.len();
        if r < 2 {
            return Err(Error::shape("transpose", &s, &[]));
        }
        let (m, p) = (s[r - 2], s[r - 1]);
        let batch = numel(&s[..r - 2]);
        let value = kernels::transpose_last2(&self.nodes[x.0].value, batch, m, p);
        let mut shape = s[..r - 2].to_vec();
        shape.extend([p, m]);
        Ok(self.push(shape, value, Op::Transpose { x, batch, m, p }))
    }

    /// `x · wᵀ` over the last axis of `x`, with `w` stored as `d_out × d_in`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.last() != Some(&sw[1]) {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (k, d) = (sw[1], sw[0]);
        let rows = numel(&sx) / k;
        let value = kernels::linear(&self.nodes[x.0].value, &self.nodes[w.0].value, rows, k, d);
        let mut shape = sx;
        *shape.last_mut().expect("non-empty") = d;
        Ok(self.push(shape, value, Op::Linear { x, w, rows, k, d }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Degenerate(format!("softmax axis {axis} out of range for {s:?}")));
        }
        if self.nodes[x.0].value.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let value = kernels::softmax(&self.nodes[x.0].value, &s, axis);
        Ok(self.push(s, value, Op::Softmax { x, axis }))
    }

    /// Row lookup: `table` is `vocab × width`, result is `ids.len() × width`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("embedding", &s, &[]));
        }
        let (vocab, width) = (s[0], s[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!("condition id {bad} outside vocabulary of {vocab}")));
        }
        if ids.is_empty() {
            return Err(Error::Degenerate("embedding lookup with no ids".into()));
        }
        let src = &self.nodes[table.0].value;
        let mut value = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            value.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        Ok(self.push(
            vec![ids.len(), width],
            value,
            Op::Embedding { table, ids: ids.to_vec(), width },
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a single-element `loss`. Leaf gradients add onto
    /// whatever earlier sweeps left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (input, contrib) in self.vjp(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn vjp(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(bv).map(|(g, y)| g * y).collect()),
                    (*b, g.iter().zip(av).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(bv).map(|(g, y)| g / y).collect()),
                    (
                        *b,
                        g.iter()
                            .zip(av.iter().zip(bv))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect(),
                    ),
                ]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::AddScalar(x) | Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Square(x) => vec![(*x, g.iter().zip(val(*x)).map(|(g, x)| 2.0 * g * x).collect())],
            Op::Tanh(x) => vec![(
                *x,
                g.iter().zip(&node.value).map(|(g, y)| g * (1.0 - y * y)).collect(),
            )],
            Op::SqrtFloor { x, eps } => vec![(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, v)| {
                        let r = v.max(0.0).sqrt();
                        if r > *eps {
                            g * 0.5 / r
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )],
            Op::Broadcast { x, map } => {
                vec![(*x, kernels::reduce_sum(g, map, val(*x).len()))]
            }
            Op::SumAxes { x, map } => vec![(*x, map.iter().map(|&o| g[o]).collect())],
            Op::MatMul { a, b, batch, m, k, p } => {
                let (batch, m, k, p) = (*batch, *m, *k, *p);
                let mut out = Vec::with_capacity(2);
                if wants(*a) {
                    let bt = kernels::transpose_last2(val(*b), batch, k, p);
                    out.push((*a, kernels::batched_matmul(g, &bt, batch, m, p, k)));
                }
                if wants(*b) {
                    let at = kernels::transpose_last2(val(*a), batch, m, k);
                    out.push((*b, kernels::batched_matmul(&at, g, batch, k, m, p)));
                }
                out
            }
            Op::Transpose { x, batch, m, p } => {
                vec![(*x, kernels::transpose_last2(g, *batch, *p, *m))]
            }
            Op::Linear { x, w, rows, k, d } => {
                let (rows, k, d) = (*rows, *k, *d);
                let mut out = Vec::with_capacity(2);
                if wants(*x) {
                    // gx = g · w, with w as d × k
                    out.push((*x, kernels::batched_matmul(g, val(*w), 1, rows, d, k)));
                }
                if wants(*w) {
                    let gt = kernels::transpose_last2(g, 1, rows, d);
                    out.push((*w, kernels::batched_matmul(&gt, val(*x), 1, d, rows, k)));
                }
                out
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += g[at(j)] * y[at(j)];
                        }
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Embedding { table, ids, width } => {
                let mut gt = vec![0.0; val(*table).len()];
                for (row, &i) in ids.iter().enumerate() {
                    for c in 0..*width {
                        gt[i * width + c] += g[row * width + c];
                    }
                }
                vec![(*table, gt)]
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = val(p).len();
                        let piece = g[off..off + n].to_vec();
                        off += n;
                        (p, piece)
                    })
                    .collect()
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = &self.nodes[x.0].shape;
                let (outer, ext, inner) = split_axis(in_shape, *axis);
                let len = node.shape[*axis];
                let mut gx = vec![0.0; shape::numel(in_shape)];
                for o in 0..outer {
                    let dst = o * ext * inner + start * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(*x, gx)]
            }
        }
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
        Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Square(x)
        | Op::Tanh(x)
        | Op::Reshape(x)
        | Op::SqrtFloor { x, .. }
        | Op::Broadcast { x, .. }
        | Op::SumAxes { x, .. }
        | Op::Transpose { x, .. }
        | Op::Softmax { x, .. }
        | Op::Narrow { x, .. } => vec![*x],
        Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::Linear { x, w, .. } => vec![*x, *w],
        Op::Embedding { table, .. } => vec![*table],
        Op::Concat0(parts) => parts.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng_normal;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_form_gradient_is_input() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[3], &[0.5, -1.0, 2.0]).trainable());
        let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum_all(p).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0, 3.0]);
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn self_distance_has_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(&rng_normal(1, vec![2, 3]).trainable());
        let loss = tape.mse(a, a).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(a).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[2], &[1.0, 2.0]).trainable());
        let sq = tape.square(w);
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[4.0, 8.0]);
        tape.zero_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[2], &[1.0, 2.0]).trainable());
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_shape_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
        let w = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(matches!(tape.linear(a, w), Err(Error::Shape { .. })));
    }

    #[test]
    fn named_param_grads_sum_duplicates() {
        let mut tape = Tape::new();
        let w = t(&[1], &[3.0]).trainable();
        let a = tape.param("w", &w);
        let b = tape.param("w", &w);
        let p = tape.mul(a, b).unwrap();
        tape.backward(p).unwrap();
        assert_eq!(tape.param_grads()["w"], vec![6.0]);
    }

    #[test]
    fn frozen_params_not_reported() {
        let mut tape = Tape::new();
        let w = t(&[1], &[3.0]);
        let a = tape.param("frozen", &w);
        let s = tape.square(a);
        tape.backward(s).unwrap();
        assert!(tape.param_grads().is_empty());
    }

    #[test]
    fn narrow_and_concat_round_trip() {
        let mut tape = Tape::new();
        let x = tape.leaf(&rng_normal(4, vec![3, 4]).trainable());
        let a = tape.narrow(x, 1, 0, 1).unwrap();
        let b = tape.narrow(x, 1, 1, 3).unwrap();
        assert_eq!(tape.shape(b), &[3, 3]);
        let at = tape.transpose_last2(a).unwrap();
        let bt = tape.transpose_last2(b).unwrap();
        let c = tape.concat0(&[at, bt]).unwrap();
        let ct = tape.transpose_last2(c).unwrap();
        assert_eq!(tape.value(ct), tape.value(x));
    }
}
