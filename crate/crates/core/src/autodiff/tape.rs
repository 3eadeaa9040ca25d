use rand::Rng;

use super::tensor::{gemm, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Arena recording a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient on [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Matrix product. `a` is `[m, k]` or `[B, m, k]`; `b` is `[k, n]`
    /// (shared across the batch) or `[B, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k) = match sa.len() {
            2 => (1, sa[0], sa[1]),
            3 => (sa[0], sa[1], sa[2]),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let (b_batched, n) = match sb.len() {
            2 if sb[0] == k => (false, sb[1]),
            3 if sa.len() == 3 && sb[0] == batch && sb[1] == k => (true, sb[2]),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                let b_off = if b_batched { bi * k * n } else { 0 };
                gemm(
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[b_off..b_off + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), &[a, b]))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb) {
            Ok(())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    /// Elementwise sum; `b` may repeat over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let n = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % n])
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let n = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv[i % n])
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a, c), &[a])
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(Error::Usage(format!("softmax axis {axis} on rank {}", av.rank())));
        }
        let (outer, n, inner) = outer_inner(av.shape(), axis);
        let x = av.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (x[idx(k)] - max).exp();
                    y[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    y[idx(k)] /= z;
                }
            }
        }
        let value = Tensor::new(av.shape().to_vec(), y)?;
        Ok(self.push(value, Op::Softmax { x: a, axis }, &[a]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.last_dim();
        let mut y = av.data().to_vec();
        for row in y.chunks_mut(c) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), y).expect("same shape");
        self.push(value, Op::LogSoftmax(a), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Usage(format!("concat axis {axis} on rank {}", base.len())));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_inner(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::shape("slice", &s, &[axis, start, end]));
        }
        let (outer, n, inner) = outer_inner(&s, axis);
        let width = end - start;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = s;
        shape[axis] = width;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { x: a, axis, start }, &[a]))
    }

    /// Gathers rows of a `[rows, cols]` table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("embedding_lookup", &s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape("embedding_lookup", &s, &[id]));
            }
            out.extend_from_slice(&t[id * cols..(id + 1) * cols]);
        }
        let value = Tensor::new(vec![ids.len(), cols], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Normalises over the last axis, then applies `gamma`/`beta` of that size.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                y[r * c + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), y)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        let n = self.value(x).numel();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rate > 0.0 && rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (batch, m, n) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return Err(Error::shape("transpose", &s, &[])),
        };
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for bi in 0..batch {
            let off = bi * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[off + j * m + i] = x[off + i * n + j];
                }
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    /// Calling it twice without [`Tape::zero_grad`] adds the gradients again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k) = if sa.len() == 3 {
                    (sa[0], sa[1], sa[2])
                } else {
                    (1, sa[0], sa[1])
                };
                let b_batched = sb.len() == 3;
                let n = *sb.last().unwrap();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], av.len());
                    for bi in 0..batch {
                        let b_off = if b_batched { bi * k * n } else { 0 };
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[b_off..b_off + k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], bv.len());
                    for bi in 0..batch {
                        let b_off = if b_batched { bi * k * n } else { 0 };
                        gemm_tn(
                            &av[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[b_off..b_off + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if self.wants(*b) {
                    let n = self.value(*b).numel();
                    let gb = accumulate(&mut grads[b.0], n);
                    for (j, d) in g.iter().enumerate() {
                        gb[j % n] += d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let n = bv.len();
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (j, d) in g.iter().enumerate() {
                        ga[j] += d * bv[j % n];
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], n);
                    for (j, d) in g.iter().enumerate() {
                        gb[j % n] += d * av[j];
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d * c);
            }
            Op::Tanh(a) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * (1.0 - y[j] * y[j]);
                }
            }
            Op::Sigmoid(a) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            }
            Op::Relu(a) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                for j in 0..g.len() {
                    if y[j] > 0.0 {
                        ga[j] += g[j];
                    }
                }
            }
            Op::Exp(a) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * y[j];
                }
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let ga = accumulate(&mut grads[a.0], g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] / x[j];
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = outer_inner(node.value.shape(), *axis);
                let gx = accumulate(&mut grads[x.0], g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            gx[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = node.value.last_dim();
                let gx = accumulate(&mut grads[x.0], g.len());
                for r in 0..g.len() / c {
                    let gs: f64 = g[r * c..(r + 1) * c].iter().sum();
                    for j in r * c..(r + 1) * c {
                        gx[j] += g[j] - y[j].exp() * gs;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = outer_inner(node.value.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let n = self.shape(*v)[*axis];
                    if self.wants(*v) {
                        let gv = accumulate(&mut grads[v.0], outer * n * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            let dst = &mut gv[o * n * inner..(o + 1) * n * inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = outer_inner(self.shape(*x), *axis);
                let width = node.value.shape()[*axis];
                let gx = accumulate(&mut grads[x.0], outer * n * inner);
                for o in 0..outer {
                    let src = &g[o * width * inner..(o + 1) * width * inner];
                    let dst = &mut gx[(o * n + start) * inner..(o * n + start + width) * inner];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let cols = t.shape()[1];
                let gt = accumulate(&mut grads[table.0], t.numel());
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * cols..(r + 1) * cols];
                    let dst = &mut gt[id * cols..(id + 1) * cols];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.value.last_dim();
                let rows = g.len() / c;
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let gg = accumulate(&mut grads[gamma.0], c);
                    for j in 0..g.len() {
                        gg[j % c] += g[j] * xhat[j];
                    }
                }
                if self.wants(*beta) {
                    let gb = accumulate(&mut grads[beta.0], c);
                    for j in 0..g.len() {
                        gb[j % c] += g[j];
                    }
                }
                if self.wants(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for r in 0..rows {
                        let span = r * c..(r + 1) * c;
                        let dxhat: Vec<f64> = span.clone().map(|j| g[j] * gam[j % c]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxhat
                            .iter()
                            .zip(&xhat[span.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / c as f64;
                        for (k, j) in span.enumerate() {
                            gx[j] += inv_std[r] * (dxhat[k] - mean_d - xhat[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = accumulate(&mut grads[x.0], g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * mask[j];
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                let ga = accumulate(&mut grads[a.0], n);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Reshape(a) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (batch, m, n) = if s.len() == 3 {
                    (s[0], s[1], s[2])
                } else {
                    (1, s[0], s[1])
                };
                let ga = accumulate(&mut grads[a.0], g.len());
                for bi in 0..batch {
                    let off = bi * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            ga[off + i * n + j] += g[off + j * m + i];
                        }
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
