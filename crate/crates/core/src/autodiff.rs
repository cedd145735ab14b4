//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of one forward computation. Values
//! are computed eagerly; [`Tape::backward`] walks the tape in reverse and
//! returns the gradient of a scalar output with respect to every trainable
//! [`Parameter`](crate::params::Parameter) that was read into the tape.
//!
//! Broadcasting binary ops follow numpy rules (right-aligned shapes).
//! Non-finite values are recorded at the first op that produces one and are
//! surfaced as [`Error::NonFinite`] by [`Tape::check_finite`] and
//! [`Tape::backward`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{broadcast_shape, broadcast_strides, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    SumAll(Var),
    SumAxis(Var, usize),
    Softmax(Var),
    Conv1d(Var, Var, usize),
    Scan(Var, Var),
    CosineRows(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Clamp(..) => "clamp",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(_) => "reshape",
            Op::Concat(..) => "concat",
            Op::Narrow(..) => "narrow",
            Op::SumAll(_) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::Softmax(_) => "softmax",
            Op::Conv1d(..) => "conv1d_dilated",
            Op::Scan(..) => "scan",
            Op::CosineRows(..) => "cosine",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward pass, keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self` (keys are merged).
    pub fn merge(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            accumulate(&mut self.grads, id, g);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
}

fn accumulate(map: &mut BTreeMap<ParamId, Tensor>, id: ParamId, g: &Tensor) {
    match map.get_mut(&id) {
        Some(acc) => add_into(acc.data_mut(), g.data()),
        None => {
            map.insert(id, g.clone());
        }
    }
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Records one forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    non_finite: Option<(&'static str, usize)>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Fails if any recorded op produced NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((op, node)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some((op.name(), id));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Reads a parameter into the tape. Gradients flow to it only when the
    /// parameter is marked trainable in `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value().clone(), Op::Param(id), p.trainable())
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(va.shape().to_vec(), data)
        } else {
            let shape = broadcast_shape(va.shape(), vb.shape())
                .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", va.shape(), vb.shape()));
            let mut data = Vec::with_capacity(shape.iter().product());
            for_each_broadcast(&shape, va.shape(), vb.shape(), |_, ia, ib| {
                data.push(f(va.data()[ia], vb.data()[ib]))
            });
            Tensor::from_parts(shape, data)
        };
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.nodes[a.0].value.map(f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp bounds reversed");
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    // ---- linear algebra ----------------------------------------------

    /// `a[.., k] @ b[k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(vb.rank(), 2, "matmul rhs must be 2-D, got {:?}", vb.shape());
        let k = *va.shape().last().expect("matmul lhs rank 0");
        assert_eq!(k, vb.shape()[0], "matmul {:?} @ {:?}", va.shape(), vb.shape());
        let n = vb.shape()[1];
        let rows = va.len() / k;
        let mut out = vec![0.0; rows * n];
        gemm(va.data(), vb.data(), &mut out, rows, k, n);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), rg)
    }

    /// `a[B.., m, k] @ b[B.., k, n] -> [B.., m, n]` with identical batch axes.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(sa.len() >= 2 && sa.len() == sb.len(), "batch_matmul {sa:?} @ {sb:?}");
        let r = sa.len();
        assert_eq!(sa[..r - 2], sb[..r - 2], "batch_matmul batch axes {sa:?} @ {sb:?}");
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        assert_eq!(k, sb[r - 2], "batch_matmul inner {sa:?} @ {sb:?}");
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(
                &va.data()[bi * m * k..(bi + 1) * m * k],
                &vb.data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa.to_vec();
        shape[r - 1] = n;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(shape, out), Op::BatchMatMul(a, b), rg)
    }

    // ---- shape -------------------------------------------------------

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let out = self.nodes[a.0].value.permute(axes);
        let rg = self.rg(&[a]);
        self.push(out, Op::Permute(a, axes.to_vec()), rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Var {
        let r = self.shape(a).len();
        assert!(r >= 2);
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.nodes[a.0]
            .value
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (i, (&x, &y)) in s.iter().zip(&first).enumerate() {
                assert!(i == axis || x == y, "concat shape mismatch {s:?} vs {first:?}");
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = &self.nodes[p.0].value;
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec(), axis), rg)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.shape();
        assert!(start + len <= s[axis] && len > 0, "narrow out of range on {s:?}");
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let dim = s[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, data), Op::Narrow(a, axis, start), rg)
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.shape();
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let dim = s[axis];
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &v.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                add_into(&mut data[o * inner..(o + 1) * inner], src);
            }
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, data), Op::SumAxis(a, axis), rg)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let dim = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / dim)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_lastdim(&self.nodes[a.0].value);
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    // ---- fused sequence ops -----------------------------------------

    /// Causal dilated convolution along the last axis of `x[.., L]` with a
    /// shared `kernel[K]`: `y[t] = Σ_q kernel[q]·x[t − q·dilation]`, reading
    /// zeros before the start of the sequence.
    pub fn conv1d_dilated(&mut self, x: Var, kernel: Var, dilation: usize) -> Var {
        assert!(dilation >= 1, "dilation must be positive");
        let (vx, vk) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value);
        assert_eq!(vk.rank(), 1, "kernel must be 1-D");
        let l = *vx.shape().last().unwrap();
        let rows = vx.len() / l;
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let xs = &vx.data()[r * l..(r + 1) * l];
            let ys = &mut out[r * l..(r + 1) * l];
            for (q, &kq) in vk.data().iter().enumerate() {
                let lag = q * dilation;
                if lag >= l {
                    break;
                }
                for t in lag..l {
                    ys[t] += kq * xs[t - lag];
                }
            }
        }
        let rg = self.rg(&[x, kernel]);
        self.push(
            Tensor::from_parts(vx.shape().to_vec(), out),
            Op::Conv1d(x, kernel, dilation),
            rg,
        )
    }

    /// Diagonal linear recurrence over the second-to-last axis:
    /// `h[t] = a[t] ⊙ h[t−1] + u[t]`, `h[−1] = 0`, for `a, u: [.., W, d]`.
    pub fn scan(&mut self, a: Var, u: Var) -> Var {
        let (va, vu) = (&self.nodes[a.0].value, &self.nodes[u.0].value);
        assert_eq!(va.shape(), vu.shape(), "scan operand shapes differ");
        let s = va.shape();
        assert!(s.len() >= 2);
        let (w, d) = (s[s.len() - 2], s[s.len() - 1]);
        let rows = va.len() / (w * d);
        let mut h = vec![0.0; va.len()];
        for r in 0..rows {
            let base = r * w * d;
            h[base..base + d].copy_from_slice(&vu.data()[base..base + d]);
            for t in 1..w {
                let cur = base + t * d;
                let prev = cur - d;
                for i in 0..d {
                    h[cur + i] = va.data()[cur + i] * h[prev + i] + vu.data()[cur + i];
                }
            }
        }
        let rg = self.rg(&[a, u]);
        self.push(Tensor::from_parts(s.to_vec(), h), Op::Scan(a, u), rg)
    }

    /// Row-wise cosine similarity over the last axis. Rows with zero norm
    /// yield 0 and pass no gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "cosine operand shapes differ");
        let d = *va.shape().last().unwrap();
        let rows = va.len() / d;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (x, y) = (&va.data()[r * d..(r + 1) * d], &vb.data()[r * d..(r + 1) * d]);
            let (nx, ny) = (norm(x), norm(y));
            if nx == 0.0 || ny == 0.0 {
                log::warn!("zero-norm embedding in cosine similarity; treating cosine as 0");
                out.push(0.0);
            } else {
                out.push(dot(x, y) / (nx * ny));
            }
        }
        let shape = va.shape()[..va.rank() - 1].to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(shape, out), Op::CosineRows(a, b), rg)
    }

    // ---- composites --------------------------------------------------

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    /// Sum of squared differences over all elements.
    pub fn sse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.sum(sq)
    }

    /// `x @ w + b` for `x[.., in]`, `w[in, out]`, `b[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add(y, b)
    }

    // ---- backward ----------------------------------------------------

    /// Differentiates the scalar `loss` and returns gradients for every
    /// trainable parameter read into this tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => add_into(acc.data_mut(), t.data()),
                slot @ None => *slot = Some(t),
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let zip = |x: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            let data = g.data().iter().zip(x.data()).map(|(&gi, &xi)| f(gi, xi)).collect();
            Tensor::from_parts(g.shape().to_vec(), data)
        };

        match &node.op {
            Op::Constant => {}
            Op::Param(id) => accumulate(&mut out.grads, *id, g),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    send(*a, reduce_to(g, val(*a).shape(), 1.0));
                }
                if wants(*b) {
                    send(*b, reduce_to(g, val(*b).shape(), sign));
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let is_div = matches!(node.op, Op::Div(..));
                let (mut ga, mut gb) = (
                    wants(*a).then(|| vec![0.0; va.len()]),
                    wants(*b).then(|| vec![0.0; vb.len()]),
                );
                for_each_broadcast(g.shape(), va.shape(), vb.shape(), |o, ia, ib| {
                    let (x, y, gi) = (va.data()[ia], vb.data()[ib], g.data()[o]);
                    if is_div {
                        if let Some(ga) = ga.as_mut() {
                            ga[ia] += gi / y;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[ib] -= gi * x / (y * y);
                        }
                    } else {
                        if let Some(ga) = ga.as_mut() {
                            ga[ia] += gi * y;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[ib] += gi * x;
                        }
                    }
                });
                if let Some(ga) = ga {
                    send(*a, Tensor::from_parts(va.shape().to_vec(), ga));
                }
                if let Some(gb) = gb {
                    send(*b, Tensor::from_parts(vb.shape().to_vec(), gb));
                }
            }
            Op::Scale(a, c) => send(*a, g.map(|x| c * x)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                send(*a, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Exp(a) => send(*a, zip(&node.value, &|gi, y| gi * y)),
            Op::Ln(a) => send(*a, zip(val(*a), &|gi, x| gi / x)),
            Op::Relu(a) => send(*a, zip(val(*a), &|gi, x| if x > 0.0 { gi } else { 0.0 })),
            Op::Tanh(a) => send(*a, zip(&node.value, &|gi, y| gi * (1.0 - y * y))),
            Op::Sigmoid(a) => send(*a, zip(&node.value, &|gi, y| gi * y * (1.0 - y))),
            Op::Softplus(a) => send(*a, zip(val(*a), &|gi, x| gi * sigmoid(x))),
            Op::Square(a) => send(*a, zip(val(*a), &|gi, x| 2.0 * gi * x)),
            Op::Sqrt(a) => send(*a, zip(&node.value, &|gi, y| gi * 0.5 / y)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                send(*a, zip(val(*a), &|gi, x| if x >= lo && x <= hi { gi } else { 0.0 }))
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let rows = va.len() / k;
                if wants(*a) {
                    let mut ga = vec![0.0; va.len()];
                    gemm_nt(g.data(), vb.data(), &mut ga, rows, n, k);
                    send(*a, Tensor::from_parts(va.shape().to_vec(), ga));
                }
                if wants(*b) {
                    let mut gb = vec![0.0; vb.len()];
                    gemm_tn(va.data(), g.data(), &mut gb, rows, k, n);
                    send(*b, Tensor::from_parts(vb.shape().to_vec(), gb));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let r = va.rank();
                let (m, k, n) = (va.shape()[r - 2], va.shape()[r - 1], vb.shape()[r - 1]);
                let batch = va.len() / (m * k);
                if wants(*a) {
                    let mut ga = vec![0.0; va.len()];
                    for bi in 0..batch {
                        gemm_nt(
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &vb.data()[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    send(*a, Tensor::from_parts(va.shape().to_vec(), ga));
                }
                if wants(*b) {
                    let mut gb = vec![0.0; vb.len()];
                    for bi in 0..batch {
                        gemm_tn(
                            &va.data()[bi * m * k..(bi + 1) * m * k],
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    send(*b, Tensor::from_parts(vb.shape().to_vec(), gb));
                }
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                send(*a, g.permute(&inv));
            }
            Op::Concat(parts, axis) => {
                let s = g.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis];
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape().to_vec();
                    let dim = ps[*axis];
                    if wants(p) {
                        let mut data = Vec::with_capacity(outer * dim * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + dim * inner]);
                        }
                        send(p, Tensor::from_parts(ps, data));
                    }
                    offset += dim;
                }
            }
            Op::Narrow(a, axis, start) => {
                let s = val(*a).shape().to_vec();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let (dim, len) = (s[*axis], g.shape()[*axis]);
                let mut data = vec![0.0; val(*a).len()];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                send(*a, Tensor::from_parts(s, data));
            }
            Op::SumAll(a) => {
                let v = val(*a);
                send(*a, Tensor::full(v.shape(), g.item()));
            }
            Op::SumAxis(a, axis) => {
                let s = val(*a).shape().to_vec();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let dim = s[*axis];
                let mut data = Vec::with_capacity(outer * dim * inner);
                for o in 0..outer {
                    for _ in 0..dim {
                        data.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                send(*a, Tensor::from_parts(s, data));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let w = *y.shape().last().unwrap();
                let mut data = vec![0.0; y.len()];
                for r in 0..y.len() / w {
                    let ys = &y.data()[r * w..(r + 1) * w];
                    let gs = &g.data()[r * w..(r + 1) * w];
                    let inner = dot(ys, gs);
                    for i in 0..w {
                        data[r * w + i] = ys[i] * (gs[i] - inner);
                    }
                }
                send(*a, Tensor::from_parts(y.shape().to_vec(), data));
            }
            Op::Conv1d(x, kernel, dilation) => {
                let (vx, vk) = (val(*x), val(*kernel));
                let l = *vx.shape().last().unwrap();
                let rows = vx.len() / l;
                let mut gx = wants(*x).then(|| vec![0.0; vx.len()]);
                let mut gk = vec![0.0; vk.len()];
                for r in 0..rows {
                    let xs = &vx.data()[r * l..(r + 1) * l];
                    let gs = &g.data()[r * l..(r + 1) * l];
                    for (q, &kq) in vk.data().iter().enumerate() {
                        let lag = q * dilation;
                        if lag >= l {
                            break;
                        }
                        let mut acc = 0.0;
                        for t in lag..l {
                            acc += xs[t - lag] * gs[t];
                        }
                        gk[q] += acc;
                        if let Some(gx) = gx.as_mut() {
                            let gxr = &mut gx[r * l..(r + 1) * l];
                            for t in lag..l {
                                gxr[t - lag] += kq * gs[t];
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    send(*x, Tensor::from_parts(vx.shape().to_vec(), gx));
                }
                if wants(*kernel) {
                    send(*kernel, Tensor::from_parts(vk.shape().to_vec(), gk));
                }
            }
            Op::Scan(a, u) => {
                let (va, h) = (val(*a), &node.value);
                let s = va.shape();
                let (w, d) = (s[s.len() - 2], s[s.len() - 1]);
                let rows = va.len() / (w * d);
                let mut gu = vec![0.0; va.len()];
                let mut ga = vec![0.0; va.len()];
                for r in 0..rows {
                    let base = r * w * d;
                    for t in (0..w).rev() {
                        let cur = base + t * d;
                        for i in 0..d {
                            let mut acc = g.data()[cur + i];
                            if t + 1 < w {
                                acc += va.data()[cur + d + i] * gu[cur + d + i];
                            }
                            gu[cur + i] = acc;
                            if t > 0 {
                                ga[cur + i] = acc * h.data()[cur - d + i];
                            }
                        }
                    }
                }
                if wants(*a) {
                    send(*a, Tensor::from_parts(s.to_vec(), ga));
                }
                if wants(*u) {
                    send(*u, Tensor::from_parts(s.to_vec(), gu));
                }
            }
            Op::CosineRows(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let d = *va.shape().last().unwrap();
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for r in 0..va.len() / d {
                    let (x, y) = (&va.data()[r * d..(r + 1) * d], &vb.data()[r * d..(r + 1) * d]);
                    let (nx, ny) = (norm(x), norm(y));
                    if nx == 0.0 || ny == 0.0 {
                        continue;
                    }
                    let c = node.value.data()[r];
                    let gi = g.data()[r];
                    for i in 0..d {
                        ga[r * d + i] = gi * (y[i] / (nx * ny) - c * x[i] / (nx * nx));
                        gb[r * d + i] = gi * (x[i] / (nx * ny) - c * y[i] / (ny * ny));
                    }
                }
                if wants(*a) {
                    send(*a, Tensor::from_parts(va.shape().to_vec(), ga));
                }
                if wants(*b) {
                    send(*b, Tensor::from_parts(vb.shape().to_vec(), gb));
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let w = *x.shape().last().expect("softmax of a scalar");
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / w {
        let row = &x.data()[r * w..(r + 1) * w];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[r * w..(r + 1) * w];
        let mut z = 0.0;
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - max).exp();
            z += *o;
        }
        dst.iter_mut().for_each(|o| *o /= z);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// `c[m, n] += a[m, k] · b[k, n]`.
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(bp) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m, n] += a[m, k] · b[n, k]ᵀ`.
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k, n] += a[m, k]ᵀ · b[m, n]`.
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let bi = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let cp = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in cp.iter_mut().zip(bi) {
                *cv += aip * bv;
            }
        }
    }
}

/// Visits every element of the broadcast shape `out` with the flat offsets
/// of the corresponding elements of `a` and `b`.
fn for_each_broadcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let total: usize = out.iter().product();
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums `g` (shaped like the broadcast output) down to `target`.
fn reduce_to(g: &Tensor, target: &[usize], sign: f64) -> Tensor {
    if g.shape() == target {
        let data = g.data().iter().map(|&x| sign * x).collect();
        return Tensor::from_parts(target.to_vec(), data);
    }
    let mut data = vec![0.0; target.iter().product()];
    for_each_broadcast(g.shape(), target, &[], |o, it, _| {
        data[it] += sign * g.data()[o];
    });
    Tensor::from_parts(target.to_vec(), data)
}
