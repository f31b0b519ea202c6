//! Dense tensors and a define-by-run reverse-mode differentiation tape.
//!
//! Every forward pass records its operations on a fresh [`Tape`]. Values are
//! computed eagerly; [`Tape::backward`] then walks the recorded nodes in
//! reverse order exactly once and accumulates gradients additively, so a
//! node consumed by several downstream operations receives the sum of their
//! partial gradients.
//!
//! Broadcasting is deliberately narrow: [`Tape::add_broadcast`] adds a tensor
//! whose shape is a suffix of the other operand (bias and positional tables),
//! [`Tape::expand_last`] repeats a trailing singleton axis, and scalars enter
//! through [`Tape::scale`] / [`Tape::add_scalar`].

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::TensorError;

type TResult<T> = std::result::Result<T, TensorError>;

/// Dense row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TResult<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.contains(&0) {
            return Err(TensorError::Contract(format!(
                "shape {shape:?} does not describe {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn reshape(mut self, shape: &[usize]) -> TResult<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), index.len());
    index
        .iter()
        .zip(shape)
        .fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d);
            acc * d + i
        })
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanLast(Var),
    ExpandLast(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation graph in topological (creation) order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf that gradients flow into.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> TResult<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> TResult<Var> {
        self.same_shape(op, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rec, rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, rec: Op) -> Var {
        let va = self.value(a);
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.any_grad(&[a]);
        self.push(value, rec, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> TResult<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TResult<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TResult<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> TResult<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `a + b` where `b.shape` is a trailing suffix of `a.shape`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> TResult<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::Shape {
                op: "add_broadcast",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let vb = &self.value(b).data;
        let n = vb.len();
        let va = self.value(a);
        let data = va
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb[i % n])
            .collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::AddBroadcast(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    /// `[.., k] x [k, n] -> [.., n]`: every leading row of `a` times the
    /// shared matrix `b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> TResult<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let k = sb[0];
        let n = sb[1];
        let rows = self.value(a).len() / k;
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; rows * n];
        gemm_nn(&self.value(a).data, &self.value(b).data, &mut out, rows, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), rg))
    }

    /// Batched product `[.., m, k] x [.., k, n] -> [.., m, n]` with identical
    /// leading extents.
    pub fn bmm(&mut self, a: Var, b: Var) -> TResult<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(TensorError::Shape {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut shape = sa[..r - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (&self.value(a).data, &self.value(b).data);
        for g in 0..batch {
            gemm_nn(
                &da[g * m * k..(g + 1) * m * k],
                &db[g * k * n..(g + 1) * k * n],
                &mut out[g * m * n..(g + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, Op::BatchMatMul(a, b), rg))
    }

    /// `out[i] = x[index[i]]`, shaped `shape`. Backward scatter-adds.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> TResult<Var> {
        let src = &self.value(x).data;
        if shape.iter().product::<usize>() != index.len() {
            return Err(TensorError::Contract(format!(
                "gather shape {shape:?} does not hold {} indices",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(TensorError::Contract(format!(
                "gather index {bad} out of range for {} values",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Gather(x, index),
            rg,
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> TResult<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Contract(format!(
                "invalid permutation {axes:?} for shape {shape:?}"
            )));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let total: usize = shape.iter().product();
        let mut index = Vec::with_capacity(total);
        let mut counter = vec![0usize; shape.len()];
        for _ in 0..total {
            index.push(
                counter
                    .iter()
                    .zip(axes)
                    .map(|(&c, &a)| c * in_strides[a])
                    .sum(),
            );
            for d in (0..counter.len()).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        self.gather(x, index, &out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> TResult<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::Contract("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> TResult<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Softmax over the last axis with row-max subtraction.
    pub fn softmax(&mut self, x: Var) -> TResult<Var> {
        let vx = self.value(x);
        if !vx.all_finite() {
            return Err(TensorError::NonFinite("softmax"));
        }
        let c = *vx.shape.last().unwrap();
        let mut data = vx.data.clone();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis (population variance), then
    /// `gain * x_hat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> TResult<Var> {
        let d = *self.shape(x).last().unwrap();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let vx = self.value(x);
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let rows = vx.len() / d;
        let mut normalized = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                normalized[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let value = Tensor {
            shape: vx.shape.clone(),
            data: out,
        };
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, |v| v * normal_cdf(v), Op::Gelu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data.iter().sum::<f64>() / v.len() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Mean over the last axis, keeping it as a singleton: `[.., n] -> [.., 1]`.
    pub fn mean_last(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = *v.shape.last().unwrap();
        let data = v
            .data
            .chunks(n)
            .map(|row| row.iter().sum::<f64>() / n as f64)
            .collect();
        let mut shape = v.shape.clone();
        *shape.last_mut().unwrap() = 1;
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, Op::MeanLast(x), rg)
    }

    /// Repeats a trailing singleton axis `n` times: `[.., 1] -> [.., n]`.
    pub fn expand_last(&mut self, x: Var, n: usize) -> TResult<Var> {
        let v = self.value(x);
        if v.shape.last() != Some(&1) {
            return Err(TensorError::Shape {
                op: "expand_last",
                lhs: v.shape.clone(),
                rhs: vec![n],
            });
        }
        let data = v
            .data
            .iter()
            .flat_map(|&s| std::iter::repeat_n(s, n))
            .collect();
        let mut shape = v.shape.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::ExpandLast(x), rg))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of earlier calls are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> TResult<()> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, wants(*a), g.len(), |out| add_into(out, g));
                accumulate(grads, *b, wants(*b), g.len(), |out| add_into(out, g));
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, wants(*a), g.len(), |out| add_into(out, g));
                accumulate(grads, *b, wants(*b), g.len(), |out| {
                    out.iter_mut().zip(g).for_each(|(o, &d)| *o -= d)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&val(*a).data, &val(*b).data);
                accumulate(grads, *a, wants(*a), g.len(), |out| {
                    for i in 0..out.len() {
                        out[i] += g[i] * vb[i];
                    }
                });
                accumulate(grads, *b, wants(*b), g.len(), |out| {
                    for i in 0..out.len() {
                        out[i] += g[i] * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (&val(*a).data, &val(*b).data);
                accumulate(grads, *a, wants(*a), g.len(), |out| {
                    for i in 0..out.len() {
                        out[i] += g[i] / vb[i];
                    }
                });
                accumulate(grads, *b, wants(*b), g.len(), |out| {
                    for i in 0..out.len() {
                        out[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                });
            }
            Op::AddBroadcast(a, b) => {
                accumulate(grads, *a, wants(*a), g.len(), |out| add_into(out, g));
                let n = val(*b).len();
                accumulate(grads, *b, wants(*b), n, |out| {
                    for (i, &d) in g.iter().enumerate() {
                        out[i % n] += d;
                    }
                });
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, wants(*a), g.len(), |out| {
                    out.iter_mut().zip(g).for_each(|(o, &d)| *o += c * d)
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                accumulate(grads, *a, wants(*a), g.len(), |out| add_into(out, g));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (k, n) = (vb.shape[0], vb.shape[1]);
                let rows = va.len() / k;
                accumulate(grads, *a, wants(*a), va.len(), |out| {
                    gemm_nt(g, &vb.data, out, rows, n, k)
                });
                accumulate(grads, *b, wants(*b), vb.len(), |out| {
                    gemm_tn(&va.data, g, out, rows, k, n)
                });
            }
            Op::BatchMatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let r = va.shape.len();
                let (m, k, n) = (va.shape[r - 2], va.shape[r - 1], vb.shape[r - 1]);
                let batch = va.len() / (m * k);
                accumulate(grads, *a, wants(*a), va.len(), |out| {
                    for t in 0..batch {
                        gemm_nt(
                            &g[t * m * n..(t + 1) * m * n],
                            &vb.data[t * k * n..(t + 1) * k * n],
                            &mut out[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                accumulate(grads, *b, wants(*b), vb.len(), |out| {
                    for t in 0..batch {
                        gemm_tn(
                            &va.data[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut out[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Gather(x, index) => {
                accumulate(grads, *x, wants(*x), val(*x).len(), |out| {
                    for (&src, &d) in index.iter().zip(g) {
                        out[src] += d;
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value.data;
                let c = *node.value.shape.last().unwrap();
                accumulate(grads, *x, wants(*x), y.len(), |out| {
                    for r in 0..y.len() / c {
                        let ys = &y[r * c..(r + 1) * c];
                        let gs = &g[r * c..(r + 1) * c];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            out[r * c + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gv = &val(*gain).data;
                let d = gv.len();
                let rows = inv_std.len();
                accumulate(grads, *x, wants(*x), g.len(), |out| {
                    let mut gx = vec![0.0; d];
                    for r in 0..rows {
                        let xh = &normalized[r * d..(r + 1) * d];
                        let gs = &g[r * d..(r + 1) * d];
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for j in 0..d {
                            gx[j] = gs[j] * gv[j];
                            mean_g += gx[j];
                            mean_gx += gx[j] * xh[j];
                        }
                        mean_g /= d as f64;
                        mean_gx /= d as f64;
                        for j in 0..d {
                            out[r * d + j] += inv_std[r] * (gx[j] - mean_g - xh[j] * mean_gx);
                        }
                    }
                });
                accumulate(grads, *gain, wants(*gain), d, |out| {
                    for (i, (&gi, &xh)) in g.iter().zip(normalized).enumerate() {
                        out[i % d] += gi * xh;
                    }
                });
                accumulate(grads, *bias, wants(*bias), d, |out| {
                    for (i, &gi) in g.iter().enumerate() {
                        out[i % d] += gi;
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = &val(*x).data;
                accumulate(grads, *x, wants(*x), g.len(), |out| {
                    for i in 0..out.len() {
                        let v = vx[i];
                        out[i] += g[i] * (normal_cdf(v) + v * normal_pdf(v));
                    }
                });
            }
            Op::Abs(x) => {
                let vx = &val(*x).data;
                accumulate(grads, *x, wants(*x), g.len(), |out| {
                    for i in 0..out.len() {
                        let s = if vx[i] > 0.0 {
                            1.0
                        } else if vx[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        out[i] += g[i] * s;
                    }
                });
            }
            Op::Square(x) => {
                let vx = &val(*x).data;
                accumulate(grads, *x, wants(*x), g.len(), |out| {
                    for i in 0..out.len() {
                        out[i] += 2.0 * vx[i] * g[i];
                    }
                });
            }
            Op::Sqrt(x) => {
                let y = &node.value.data;
                accumulate(grads, *x, wants(*x), g.len(), |out| {
                    for i in 0..out.len() {
                        out[i] += g[i] * 0.5 / y[i];
                    }
                });
            }
            Op::SumAll(x) => {
                let n = val(*x).len();
                accumulate(grads, *x, wants(*x), n, |out| {
                    out.iter_mut().for_each(|o| *o += g[0])
                });
            }
            Op::MeanAll(x) => {
                let n = val(*x).len();
                let d = g[0] / n as f64;
                accumulate(grads, *x, wants(*x), n, |out| {
                    out.iter_mut().for_each(|o| *o += d)
                });
            }
            Op::MeanLast(x) => {
                let vx = val(*x);
                let n = *vx.shape.last().unwrap();
                accumulate(grads, *x, wants(*x), vx.len(), |out| {
                    for (i, o) in out.iter_mut().enumerate() {
                        *o += g[i / n] / n as f64;
                    }
                });
            }
            Op::ExpandLast(x) => {
                let n = *node.value.shape.last().unwrap();
                accumulate(grads, *x, wants(*x), val(*x).len(), |out| {
                    for (i, &d) in g.iter().enumerate() {
                        out[i / n] += d;
                    }
                });
            }
        }
    }
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    wanted: bool,
    len: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !wanted {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn add_into(out: &mut [f64], g: &[f64]) {
    out.iter_mut().zip(g).for_each(|(o, &d)| *o += d);
}

/// `c[m x n] += a[m x k] * b[k x n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m x k] += a[m x n] * b[k x n]^T`
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k x n] += a[m x k]^T * b[m x n]`
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// Standard normal CDF via `erf`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Central-difference gradient of a scalar function, one coordinate at a
/// time: `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe);
        probe.data[i] = orig - h;
        let down = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Worst-case mismatch between an analytic and a numeric gradient.
///
/// Each element is scored as `|a - n| / max(|a|, |n|)`; elements where the
/// absolute difference is at most `abs_floor` score zero.
pub fn gradient_mismatch(analytic: &Tensor, numeric: &Tensor, abs_floor: f64) -> f64 {
    analytic
        .data
        .iter()
        .zip(&numeric.data)
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if diff <= abs_floor {
                0.0
            } else {
                diff / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}
