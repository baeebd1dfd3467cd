//! Append-only computation graph with eager forward evaluation.
//!
//! Every op computes its value when it is recorded, so "forward" is the act of
//! building the graph. `backward` walks the nodes in exact reverse insertion
//! order, which is a valid reverse topological order because inputs always
//! precede the nodes that consume them.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    LogSumExp(Var, usize),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    BroadcastTo(Var),
    Slice(Var, usize, usize),
    Conv2d(Var, Var, Option<Var>),
    AvgPool2(Var),
    Upsample2(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::LogSumExp(a, _)
            | Op::Reshape(a)
            | Op::BroadcastTo(a)
            | Op::Slice(a, _, _)
            | Op::AvgPool2(a)
            | Op::Upsample2(a) => vec![*a],
            Op::Concat(xs, _) => xs.clone(),
            Op::Conv2d(x, w, b) => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode differentiation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    named: Vec<(String, Var)>,
}

/// Gradients produced by [`Graph::backward`], one slot per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    named: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient of the output with respect to `var`, if `var` requires grad.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.named
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Named gradients in registration order.
    pub fn named(&self) -> impl Iterator<Item = (&str, Option<&Tensor>)> {
        self.named.iter().map(|(n, v)| (n.as_str(), self.get(*v)))
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

impl Graph {
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

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let needs_grad = kind.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, false)
    }

    /// Input that receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// Named input that receives a gradient, retrievable via [`Gradients::by_name`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        let v = self.push_leaf(value, true)?;
        self.named.push((name.into(), v));
        Ok(v)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let plan = kernels::Broadcast::new(va.shape(), vb.shape()).ok_or_else(|| {
            Error::ShapeMismatch {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            }
        })?;
        let (da, db) = (va.data(), vb.data());
        let mut out = vec![0.0; plan.numel()];
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        plan.for_each(|o, i, j| out[o] = f(da[i], db[j]));
        let value = Tensor::new(plan.out_shape().to_vec(), out)?;
        self.push(name, value, Op::Binary(kind, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let (name, f): (&'static str, fn(f64) -> f64) = match kind {
            UnaryKind::Exp => ("exp", f64::exp),
            UnaryKind::Log => ("log", f64::ln),
            UnaryKind::Tanh => ("tanh", f64::tanh),
            UnaryKind::Sigmoid => ("sigmoid", kernels::sigmoid),
            UnaryKind::Softplus => ("softplus", kernels::softplus),
            UnaryKind::Relu => ("relu", |x| x.max(0.0)),
        };
        let value = self.nodes[a.0].value.map(f);
        self.push(name, value, Op::Unary(kind, a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| x * factor);
        self.push("scale", value, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| x + c);
        self.push("add_scalar", value, Op::AddScalar(a))
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| x.clamp(lo, hi));
        self.push("clamp", value, Op::Clamp(a, lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let ok = va.ndim() == 2 && vb.ndim() == 2 && va.shape()[1] == vb.shape()[0];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let out = kernels::matmul(va.data(), vb.data(), n, k, m);
        let value = Tensor::new(vec![n, m], out)?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a))
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: shape.to_vec(),
                rhs: vec![axis],
            });
        }
        Ok(())
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", a, axis)?;
        let t = &self.nodes[a.0].value;
        let out = kernels::reduce_axis(t.data(), axis_split(t.shape(), axis));
        let value = Tensor::new(removed_axis(t.shape(), axis), out)?;
        self.push("sum_axis", value, Op::SumAxis(a, axis))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", a, axis)?;
        let t = &self.nodes[a.0].value;
        let n = t.shape()[axis] as f64;
        let mut out = kernels::reduce_axis(t.data(), axis_split(t.shape(), axis));
        out.iter_mut().for_each(|v| *v /= n);
        let value = Tensor::new(removed_axis(t.shape(), axis), out)?;
        self.push("mean_axis", value, Op::MeanAxis(a, axis))
    }

    /// Max-shifted log-sum-exp over `axis`, removing it.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("logsumexp", a, axis)?;
        let t = &self.nodes[a.0].value;
        let out = kernels::logsumexp_axis(t.data(), axis_split(t.shape(), axis));
        let value = Tensor::new(removed_axis(t.shape(), axis), out)?;
        self.push("logsumexp", value, Op::LogSumExp(a, axis))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (p, q))| i == axis || p == q);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = &self.nodes[x.0].value;
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push("concat", value, Op::Concat(xs.to_vec(), axis))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(a))
    }

    /// Broadcast to `shape` using right-aligned broadcasting rules.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let plan = kernels::Broadcast::new(t.shape(), shape)
            .filter(|p| p.out_shape() == shape)
            .ok_or_else(|| Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            })?;
        let src = t.data();
        let mut out = vec![0.0; plan.numel()];
        plan.for_each(|o, i, _| out[o] = src[i]);
        let value = Tensor::new(shape.to_vec(), out)?;
        self.push("broadcast_to", value, Op::BroadcastTo(a))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", a, axis)?;
        let t = &self.nodes[a.0].value;
        if start >= end || end > t.shape()[axis] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: t.shape().to_vec(),
                rhs: vec![axis, start, end],
            });
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        let value = Tensor::new(shape, out)?;
        self.push("slice", value, Op::Slice(a, start, axis))
    }

    /// Stride-1 "same" convolution of a `[C_in, H, W]` input with a
    /// `[C_out, C_in, k, k]` kernel (odd `k`, zero padding `k / 2`).
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ok = xs.len() == 3
            && ws.len() == 4
            && ws[1] == xs[0]
            && ws[2] == ws[3]
            && ws[2] % 2 == 1;
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: ws,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let dims = kernels::ConvDims {
            c_in: xs[0],
            c_out: ws[0],
            h: xs[1],
            w: xs[2],
            k: ws[2],
        };
        let out = kernels::conv2d_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            bias.map(|b| self.nodes[b.0].value.data()),
            &dims,
        );
        let value = Tensor::new(vec![dims.c_out, dims.h, dims.w], out)?;
        self.push("conv2d", value, Op::Conv2d(x, w, bias))
    }

    /// 2x2 average pooling of a `[C, H, W]` tensor with even `H`, `W`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "avg_pool2",
                lhs: s,
                rhs: vec![2, 2],
            });
        }
        let out = kernels::avg_pool2(self.nodes[x.0].value.data(), s[0], s[1], s[2]);
        let value = Tensor::new(vec![s[0], s[1] / 2, s[2] / 2], out)?;
        self.push("avg_pool2", value, Op::AvgPool2(x))
    }

    /// 2x nearest-neighbour upsampling of a `[C, H, W]` tensor.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "upsample2",
                lhs: s,
                rhs: vec![3],
            });
        }
        let out = kernels::upsample2(self.nodes[x.0].value.data(), s[0], s[1], s[2]);
        let value = Tensor::new(vec![s[0], s[1] * 2, s[2] * 2], out)?;
        self.push("upsample2", value, Op::Upsample2(x))
    }

    /// Reverse-mode sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_value = &self.nodes[output.0].value;
        if out_value.numel() != 1 {
            return Err(Error::NonScalarOutput(out_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.needs_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                (Op::Leaf, None) if node.needs_grad => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            named: self.named.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let plan = kernels::Broadcast::new(va.shape(), vb.shape()).expect("checked");
                let (da, db) = (va.data(), vb.data());
                if wants(*a) {
                    acc(*a, &mut |ga| match kind {
                        BinaryKind::Add | BinaryKind::Sub => plan.for_each(|o, i, _| ga[i] += g[o]),
                        BinaryKind::Mul => plan.for_each(|o, i, j| ga[i] += g[o] * db[j]),
                        BinaryKind::Div => plan.for_each(|o, i, j| ga[i] += g[o] / db[j]),
                    });
                }
                if wants(*b) {
                    acc(*b, &mut |gb| match kind {
                        BinaryKind::Add => plan.for_each(|o, _, j| gb[j] += g[o]),
                        BinaryKind::Sub => plan.for_each(|o, _, j| gb[j] -= g[o]),
                        BinaryKind::Mul => plan.for_each(|o, i, j| gb[j] += g[o] * da[i]),
                        BinaryKind::Div => {
                            plan.for_each(|o, i, j| gb[j] -= g[o] * da[i] / (db[j] * db[j]))
                        }
                    });
                }
            }
            Op::Unary(kind, a) => {
                let x = val(*a).data();
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        let d = match kind {
                            UnaryKind::Exp => y[i],
                            UnaryKind::Log => 1.0 / x[i],
                            UnaryKind::Tanh => 1.0 - y[i] * y[i],
                            UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryKind::Softplus => kernels::sigmoid(x[i]),
                            UnaryKind::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        ga[i] += g[i] * d;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(s, gi)| *s += gi * c)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(s, gi)| *s += gi)
            }),
            Op::Clamp(a, lo, hi) => {
                let x = val(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if wants(*a) {
                    acc(*a, &mut |ga| kernels::matmul_grad_lhs(g, vb.data(), ga, n, k, m));
                }
                if wants(*b) {
                    acc(*b, &mut |gb| kernels::matmul_grad_rhs(va.data(), g, gb, n, k, m));
                }
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let shape = val(*a).shape();
                let (outer, len, inner) = axis_split(shape, *axis);
                let scale = match node.op {
                    Op::MeanAxis(..) => 1.0 / len as f64,
                    _ => 1.0,
                };
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                ga[(o * len + l) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::LogSumExp(a, axis) => {
                let x = val(*a);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let (xd, y) = (x.data(), node.value.data());
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                let src = (o * len + l) * inner + i;
                                let dst = o * inner + i;
                                ga[src] += g[dst] * (xd[src] - y[dst]).exp();
                            }
                        }
                    }
                });
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = val(x).shape()[*axis];
                    acc(x, &mut |gx| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for t in 0..len * inner {
                                gx[dst + t] += g[src + t];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::BroadcastTo(a) => {
                let plan = kernels::Broadcast::new(val(*a).shape(), node.value.shape())
                    .expect("checked");
                acc(*a, &mut |ga| plan.for_each(|o, i, _| ga[i] += g[o]));
            }
            Op::Slice(a, start, axis) => {
                let (outer, len, inner) = axis_split(val(*a).shape(), *axis);
                let width = node.value.shape()[*axis];
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        let src = o * width * inner;
                        for t in 0..width * inner {
                            ga[dst + t] += g[src + t];
                        }
                    }
                });
            }
            Op::Conv2d(x, w, bias) => {
                let (xs, ws) = (val(*x).shape(), val(*w).shape());
                let dims = kernels::ConvDims {
                    c_in: xs[0],
                    c_out: ws[0],
                    h: xs[1],
                    w: xs[2],
                    k: ws[2],
                };
                if wants(*x) {
                    acc(*x, &mut |gx| {
                        kernels::conv2d_grad_input(g, val(*w).data(), gx, &dims)
                    });
                }
                if wants(*w) {
                    acc(*w, &mut |gw| {
                        kernels::conv2d_grad_weight(g, val(*x).data(), gw, &dims)
                    });
                }
                if let Some(b) = bias {
                    let plane = dims.h * dims.w;
                    acc(*b, &mut |gb| {
                        for (co, s) in gb.iter_mut().enumerate() {
                            *s += g[co * plane..(co + 1) * plane].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::AvgPool2(a) => {
                let s = val(*a).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                acc(*a, &mut |ga| kernels::avg_pool2_grad(g, ga, c, h, w));
            }
            Op::Upsample2(a) => {
                let s = val(*a).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                acc(*a, &mut |ga| kernels::upsample2_grad(g, ga, c, h, w));
            }
        }
    }
}
