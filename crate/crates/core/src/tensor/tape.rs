//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every operation appends a node holding its output value; `backward` walks
//! the record in exact reverse order, so a node's gradient is complete before
//! it is propagated to its inputs.

use super::kernels::{conv2d_backward_opt, pyramid_pool, pyramid_pool_backward};
use super::{axis_split, conv2d, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Log(Var),
    SoftmaxChannel(Var),
    LogSoftmaxChannel(Var),
    MeanAxis(Var, usize),
    Sum(Var),
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Transpose2(Var),
    PyramidPool {
        src: Var,
        divisions: Vec<usize>,
        square: bool,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor<S> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<S> {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, len: usize, f: impl Fn(usize) -> S) {
    match slot {
        Some(g) => {
            for (i, v) in g.iter_mut().enumerate() {
                *v += f(i);
            }
        }
        None => *slot = Some((0..len).map(f).collect()),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input; it receives a gradient iff `requires_grad` is set on it.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        let needs_grad = value.requires_grad();
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Whether gradients flow into `v`.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).scale(c);
        let ng = self.needs(&[a]);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        let ng = self.needs(&[a]);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).log();
        let ng = self.needs(&[a]);
        self.push(value, Op::Log(a), ng)
    }

    pub fn softmax_channel(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).softmax_channel()?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::SoftmaxChannel(a), ng))
    }

    pub fn log_softmax_channel(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).log_softmax_channel()?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::LogSoftmaxChannel(a), ng))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.value(a).mean_axis(axis)?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::MeanAxis(a, axis), ng))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice(axis, start, end)?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Slice { src: a, axis, start }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let refs: Vec<&Tensor<S>> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Tensor::concat(&refs, axis)?;
        let ng = self.needs(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.reshape(a, vec![n])
    }

    pub fn transpose2(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose2()?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Transpose2(a), ng))
    }

    /// Fused spatial-pyramid POD pooling; see [`pyramid_pool`].
    pub fn pyramid_pool(&mut self, a: Var, divisions: &[usize], square: bool) -> Result<Var> {
        let value = pyramid_pool(self.value(a), divisions, square)?;
        let ng = self.needs(&[a]);
        Ok(self.push(
            value,
            Op::PyramidPool {
                src: a,
                divisions: divisions.to_vec(),
                square,
            },
            ng,
        ))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let value = conv2d(self.value(input), self.value(kernel), self.value(bias), stride, padding)?;
        let ng = self.needs(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            ng,
        ))
    }

    /// Propagates d(loss)/d(node) to every node that needs a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::invalid("backward on a non-finite loss"));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        // leaves keep their gradients; interior nodes were consumed
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        let len = |v: &Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], len(a), |i| g[i]);
                }
                if needs(b) {
                    accumulate(&mut grads[b.0], len(b), |i| g[i]);
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], len(a), |i| g[i]);
                }
                if needs(b) {
                    accumulate(&mut grads[b.0], len(b), |i| -g[i]);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(a) {
                    accumulate(&mut grads[a.0], len(a), |i| g[i] * bv[i]);
                }
                if needs(b) {
                    accumulate(&mut grads[b.0], len(b), |i| g[i] * av[i]);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(&mut grads[a.0], len(a), |i| g[i] * c);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                accumulate(&mut grads[a.0], len(a), |i| {
                    if x[i] > S::zero() {
                        g[i]
                    } else {
                        S::zero()
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                accumulate(&mut grads[a.0], len(a), |i| g[i] / x[i]);
            }
            Op::SoftmaxChannel(a) => {
                let y = node.value.data();
                let (_, k, inner) = axis_split(node.value.shape(), 0);
                let mut dot = vec![S::zero(); inner];
                for c in 0..k {
                    for p in 0..inner {
                        dot[p] += g[c * inner + p] * y[c * inner + p];
                    }
                }
                accumulate(&mut grads[a.0], len(a), |i| y[i] * (g[i] - dot[i % inner]));
            }
            Op::LogSoftmaxChannel(a) => {
                let y = node.value.data();
                let (_, k, inner) = axis_split(node.value.shape(), 0);
                let mut total = vec![S::zero(); inner];
                for c in 0..k {
                    for p in 0..inner {
                        total[p] += g[c * inner + p];
                    }
                }
                accumulate(&mut grads[a.0], len(a), |i| g[i] - y[i].exp() * total[i % inner]);
            }
            Op::MeanAxis(a, axis) => {
                let (_, n, inner) = axis_split(self.shape(*a), *axis);
                let norm = S::one() / S::of_usize(n);
                accumulate(&mut grads[a.0], len(a), |i| {
                    let o = i / (n * inner);
                    let r = i % inner;
                    g[o * inner + r] * norm
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                accumulate(&mut grads[a.0], len(a), |_| g0);
            }
            Op::Slice { src, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(*src), *axis);
                let width = node.value.shape()[*axis];
                let slot = grads[src.0].get_or_insert_with(|| vec![S::zero(); outer * n * inner]);
                for o in 0..outer {
                    let dst = &mut slot[(o * n + start) * inner..(o * n + start + width) * inner];
                    let src_g = &g[o * width * inner..(o + 1) * width * inner];
                    for (d, &s) in dst.iter_mut().zip(src_g) {
                        *d += s;
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[*axis];
                    if needs(p) {
                        let slot = grads[p.0].get_or_insert_with(|| vec![S::zero(); outer * w * inner]);
                        for o in 0..outer {
                            let from = &g[(o * total + offset) * inner..(o * total + offset + w) * inner];
                            for (d, &s) in slot[o * w * inner..(o + 1) * w * inner].iter_mut().zip(from) {
                                *d += s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                accumulate(&mut grads[a.0], len(a), |i| g[i]);
            }
            Op::Transpose2(a) => {
                // node is [c, r]; source is [r, c]
                let (c, r) = (node.value.shape()[0], node.value.shape()[1]);
                accumulate(&mut grads[a.0], len(a), |i| {
                    let (row, col) = (i / c, i % c);
                    g[col * r + row]
                });
            }
            Op::PyramidPool { src, divisions, square } => {
                let go = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                let gx = pyramid_pool_backward(self.value(*src), divisions, *square, &go)?;
                let d = gx.data();
                accumulate(&mut grads[src.0], d.len(), |i| d[i]);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let go = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                let cg = conv2d_backward_opt(
                    self.value(*input),
                    self.value(*kernel),
                    self.value(*bias),
                    *stride,
                    *padding,
                    &go,
                    needs(input),
                )?;
                for (v, t) in [(input, cg.input), (kernel, cg.kernel), (bias, cg.bias)] {
                    if needs(v) {
                        let d = t.data();
                        accumulate(&mut grads[v.0], d.len(), |i| d[i]);
                    }
                }
            }
        }
        Ok(())
    }
}
