//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s during one
//! forward pass. [`Tape::backward`] then walks the record in reverse and
//! returns the gradient of a scalar loss with respect to every leaf that was
//! registered as trainable. Tapes are cheap and meant to be rebuilt for each
//! forward pass; a tape can be differentiated once.
//!
//! ```
//! use purify_core::numcore::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let theta = tape.variable(Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
//! let loss = theta.mul(theta).unwrap().sum().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(theta).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::cell::{Cell, RefCell};

use super::kernels::{self, gemm, ConvGeom, MatRef};
use super::params::ParamVector;
use super::tensor::{Scalar, Tensor};
use crate::error::{invalid, Error, Result};

/// Records a forward computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    differentiated: Cell<bool>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: Scalar },
    AddScalar { a: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Exp { a: usize },
    Clip { a: usize, lo: Scalar, hi: Scalar },
    Reshape { a: usize },
    ConcatCols { a: usize, b: usize, left: usize, right: usize },
    Conv2d { x: usize, w: usize, geom: ConvGeom, cols: Option<Vec<Scalar>> },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<Scalar> },
    LogSoftmaxPick { logits: usize, labels: Vec<usize>, probs: Vec<Scalar> },
    Mean { a: usize },
    Sum { a: usize },
    LogSumExp { a: usize },
    WeightedL1 { a: usize, target: Vec<Scalar>, weights: Option<Vec<Scalar>> },
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Parameter segments bound to leaves of a tape.
pub struct BoundParams<'t> {
    names: Vec<String>,
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| invalid(format!("no parameter segment named {name:?}")))
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.names.iter().map(String::as_str).zip(self.vars.iter().copied())
    }
}

/// Gradients of a scalar loss with respect to the trainable leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `var` is not a trainable leaf or the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for every bound segment; segments the loss does not reach get zeros.
    pub fn for_params(&self, bound: &BoundParams<'_>) -> ParamVector {
        let mut out = ParamVector::new();
        for (name, var) in bound.iter() {
            let g = self
                .get(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&var.shape()));
            out.push(name, g).expect("bound names are unique");
        }
        out
    }
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        check_finite(&value, "constant")?;
        Ok(self.push(value, Op::Leaf, false))
    }

    /// A trainable leaf.
    pub fn variable(&self, value: Tensor) -> Result<Var<'_>> {
        check_finite(&value, "variable")?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// Registers every segment of `params` as a leaf, trainable or frozen.
    pub fn bind(&self, params: &ParamVector, trainable: bool) -> Result<BoundParams<'_>> {
        let mut names = Vec::with_capacity(params.len());
        let mut vars = Vec::with_capacity(params.len());
        for (name, t) in params.segments() {
            check_finite(t, "bind")?;
            names.push(name.clone());
            vars.push(self.push(t.clone(), Op::Leaf, trainable));
        }
        Ok(BoundParams { names, vars })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(invalid("loss was recorded on a different tape"));
        }
        if self.differentiated.replace(true) {
            return Err(invalid("tape has already been differentiated"));
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(Error::NotScalar {
                op: "backward",
                shape: loss_node.value.shape().to_vec(),
            });
        }
        check_finite(&loss_node.value, "backward")?;

        let mut grads: Vec<Option<Vec<Scalar>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        let mut leaf_grads: Vec<Option<Tensor>> = Vec::new();
        leaf_grads.resize_with(nodes.len(), || None);
        if loss_node.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, node, g, id, &mut grads, &mut leaf_grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<Scalar>>], nodes: &[Node], id: usize, contribution: Vec<Scalar>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(e, c)| *e += c),
        slot @ None => *slot = Some(contribution),
    }
}

fn wants(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

fn propagate(
    nodes: &[Node],
    node: &Node,
    g: Vec<Scalar>,
    id: usize,
    grads: &mut [Option<Vec<Scalar>>],
    leaf_grads: &mut [Option<Tensor>],
) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {
            leaf_grads[id] = Some(Tensor::from_parts(out.shape().to_vec(), g));
        }
        &Op::MatMul { a, b } => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if wants(nodes, a) {
                let mut da = vec![0.0; n * k];
                gemm(n, m, k, MatRef::rows(&g, m), MatRef::transposed(bv.data(), m), 0.0, &mut da);
                accumulate(grads, nodes, a, da);
            }
            if wants(nodes, b) {
                let mut db = vec![0.0; k * m];
                gemm(k, n, m, MatRef::transposed(av.data(), k), MatRef::rows(&g, m), 0.0, &mut db);
                accumulate(grads, nodes, b, db);
            }
        }
        &Op::AddBias { x, bias } => {
            if wants(nodes, bias) {
                let m = nodes[bias].value.len();
                let mut db = vec![0.0; m];
                for row in g.chunks_exact(m) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                accumulate(grads, nodes, bias, db);
            }
            accumulate(grads, nodes, x, g);
        }
        &Op::Add { a, b } => {
            if wants(nodes, a) {
                accumulate(grads, nodes, a, g.clone());
            }
            accumulate(grads, nodes, b, g);
        }
        &Op::Sub { a, b } => {
            if wants(nodes, b) {
                accumulate(grads, nodes, b, g.iter().map(|v| -v).collect());
            }
            accumulate(grads, nodes, a, g);
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            if wants(nodes, a) {
                accumulate(grads, nodes, a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
            }
            if wants(nodes, b) {
                accumulate(grads, nodes, b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
        }
        &Op::Scale { a, factor } => {
            accumulate(grads, nodes, a, g.iter().map(|v| v * factor).collect());
        }
        &Op::AddScalar { a } | &Op::Reshape { a } => accumulate(grads, nodes, a, g),
        &Op::Relu { a } => {
            let x = nodes[a].value.data();
            let d = g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
            accumulate(grads, nodes, a, d);
        }
        &Op::Sigmoid { a } => {
            let d = g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
            accumulate(grads, nodes, a, d);
        }
        &Op::Tanh { a } => {
            let d = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
            accumulate(grads, nodes, a, d);
        }
        &Op::Exp { a } => {
            let d = g.iter().zip(out.data()).map(|(g, y)| g * y).collect();
            accumulate(grads, nodes, a, d);
        }
        &Op::Clip { a, lo, hi } => {
            let x = nodes[a].value.data();
            let d = g
                .iter()
                .zip(x)
                .map(|(g, &x)| if (lo..=hi).contains(&x) { *g } else { 0.0 })
                .collect();
            accumulate(grads, nodes, a, d);
        }
        &Op::ConcatCols { a, b, left, right } => {
            let width = left + right;
            if wants(nodes, a) {
                let da = g.chunks_exact(width).flat_map(|r| r[..left].iter().copied()).collect();
                accumulate(grads, nodes, a, da);
            }
            if wants(nodes, b) {
                let db = g.chunks_exact(width).flat_map(|r| r[left..].iter().copied()).collect();
                accumulate(grads, nodes, b, db);
            }
        }
        Op::Conv2d { x, w, geom, cols } => {
            let (x, w) = (*x, *w);
            let patch = geom.patch_len();
            let rows = geom.out_positions();
            let f = geom.filters;
            if wants(nodes, w) {
                let cols = cols.as_ref().expect("im2col kept when the kernel is trainable");
                let mut dw = vec![0.0; patch * f];
                gemm(patch, rows, f, MatRef::transposed(cols, patch), MatRef::rows(&g, f), 0.0, &mut dw);
                accumulate(grads, nodes, w, dw);
            }
            if wants(nodes, x) {
                let mut dcols = vec![0.0; rows * patch];
                gemm(rows, f, patch, MatRef::rows(&g, f), MatRef::transposed(nodes[w].value.data(), f), 0.0, &mut dcols);
                let mut dx = vec![0.0; nodes[x].value.len()];
                geom.col2im_add(&dcols, &mut dx);
                accumulate(grads, nodes, x, dx);
            }
        }
        Op::MaxPool2 { x, argmax } => {
            let mut dx = vec![0.0; nodes[*x].value.len()];
            for (gv, &src) in g.iter().zip(argmax) {
                dx[src] += gv;
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::SoftmaxCrossEntropy { logits, labels, probs } => {
            let k = nodes[*logits].value.shape()[1];
            let scale = g[0] / labels.len() as Scalar;
            let mut d: Vec<Scalar> = probs.iter().map(|p| p * scale).collect();
            for (row, &y) in labels.iter().enumerate() {
                d[row * k + y] -= scale;
            }
            accumulate(grads, nodes, *logits, d);
        }
        Op::LogSoftmaxPick { logits, labels, probs } => {
            let k = nodes[*logits].value.shape()[1];
            let mut d = vec![0.0; probs.len()];
            for (row, (&y, &gr)) in labels.iter().zip(&g).enumerate() {
                for j in 0..k {
                    d[row * k + j] = -gr * probs[row * k + j];
                }
                d[row * k + y] += gr;
            }
            accumulate(grads, nodes, *logits, d);
        }
        &Op::Mean { a } => {
            let n = nodes[a].value.len();
            accumulate(grads, nodes, a, vec![g[0] / n as Scalar; n]);
        }
        &Op::Sum { a } => {
            let n = nodes[a].value.len();
            accumulate(grads, nodes, a, vec![g[0]; n]);
        }
        &Op::LogSumExp { a } => {
            let lse = out.data()[0];
            let d = nodes[a].value.data().iter().map(|v| g[0] * (v - lse).exp()).collect();
            accumulate(grads, nodes, a, d);
        }
        Op::WeightedL1 { a, target, weights } => {
            let x = nodes[*a].value.data();
            let d = x
                .iter()
                .zip(target)
                .enumerate()
                .map(|(i, (x, t))| {
                    // subgradient with sign(0) = 0
                    let s = if x > t {
                        1.0
                    } else if x < t {
                        -1.0
                    } else {
                        0.0
                    };
                    g[0] * s * weights.as_ref().map_or(1.0, |w| w[i])
                })
                .collect();
            accumulate(grads, nodes, *a, d);
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn item(&self) -> Result<Scalar> {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    fn same_tape(&self, other: Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(invalid("operands were recorded on different tapes"))
        }
    }

    fn unary(self, op: impl FnOnce(usize) -> Op, f: impl Fn(Scalar) -> Scalar) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (a.value.map(f), a.requires_grad)
        };
        self.tape.push(value, op(self.id), rg)
    }

    fn elementwise(
        self,
        other: Var<'t>,
        name: &'static str,
        op: impl FnOnce(usize, usize) -> Op,
        f: impl Fn(Scalar, Scalar) -> Scalar,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.value.shape() != b.value.shape() {
                return Err(mismatch(name, a.value.shape(), b.value.shape()));
            }
            let data = a.value.data().iter().zip(b.value.data()).map(|(&x, &y)| f(x, y)).collect();
            (
                Tensor::from_parts(a.value.shape().to_vec(), data),
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(value, op(self.id, other.id), rg))
    }

    /// `[n, k] x [k, m] -> [n, m]`
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs)?;
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            let (sa, sb) = (a.value.shape(), b.value.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(mismatch("matmul", sa, sb));
            }
            let (n, k, m) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; n * m];
            gemm(n, k, m, MatRef::rows(a.value.data(), k), MatRef::rows(b.value.data(), m), 0.0, &mut out);
            (Tensor::from_parts(vec![n, m], out), a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(value, Op::MatMul { a: self.id, b: rhs.id }, rg))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias)?;
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (x, b) = (&nodes[self.id], &nodes[bias.id]);
            let m = *x.value.shape().last().expect("tensors have rank >= 1");
            if b.value.rank() != 1 || b.value.len() != m {
                return Err(mismatch("add_bias", x.value.shape(), b.value.shape()));
            }
            let mut data = x.value.data().to_vec();
            for row in data.chunks_exact_mut(m) {
                row.iter_mut().zip(b.value.data()).for_each(|(v, b)| *v += b);
            }
            (
                Tensor::from_parts(x.value.shape().to_vec(), data),
                x.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(value, Op::AddBias { x: self.id, bias: bias.id }, rg))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(rhs, "add", |a, b| Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(rhs, "sub", |a, b| Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(rhs, "mul", |a, b| Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn scale(self, factor: Scalar) -> Var<'t> {
        self.unary(|a| Op::Scale { a, factor }, |x| x * factor)
    }

    pub fn add_scalar(self, c: Scalar) -> Var<'t> {
        self.unary(|a| Op::AddScalar { a }, |x| x + c)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|a| Op::Relu { a }, |x| x.max(0.0))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(|a| Op::Sigmoid { a }, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(|a| Op::Tanh { a }, Scalar::tanh)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(|a| Op::Exp { a }, Scalar::exp)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient passes where the input lies inside the closed range.
    pub fn clip(self, lo: Scalar, hi: Scalar) -> Var<'t> {
        self.unary(|a| Op::Clip { a, lo, hi }, |x| x.clamp(lo, hi))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (a.value.clone().reshape(shape)?, a.requires_grad)
        };
        Ok(self.tape.push(value, Op::Reshape { a: self.id }, rg))
    }

    /// `[n, p] ++ [n, q] -> [n, p + q]`
    pub fn concat_cols(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs)?;
        let (value, rg, left, right) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            let (sa, sb) = (a.value.shape(), b.value.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
                return Err(mismatch("concat_cols", sa, sb));
            }
            let (left, right) = (sa[1], sb[1]);
            let data = a
                .value
                .data()
                .chunks_exact(left)
                .zip(b.value.data().chunks_exact(right))
                .flat_map(|(ra, rb)| ra.iter().chain(rb).copied())
                .collect();
            (
                Tensor::from_parts(vec![sa[0], left + right], data),
                a.requires_grad || b.requires_grad,
                left,
                right,
            )
        };
        Ok(self.tape.push(
            value,
            Op::ConcatCols {
                a: self.id,
                b: rhs.id,
                left,
                right,
            },
            rg,
        ))
    }

    /// 2-D convolution of an `[N, H, W, C]` input with a `[KH, KW, C, F]` kernel.
    ///
    /// Supported closure: stride 1 or 2, symmetric zero padding, output of at
    /// least one pixel per spatial axis.
    pub fn conv2d(self, kernel: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(kernel)?;
        if !(stride == 1 || stride == 2) {
            return Err(invalid(format!("conv2d: unsupported stride {stride}")));
        }
        let (value, rg, geom, cols) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w) = (&nodes[self.id], &nodes[kernel.id]);
            let (sx, sw) = (x.value.shape(), w.value.shape());
            if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] {
                return Err(mismatch("conv2d", sx, sw));
            }
            let (in_h, in_w) = (sx[1] + 2 * pad, sx[2] + 2 * pad);
            if sw[0] > in_h || sw[1] > in_w {
                return Err(mismatch("conv2d", sx, sw));
            }
            let geom = ConvGeom {
                batch: sx[0],
                in_h: sx[1],
                in_w: sx[2],
                in_c: sx[3],
                k_h: sw[0],
                k_w: sw[1],
                filters: sw[3],
                stride,
                pad,
                out_h: (in_h - sw[0]) / stride + 1,
                out_w: (in_w - sw[1]) / stride + 1,
            };
            let cols = geom.im2col(x.value.data());
            let mut out = vec![0.0; geom.out_positions() * geom.filters];
            gemm(
                geom.out_positions(),
                geom.patch_len(),
                geom.filters,
                MatRef::rows(&cols, geom.patch_len()),
                MatRef::rows(w.value.data(), geom.filters),
                0.0,
                &mut out,
            );
            let value = Tensor::from_parts(vec![geom.batch, geom.out_h, geom.out_w, geom.filters], out);
            let keep = w.requires_grad.then_some(cols);
            (value, x.requires_grad || w.requires_grad, geom, keep)
        };
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                x: self.id,
                w: kernel.id,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// 2x2, stride-2 max pooling over `[N, H, W, C]`; odd trailing rows/columns are dropped.
    pub fn maxpool2d(self) -> Result<Var<'t>> {
        let (value, rg, argmax) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let s = x.value.shape();
            if s.len() != 4 || s[1] < 2 || s[2] < 2 {
                return Err(mismatch("maxpool2d", s, &[2, 2]));
            }
            let (out, arg) = kernels::maxpool2(x.value.data(), s[0], s[1], s[2], s[3]);
            let value = Tensor::from_parts(vec![s[0], s[1] / 2, s[2] / 2, s[3]], out);
            (value, x.requires_grad, if x.requires_grad { arg } else { Vec::new() })
        };
        Ok(self.tape.push(value, Op::MaxPool2 { x: self.id, argmax }, rg))
    }

    fn check_labels(&self, op: &'static str, labels: &[usize]) -> Result<(usize, usize)> {
        let nodes = self.tape.nodes.borrow();
        let s = nodes[self.id].value.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch(op, s, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
            return Err(invalid(format!("{op}: label {bad} out of range for {} classes", s[1])));
        }
        Ok((s[0], s[1]))
    }

    /// Mean cross-entropy of `[N, K]` logits against integer labels (stable form).
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let (_, k) = self.check_labels("softmax_cross_entropy", labels)?;
        let (value, rg, probs) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let rows = x.value.data().chunks_exact(k);
            let total: Scalar = rows.zip(labels).map(|(r, &y)| -kernels::log_softmax_at(r, y)).sum();
            let probs = kernels::softmax_rows(x.value.data(), k);
            (Tensor::scalar(total / labels.len() as Scalar), x.requires_grad, probs)
        };
        check_finite(&value, "softmax_cross_entropy")?;
        Ok(self.tape.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Per-row `log softmax(logits)[label]`, shape `[N]`.
    pub fn log_softmax_pick(self, labels: &[usize]) -> Result<Var<'t>> {
        let (n, k) = self.check_labels("log_softmax_pick", labels)?;
        let (value, rg, probs) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let picked = x
                .value
                .data()
                .chunks_exact(k)
                .zip(labels)
                .map(|(r, &y)| kernels::log_softmax_at(r, y))
                .collect();
            let probs = kernels::softmax_rows(x.value.data(), k);
            (Tensor::from_parts(vec![n], picked), x.requires_grad, probs)
        };
        check_finite(&value, "log_softmax_pick")?;
        Ok(self.tape.push(
            value,
            Op::LogSoftmaxPick {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    fn reduce(self, op: impl FnOnce(usize) -> Op, f: impl Fn(&[Scalar]) -> Scalar) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (Tensor::scalar(f(a.value.data())), a.requires_grad)
        };
        self.tape.push(value, op(self.id), rg)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        Ok(self.reduce(|a| Op::Mean { a }, |v| v.iter().sum::<Scalar>() / v.len() as Scalar))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        Ok(self.reduce(|a| Op::Sum { a }, |v| v.iter().sum()))
    }

    /// `ln sum exp(x)` over all elements, computed with max subtraction.
    pub fn logsumexp(self) -> Result<Var<'t>> {
        let v = self.reduce(|a| Op::LogSumExp { a }, kernels::logsumexp);
        if v.item()?.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { op: "logsumexp" })
        }
    }

    /// `sum |x - target|`
    pub fn l1_distance(self, target: &Tensor) -> Result<Var<'t>> {
        self.weighted_l1(target, None)
    }

    /// `sum_k w_k |x_k - target_k|`
    pub fn weighted_l1_distance(self, target: &Tensor, weights: &Tensor) -> Result<Var<'t>> {
        self.weighted_l1(target, Some(weights))
    }

    fn weighted_l1(self, target: &Tensor, weights: Option<&Tensor>) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.value.shape() != target.shape() {
                return Err(mismatch("l1_distance", a.value.shape(), target.shape()));
            }
            if let Some(w) = weights {
                if w.shape() != target.shape() {
                    return Err(mismatch("l1_distance", w.shape(), target.shape()));
                }
            }
            let total = a
                .value
                .data()
                .iter()
                .zip(target.data())
                .enumerate()
                .map(|(i, (x, t))| (x - t).abs() * weights.map_or(1.0, |w| w.data()[i]))
                .sum();
            (Tensor::scalar(total), a.requires_grad)
        };
        Ok(self.tape.push(
            value,
            Op::WeightedL1 {
                a: self.id,
                target: target.data().to_vec(),
                weights: weights.map(|w| w.data().to_vec()),
            },
            rg,
        ))
    }
}
