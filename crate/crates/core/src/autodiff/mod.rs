//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive as an [`Op`] together with its value.
//! Because nodes are appended only after their inputs exist, the node order
//! is a topological order and [`Tape::backward`] is a single reverse sweep
//! that visits each node once.
//!
//! ```
//! use srl_core::autodiff::Tape;
//! use srl_core::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
//! ```
//!
//! Every forward result is checked for NaN/Inf; a non-finite value aborts the
//! op with [`Error::NonFinite`] instead of propagating.

mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, GradCheckReport, LeafReport};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spectral;
use crate::tensor::{shape_str, Tensor};

use kernels::ConvGeometry;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Real or imaginary half of a DFT output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Re,
    Im,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf {
        differentiable: bool,
        name: Option<String>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
    },
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    Exp(Var),
    Log {
        x: Var,
        floor: f64,
    },
    MaxPool2(Var),
    AvgPool2(Var),
    Reshape(Var, Vec<usize>),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    MaxExcept {
        x: Var,
        index: Vec<usize>,
    },
    Dft {
        x: Var,
        part: Part,
    },
    Detach(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Sqrt(..) => "sqrt",
            Op::Exp(..) => "exp",
            Op::Log { .. } => "log",
            Op::MaxPool2(..) => "max_pool2",
            Op::AvgPool2(..) => "avg_pool2",
            Op::Reshape(..) => "reshape",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::Gather { .. } => "gather",
            Op::MaxExcept { .. } => "max_except",
            Op::Dft { .. } => "dft",
            Op::Detach(..) => "detach",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::AddBias(a, b) => vec![*a, *b],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Sqrt(a)
            | Op::Exp(a)
            | Op::MaxPool2(a)
            | Op::AvgPool2(a)
            | Op::Reshape(a, _)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a) => vec![*a],
            Op::Log { x, .. }
            | Op::Gather { x, .. }
            | Op::MaxExcept { x, .. }
            | Op::Dft { x, .. } => vec![*x],
            // detached inputs never receive gradient
            Op::Detach(_) => vec![],
        }
    }
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Record of primitive operations. Single owner, single thread.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    op: n.op.clone(),
                    value: n.value.clone(),
                    needs_grad: n.needs_grad,
                })
                .collect(),
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`; zeros if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor<T> {
        match self.grads.get(var.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor<T> {
        match self.grads.get_mut(var.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, shape_str(a.shape()), shape_str(b.shape())));
    }
    Ok(())
}

/// Splits `[..., c]` into (rows, c).
fn rows_of<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    let c = *t
        .shape()
        .last()
        .ok_or_else(|| Error::shape(op, "rank >= 1", "rank 0"))?;
    if c == 0 {
        return Err(Error::shape(op, "non-empty last axis", shape_str(t.shape())));
    }
    Ok((t.len() / c, c))
}

fn nchw<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(op, "rank-4 NCHW", shape_str(t.shape()))),
    }
}

fn check_labels(op: &'static str, rows: usize, classes: usize, index: &[usize]) -> Result<()> {
    if index.len() != rows {
        return Err(Error::shape(op, format!("{rows} labels"), format!("{}", index.len())));
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= classes) {
        return Err(Error::invalid(format!(
            "{op}: label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, None)
    }

    /// Differentiable leaf with a name reported by [`grad_check`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, Some(name.into()))
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    fn push_leaf(&mut self, value: Tensor<T>, differentiable: bool, name: Option<String>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf {
                differentiable,
                name,
            },
            value,
            needs_grad: differentiable,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn leaf_info(&self, v: Var) -> Option<(bool, Option<&str>)> {
        match &self.nodes.get(v.0)?.op {
            Op::Leaf {
                differentiable,
                name,
            } => Some((*differentiable, name.as_deref())),
            _ => None,
        }
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::invalid(format!("variable {} is not on this tape", v.0)))
        }
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        for &v in &inputs {
            self.check_var(v)?;
        }
        if let Op::Detach(v) = op {
            self.check_var(v)?;
        }
        let value = self.eval(&op)?;
        value.ensure_finite(op.name())?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Replaces a leaf's value and re-evaluates every node after it.
    pub(crate) fn set_leaf_and_recompute(&mut self, leaf: Var, value: Tensor<T>) -> Result<()> {
        self.nodes[leaf.0].value = value;
        for i in leaf.0 + 1..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let v = self.eval(&op)?;
            v.ensure_finite(op.name())?;
            self.nodes[i].value = v;
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::AddScalar(a, s))
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// Adds a `[f]` bias to every row of a `[..., f]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddBias(x, bias))
    }

    /// Stride-1 cross-correlation with symmetric zero padding.
    ///
    /// `input: [N, Ci, H, W]`, `weight: [Co, Ci, kh, kw]`, `bias: [Co]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        self.push(Op::Conv2d {
            input,
            weight,
            bias,
            padding,
        })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Abs(a))
    }

    /// Square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    /// `ln(max(x, floor))`.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.push(Op::Log { x, floor })
    }

    /// 2x2 max pooling with stride 2 over the trailing spatial axes of NCHW.
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MaxPool2(a))
    }

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        self.push(Op::AvgPool2(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    /// `[N, ...] -> [N, prod(...)]`
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let n = *shape
            .first()
            .ok_or_else(|| Error::shape("flatten", "rank >= 1", "rank 0"))?;
        let rest: usize = shape[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    /// Sums out the last axis: `[..., c] -> [...]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumRows(a))
    }

    /// Picks `x[r, index[r]]` from a `[rows, c]` tensor.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        self.push(Op::Gather {
            x,
            index: index.to_vec(),
        })
    }

    /// Row-wise maximum over all columns except `index[r]`; ties go to the lowest column.
    pub fn max_except(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        self.push(Op::MaxExcept {
            x,
            index: index.to_vec(),
        })
    }

    /// Real or imaginary part of the unnormalized DFT along the last axis.
    pub fn dft(&mut self, x: Var, part: Part) -> Result<Var> {
        self.push(Op::Dft { x, part })
    }

    /// Copy of `a` through which no gradient flows.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Detach(a))
    }

    fn eval(&self, op: &Op) -> Result<Tensor<T>> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let out = match op {
            Op::Leaf { .. } => unreachable!("leaves are never re-evaluated"),
            Op::Add(a, b) => {
                same_shape("add", val(a), val(b))?;
                val(a).add(val(b))?
            }
            Op::Sub(a, b) => {
                same_shape("sub", val(a), val(b))?;
                val(a).sub(val(b))?
            }
            Op::Mul(a, b) => val(a).zip_map(val(b), |x, y| x * y).map_err(|_| {
                Error::shape("mul", shape_str(val(a).shape()), shape_str(val(b).shape()))
            })?,
            Op::Div(a, b) => val(a).zip_map(val(b), |x, y| x / y).map_err(|_| {
                Error::shape("div", shape_str(val(a).shape()), shape_str(val(b).shape()))
            })?,
            Op::Neg(a) => val(a).map(|x| -x),
            Op::Scale(a, s) => val(a).scale(T::of(*s)),
            Op::AddScalar(a, s) => {
                let s = T::of(*s);
                val(a).map(|x| x + s)
            }
            Op::MatMul(a, b) => {
                let (a, b) = (val(a), val(b));
                let (m, k, n) = match (a.shape(), b.shape()) {
                    (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
                    _ => {
                        return Err(Error::shape(
                            "matmul",
                            "[m,k] x [k,n]",
                            format!("{} x {}", shape_str(a.shape()), shape_str(b.shape())),
                        ))
                    }
                };
                let mut c = vec![T::zero(); m * n];
                kernels::gemm_nn(m, k, n, a.data(), b.data(), &mut c);
                Tensor::new(vec![m, n], c)?
            }
            Op::AddBias(x, b) => {
                let (x, b) = (val(x), val(b));
                let (_, f) = rows_of("add_bias", x)?;
                if b.shape() != [f] {
                    return Err(Error::shape("add_bias", format!("[{f}]"), shape_str(b.shape())));
                }
                let mut data = x.data().to_vec();
                for row in data.chunks_exact_mut(f) {
                    for (v, &bv) in row.iter_mut().zip(b.data()) {
                        *v = *v + bv;
                    }
                }
                Tensor::new(x.shape().to_vec(), data)?
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            } => self.conv_forward(val(input), val(weight), bias.map(|b| val(&b)), *padding)?,
            Op::Relu(a) => val(a).map(|x| if x > T::zero() { x } else { T::zero() }),
            Op::Abs(a) => val(a).map(|x| x.abs()),
            Op::Sqrt(a) => {
                if val(a).data().iter().any(|&x| x < T::zero()) {
                    return Err(Error::invalid("sqrt of a negative value"));
                }
                val(a).map(|x| x.sqrt())
            }
            Op::Exp(a) => val(a).map(|x| x.exp()),
            Op::Log { x, floor } => {
                let f = T::of(*floor);
                val(x).map(|v| v.max(f).ln())
            }
            Op::MaxPool2(a) => pool_forward(val(a), true)?,
            Op::AvgPool2(a) => pool_forward(val(a), false)?,
            Op::Reshape(a, shape) => val(a).clone().reshape(shape)?,
            Op::LogSoftmax(a) => {
                let x = val(a);
                let (_, c) = rows_of("log_softmax", x)?;
                let mut data = Vec::with_capacity(x.len());
                for row in x.data().chunks_exact(c) {
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
                    data.extend(row.iter().map(|&v| v - lse));
                }
                Tensor::new(x.shape().to_vec(), data)?
            }
            Op::Sum(a) => Tensor::scalar(val(a).sum()),
            Op::Mean(a) => {
                let x = val(a);
                if x.is_empty() {
                    return Err(Error::invalid("mean of an empty tensor"));
                }
                Tensor::scalar(x.sum() / T::of(x.len() as f64))
            }
            Op::SumRows(a) => {
                let x = val(a);
                let (_, c) = rows_of("sum_rows", x)?;
                let data = x.data().chunks_exact(c).map(|r| r.iter().copied().sum()).collect();
                Tensor::new(x.shape()[..x.rank() - 1].to_vec(), data)?
            }
            Op::Gather { x, index } => {
                let x = val(x);
                if x.rank() != 2 {
                    return Err(Error::shape("gather", "rank 2", shape_str(x.shape())));
                }
                let (r, c) = rows_of("gather", x)?;
                check_labels("gather", r, c, index)?;
                let data = index.iter().enumerate().map(|(i, &j)| x.data()[i * c + j]).collect();
                Tensor::new(vec![r], data)?
            }
            Op::MaxExcept { x, index } => {
                let x = val(x);
                if x.rank() != 2 {
                    return Err(Error::shape("max_except", "rank 2", shape_str(x.shape())));
                }
                let (r, c) = rows_of("max_except", x)?;
                if c < 2 {
                    return Err(Error::invalid("max_except needs at least two columns"));
                }
                check_labels("max_except", r, c, index)?;
                let data = index
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| x.data()[i * c + max_except_col(&x.data()[i * c..(i + 1) * c], j)])
                    .collect();
                Tensor::new(vec![r], data)?
            }
            Op::Dft { x, part } => {
                let x = val(x);
                let (_, c) = rows_of("dft", x)?;
                let (re, im) = spectral::dft_rows(x.data(), c, false);
                Tensor::new(x.shape().to_vec(), if *part == Part::Re { re } else { im })?
            }
            Op::Detach(a) => val(a).clone(),
        };
        Ok(out)
    }

    fn conv_forward(&self, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, padding: usize) -> Result<Tensor<T>> {
        let [n, ci, h, wd] = nchw("conv2d", x)?;
        let [co, wci, kh, kw] = nchw("conv2d", w)?;
        if wci != ci {
            return Err(Error::shape(
                "conv2d",
                format!("{ci} input channels in kernel"),
                shape_str(w.shape()),
            ));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::shape("conv2d", "kernel no larger than padded input", shape_str(x.shape())));
        }
        if let Some(b) = b {
            if b.shape() != [co] {
                return Err(Error::shape("conv2d", format!("bias [{co}]"), shape_str(b.shape())));
            }
        }
        let g = ConvGeometry {
            in_channels: ci,
            height: h,
            width: wd,
            kernel_h: kh,
            kernel_w: kw,
            padding,
        };
        let (k, p) = (g.patch_len(), g.out_len());
        let mut cols = vec![T::zero(); k * p];
        let mut out = vec![T::zero(); n * co * p];
        let in_len = ci * h * wd;
        for (img, dst) in x.data().chunks_exact(in_len).zip(out.chunks_exact_mut(co * p)) {
            kernels::im2col(&g, img, &mut cols);
            if let Some(b) = b {
                for (plane, &bv) in dst.chunks_exact_mut(p).zip(b.data()) {
                    plane.fill(bv);
                }
            }
            kernels::gemm_nn(co, k, p, w.data(), &cols, dst);
        }
        Tensor::new(vec![n, co, g.out_h(), g.out_w()], out)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check_var(loss)?;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                "scalar loss",
                shape_str(self.nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            g.ensure_finite("backward")?;
            self.backprop(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        grads[v.0] = Some(match grads[v.0].take() {
            Some(prev) => prev.add(&g)?,
            None => g,
        });
        Ok(())
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let out = &self.nodes[i].value;
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        match &self.nodes[i].op {
            Op::Leaf { .. } | Op::Detach(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    self.accumulate(grads, *a, g.zip_map(val(b), |x, y| x * y)?)?;
                }
                if needs(b) {
                    self.accumulate(grads, *b, g.zip_map(val(a), |x, y| x * y)?)?;
                }
            }
            Op::Div(a, b) => {
                if needs(a) {
                    self.accumulate(grads, *a, g.zip_map(val(b), |x, y| x / y)?)?;
                }
                if needs(b) {
                    let gb = g.zip_map(out, |x, q| x * q)?.zip_map(val(b), |x, y| -x / y)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x))?,
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(T::of(*s)))?,
            Op::AddScalar(a, _) => self.accumulate(grads, *a, g.clone())?,
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs(a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::gemm_nt(m, n, k, g.data(), bv.data(), &mut ga);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga)?)?;
                }
                if needs(b) {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::gemm_tn(k, m, n, av.data(), g.data(), &mut gb);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb)?)?;
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone())?;
                if needs(b) {
                    let f = val(b).len();
                    let mut gb = vec![T::zero(); f];
                    for row in g.data().chunks_exact(f) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![f], gb)?)?;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            } => self.conv_backward(g, *input, *weight, *bias, *padding, grads)?,
            Op::Relu(a) => {
                let ga = g.zip_map(val(a), |gv, x| if x > T::zero() { gv } else { T::zero() })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Abs(a) => {
                let ga = g.zip_map(val(a), |gv, x| {
                    if x > T::zero() {
                        gv
                    } else if x < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Sqrt(a) => {
                let half = T::of(0.5);
                let ga = g.zip_map(out, |gv, y| if y > T::zero() { gv * half / y } else { T::zero() })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |gv, y| gv * y)?)?,
            Op::Log { x, floor } => {
                let f = T::of(*floor);
                let gx = g.zip_map(val(x), |gv, v| if v > f { gv / v } else { T::zero() })?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::MaxPool2(a) => self.accumulate(grads, *a, pool_backward(val(a), g, true)?)?,
            Op::AvgPool2(a) => self.accumulate(grads, *a, pool_backward(val(a), g, false)?)?,
            Op::Reshape(a, _) => {
                self.accumulate(grads, *a, g.clone().reshape(val(a).shape())?)?;
            }
            Op::LogSoftmax(a) => {
                let c = *out.shape().last().expect("rank >= 1");
                let mut gx = Vec::with_capacity(out.len());
                for (grow, yrow) in g.data().chunks_exact(c).zip(out.data().chunks_exact(c)) {
                    let total: T = grow.iter().copied().sum();
                    gx.extend(grow.iter().zip(yrow).map(|(&gv, &y)| gv - y.exp() * total));
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), gx)?)?;
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(val(a).shape(), gv))?;
            }
            Op::Mean(a) => {
                let x = val(a);
                let gv = g.data()[0] / T::of(x.len() as f64);
                self.accumulate(grads, *a, Tensor::full(x.shape(), gv))?;
            }
            Op::SumRows(a) => {
                let x = val(a);
                let c = *x.shape().last().expect("rank >= 1");
                let mut gx = Vec::with_capacity(x.len());
                for &gv in g.data() {
                    gx.extend(std::iter::repeat(gv).take(c));
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), gx)?)?;
            }
            Op::Gather { x, index } => {
                let xv = val(x);
                let c = xv.shape()[1];
                let mut gx = vec![T::zero(); xv.len()];
                for (r, (&j, &gv)) in index.iter().zip(g.data()).enumerate() {
                    gx[r * c + j] = gv;
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
            }
            Op::MaxExcept { x, index } => {
                let xv = val(x);
                let c = xv.shape()[1];
                let mut gx = vec![T::zero(); xv.len()];
                for (r, (&j, &gv)) in index.iter().zip(g.data()).enumerate() {
                    let col = max_except_col(&xv.data()[r * c..(r + 1) * c], j);
                    gx[r * c + col] = gv;
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
            }
            Op::Dft { x, part } => {
                // Adjoint of the real-input DFT is the real part of the
                // unnormalized inverse DFT of G, where G = g for the real half
                // and G = i*g for the imaginary half.
                let c = *g.shape().last().expect("rank >= 1");
                let zeros = vec![T::zero(); g.len()];
                let (re, _) = match part {
                    Part::Re => spectral::dft_rows_complex(g.data(), &zeros, c, true),
                    Part::Im => spectral::dft_rows_complex(&zeros, g.data(), c, true),
                };
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), re)?)?;
            }
        }
        Ok(())
    }

    fn conv_backward(
        &self,
        g: &Tensor<T>,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let [n, ci, h, wd] = nchw("conv2d", x)?;
        let [co, _, kh, kw] = nchw("conv2d", w)?;
        let geo = ConvGeometry {
            in_channels: ci,
            height: h,
            width: wd,
            kernel_h: kh,
            kernel_w: kw,
            padding,
        };
        let (k, p) = (geo.patch_len(), geo.out_len());
        let need_x = self.nodes[input.0].needs_grad;
        let need_w = self.nodes[weight.0].needs_grad;

        if let Some(b) = bias {
            if self.nodes[b.0].needs_grad {
                let mut gb = vec![T::zero(); co];
                for sample in g.data().chunks_exact(co * p) {
                    for (acc, plane) in gb.iter_mut().zip(sample.chunks_exact(p)) {
                        *acc = *acc + plane.iter().copied().sum::<T>();
                    }
                }
                self.accumulate(grads, b, Tensor::new(vec![co], gb)?)?;
            }
        }
        if !need_x && !need_w {
            return Ok(());
        }

        let in_len = ci * h * wd;
        let mut cols = vec![T::zero(); k * p];
        let mut gcols = vec![T::zero(); k * p];
        let mut gw = vec![T::zero(); w.len()];
        let mut gx = if need_x { vec![T::zero(); x.len()] } else { Vec::new() };
        for s in 0..n {
            let gs = &g.data()[s * co * p..(s + 1) * co * p];
            if need_w {
                kernels::im2col(&geo, &x.data()[s * in_len..(s + 1) * in_len], &mut cols);
                kernels::gemm_nt(co, p, k, gs, &cols, &mut gw);
            }
            if need_x {
                gcols.fill(T::zero());
                kernels::gemm_tn(k, co, p, w.data(), gs, &mut gcols);
                kernels::col2im(&geo, &gcols, &mut gx[s * in_len..(s + 1) * in_len]);
            }
        }
        if need_w {
            self.accumulate(grads, weight, Tensor::new(w.shape().to_vec(), gw)?)?;
        }
        if need_x {
            self.accumulate(grads, input, Tensor::new(x.shape().to_vec(), gx)?)?;
        }
        Ok(())
    }
}

fn max_except_col<T: Scalar>(row: &[T], skip: usize) -> usize {
    let mut best = usize::MAX;
    for (c, &v) in row.iter().enumerate() {
        if c == skip {
            continue;
        }
        if best == usize::MAX || v > row[best] {
            best = c;
        }
    }
    best
}

fn pool_forward<T: Scalar>(x: &Tensor<T>, max: bool) -> Result<Tensor<T>> {
    let [n, c, h, w] = nchw(if max { "max_pool2" } else { "avg_pool2" }, x)?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::shape("pool2", "spatial extent >= 2", shape_str(x.shape())));
    }
    let quarter = T::of(0.25);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks_exact(h * w) {
        for oy in 0..ho {
            for ox in 0..wo {
                if max {
                    out.push(plane[kernels::pool_argmax(plane, w, oy, ox)]);
                } else {
                    let i = 2 * oy * w + 2 * ox;
                    out.push((plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter);
                }
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

fn pool_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, max: bool) -> Result<Tensor<T>> {
    let [_, _, h, w] = nchw("pool2", x)?;
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut gx = vec![T::zero(); x.len()];
    for ((plane, gplane), gout) in x
        .data()
        .chunks_exact(h * w)
        .zip(gx.chunks_exact_mut(h * w))
        .zip(g.data().chunks_exact(ho * wo))
    {
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = gout[oy * wo + ox];
                if max {
                    let idx = kernels::pool_argmax(plane, w, oy, ox);
                    gplane[idx] = gplane[idx] + gv;
                } else {
                    let i = 2 * oy * w + 2 * ox;
                    for j in [i, i + 1, i + w, i + w + 1] {
                        gplane[j] = gplane[j] + gv * quarter;
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), gx)
}
