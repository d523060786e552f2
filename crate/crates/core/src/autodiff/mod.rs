//! Recorded-graph reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape. Every op pushes one node holding its
//! output value and the ids of its inputs, so inputs always precede outputs
//! and [`Graph::backward`] simply walks the tape in reverse insertion order.

mod gradcheck;
mod ops;

use std::cell::{Ref, RefCell};
use std::fmt;
use std::sync::Arc;

pub use gradcheck::{gradcheck, gradcheck_inputs, GradcheckConfig, InputCheck};
pub use ops::UnaryFn;

use crate::error::{Error, Result};
use crate::tensor::kernels::{Conv1dGeom, Conv2dGeom};
use crate::tensor::{Scalar, Tensor};

/// Backward rule for an op implemented outside this module.
///
/// `backward` receives the forward input values, the forward output and the
/// upstream gradient, and returns one optional gradient per input.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum MatMode {
    /// `a · b`
    NN,
    /// `a · bᵀ`
    NT,
    /// `aᵀ · b`
    TN,
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    MatMul { a: usize, b: usize, mode: MatMode },
    Add { a: usize, b: usize },
    AddRow { x: usize, bias: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: T },
    Unary { x: usize, f: UnaryFn },
    SoftmaxRows { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    Conv1d { x: usize, w: usize, geom: Conv1dGeom },
    Conv2d { x: usize, w: usize, geom: Conv2dGeom },
    AvgPool1d { x: usize, geom: Conv1dGeom },
    AvgPool2d { x: usize, geom: Conv2dGeom },
    SliceCols { x: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    SliceRows { x: usize, start: usize },
    ConcatRows { parts: Vec<usize> },
    Reshape { x: usize },
    Sum { x: usize },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp<T>> },
}

impl<T: Scalar> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddRow { x, bias } => vec![*x, *bias],
            Op::Scale { x, .. }
            | Op::Unary { x, .. }
            | Op::SoftmaxRows { x }
            | Op::AvgPool1d { x, .. }
            | Op::AvgPool2d { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Reshape { x }
            | Op::Sum { x } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv1d { x, w, .. } | Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::ConcatCols { parts } | Op::ConcatRows { parts } => parts.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Unary { .. } => "unary",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool1d { .. } => "avg_pool1d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.nodes.borrow();
        f.debug_list()
            .entries(nodes.iter().map(|n| (n.op.tag(), n.value.shape().to_vec())))
            .finish()
    }
}

/// Handle to one node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.inputs().iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn leaf(&self, value: Arc<Tensor<T>>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient. The tensor is shared, not copied.
    pub fn param(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn param_owned(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), false)
    }

    /// Shared leaf excluded from differentiation.
    pub fn constant_shared(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Registers an output computed outside the graph with a custom backward rule.
    pub fn custom<'g>(
        &'g self,
        inputs: &[Var<'g, T>],
        output: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Var<'g, T> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.id).collect(),
                op,
            },
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(loss_node.value.shape()));
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[id] = Some(g);
                continue;
            }
            let contributions = ops::backward_node(&nodes, node, &g)?;
            for (input, dg) in contributions {
                if !nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&dg)?,
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(Gradients {
            grads: leaf_grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

/// Gradients of every differentiable leaf reached by a backward pass.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`; zeros when `v` was not reached from the loss.
    pub fn get(&self, v: Var<'_, T>) -> Tensor<T> {
        self.grads[v.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Tensor<T> {
        self.grads[v.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    pub fn reached(&self, v: Var<'_, T>) -> bool {
        self.grads[v.id].is_some()
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        let nodes = self.graph.nodes.borrow();
        f(&nodes[self.id].value)
    }

    fn with_values<R>(&self, other: Var<'g, T>, f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> R) -> R {
        let nodes: Ref<'_, Vec<Node<T>>> = self.graph.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    fn mm(self, other: Var<'g, T>, mode: MatMode) -> Result<Var<'g, T>> {
        let out = self.with_values(other, |a, b| ops::matmul_forward(a, b, mode))?;
        Ok(self.graph.push(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                mode,
            },
        ))
    }

    /// `self · other`
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.mm(other, MatMode::NN)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.mm(other, MatMode::NT)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.mm(other, MatMode::TN)
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let out = self.with_values(other, |a, b| {
            if a.shape() != b.shape() {
                return Err(Error::shape("add", a.shape(), b.shape()));
            }
            let mut out = a.clone();
            out.add_assign(b)?;
            Ok(out)
        })?;
        Ok(self.graph.push(
            out,
            Op::Add {
                a: self.id,
                b: other.id,
            },
        ))
    }

    /// Adds a length-`n` vector to every row of a `[m, n]` tensor.
    pub fn add_row(self, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        let out = self.with_values(bias, ops::add_row_forward)?;
        Ok(self.graph.push(
            out,
            Op::AddRow {
                x: self.id,
                bias: bias.id,
            },
        ))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let out = self.with_values(other, |a, b| {
            if a.shape() != b.shape() {
                return Err(Error::shape("mul", a.shape(), b.shape()));
            }
            Ok(Tensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
            ))
        })?;
        Ok(self.graph.push(
            out,
            Op::Mul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let c = T::cast_from(c);
        let out = self.with_value(|x| x.map(|v| v * c));
        self.graph.push(out, Op::Scale { x: self.id, c })
    }

    pub fn unary(self, f: UnaryFn) -> Var<'g, T> {
        let out = self.with_value(|x| x.map(|v| f.apply(v)));
        self.graph.push(out, Op::Unary { x: self.id, f })
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(UnaryFn::Relu)
    }

    pub fn softplus(self) -> Var<'g, T> {
        self.unary(UnaryFn::Softplus)
    }

    pub fn elu_plus_one(self) -> Var<'g, T> {
        self.unary(UnaryFn::EluPlusOne)
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(UnaryFn::Exp)
    }

    pub fn softmax_rows(self) -> Result<Var<'g, T>> {
        let out = self.with_value(|x| {
            let (m, n) = x.dims2()?;
            crate::tensor::kernels::softmax_rows(x.data(), m, n)
                .map(|d| Tensor::from_parts(vec![m, n], d))
        })?;
        Ok(self.graph.push(out, Op::SoftmaxRows { x: self.id }))
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let nodes = self.graph.nodes.borrow();
        let (x, g, b) = (
            &nodes[self.id].value,
            &nodes[gamma.id].value,
            &nodes[beta.id].value,
        );
        let (out, xhat, rstd) = ops::layer_norm_forward(x, g, b, eps)?;
        drop(nodes);
        Ok(self.graph.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        ))
    }

    /// `[N, C_in]` ⋆ `[k, C_in, C_out]` → `[N_out, C_out]`, cross-correlation with zero padding.
    pub fn conv1d(self, w: Var<'g, T>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let (out, geom) = self.with_values(w, |x, w| ops::conv1d_forward(x, w, stride, pad))?;
        Ok(self.graph.push(
            out,
            Op::Conv1d {
                x: self.id,
                w: w.id,
                geom,
            },
        ))
    }

    /// `[H, W, C_in]` ⋆ `[kh, kw, C_in, C_out]` → `[H_out, W_out, C_out]`.
    pub fn conv2d(
        self,
        w: Var<'g, T>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var<'g, T>> {
        let (out, geom) = self.with_values(w, |x, w| ops::conv2d_forward(x, w, stride, pad))?;
        Ok(self.graph.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                geom,
            },
        ))
    }

    /// Windowed mean over the token axis of `[N, C]`.
    pub fn avg_pool1d(self, kernel: usize, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let (out, geom) = self.with_value(|x| ops::avg_pool1d_forward(x, kernel, stride, pad))?;
        Ok(self.graph.push(out, Op::AvgPool1d { x: self.id, geom }))
    }

    pub fn avg_pool2d(
        self,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var<'g, T>> {
        let (out, geom) = self.with_value(|x| ops::avg_pool2d_forward(x, kernel, stride, pad))?;
        Ok(self.graph.push(out, Op::AvgPool2d { x: self.id, geom }))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let out = self.with_value(|x| ops::slice_cols(x, start, len))?;
        Ok(self.graph.push(out, Op::SliceCols { x: self.id, start }))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let out = self.with_value(|x| ops::slice_rows(x, start, len))?;
        Ok(self.graph.push(out, Op::SliceRows { x: self.id, start }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let out = self.with_value(|x| x.clone().reshape(shape))?;
        Ok(self.graph.push(out, Op::Reshape { x: self.id }))
    }

    pub fn sum(self) -> Var<'g, T> {
        let out = self.with_value(|x| Tensor::scalar(x.sum()));
        self.graph.push(out, Op::Sum { x: self.id })
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.with_value(|x| x.len());
        self.sum().scale(1.0 / n as f64)
    }
}

/// Concatenates rank-2 tensors along columns.
pub fn concat_cols<'g, T: Scalar>(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let g = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?
        .graph;
    let out = {
        let nodes = g.nodes.borrow();
        let ts: Vec<&Tensor<T>> = parts.iter().map(|p| &*nodes[p.id].value).collect();
        ops::concat_cols(&ts)?
    };
    Ok(g.push(
        out,
        Op::ConcatCols {
            parts: parts.iter().map(|p| p.id).collect(),
        },
    ))
}

/// Concatenates rank-2 tensors along rows.
pub fn concat_rows<'g, T: Scalar>(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let g = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?
        .graph;
    let out = {
        let nodes = g.nodes.borrow();
        let ts: Vec<&Tensor<T>> = parts.iter().map(|p| &*nodes[p.id].value).collect();
        ops::concat_rows(&ts)?
    };
    Ok(g.push(
        out,
        Op::ConcatRows {
            parts: parts.iter().map(|p| p.id).collect(),
        },
    ))
}

#[cfg(test)]
mod tests;
