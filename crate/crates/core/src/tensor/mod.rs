//! Dense real arrays and a small reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation executed on it in order; a [`Var`] is a
//! handle to one recorded value. Calling [`Graph::backward`] walks the record
//! in reverse and accumulates gradients into every leaf created with
//! [`Graph::leaf`]. Leaf gradients are *accumulated*: calling `backward` twice
//! without [`Graph::zero_grad`] doubles them.
//!
//! Only the operations the scene model needs are provided. All of them are
//! generic over [`Real`], so the same code runs at 32-bit (training) and
//! 64-bit (gradient verification).

mod conv;
mod elementwise;
mod fft;
pub mod gradcheck;
mod linalg;
pub mod optim;
mod shape_ops;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use conv::ConvSpec;
pub use elementwise::{BinaryOp, UnaryOp};
pub use fft::{FftMode, FftPlan};
pub use shape_ops::ReduceOp;

/// Floating-point element type of tensors and graphs.
pub trait Real:
    Float + rustfft::FftNum + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Single;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Double;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                detail: format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(vec![1], value)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|x| U::of(x.as_f64())).collect()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }
}

/// Handle to a value recorded on a [`Graph`]. Only meaningful for the graph
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
pub trait CustomOp<T: Real>: Send {
    fn name(&self) -> &'static str;

    /// Adds `d(loss)/d(input)` into `sink` for every input, given the
    /// operation's output value and `d(loss)/d(output)`.
    fn backward(&self, output: &[T], grad_out: &[T], sink: &mut GradSink<'_, T>);
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Unary {
        kind: UnaryOp,
        x: usize,
    },
    Binary {
        kind: BinaryOp,
        a: usize,
        b: usize,
        a_pat: elementwise::Pattern,
        b_pat: elementwise::Pattern,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv(conv::ConvNode),
    Fft(fft::FftNode),
    Shape(shape_ops::ShapeNode),
    Custom(Box<dyn CustomOp<T>>),
}

pub(crate) struct Node<T: Real> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Gradient accumulator handed to backward rules. Parents always precede
/// their children on the tape, so the sink only covers earlier nodes.
pub struct GradSink<'a, T: Real> {
    grads: &'a mut [Option<Vec<T>>],
    nodes: &'a [Node<T>],
}

impl<'a, T: Real> GradSink<'a, T> {
    /// Gradient buffer of `v`, or `None` when `v` does not need a gradient.
    pub fn grad_mut(&mut self, v: Var) -> Option<&mut Vec<T>> {
        self.slot(v.0)
    }

    pub fn value(&self, v: Var) -> &'a [T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &'a [usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot(&mut self, id: usize) -> Option<&mut Vec<T>> {
        let node = &self.nodes[id];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[id].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

/// Execution record of one forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t`; it is a gradient leaf iff `t.requires_grad`.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t.shape, t.data, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t.shape, t.data, true)
    }

    pub fn constant_scalar(&mut self, x: T) -> Var {
        self.push_leaf(vec![1], vec![x], false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, parents: &[usize], op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records the result of a [`CustomOp`] whose inputs are `parents`.
    pub fn push_custom(
        &mut self,
        shape: Vec<usize>,
        value: Vec<T>,
        parents: &[Var],
        op: Box<dyn CustomOp<T>>,
    ) -> Var {
        let ids: Vec<usize> = parents.iter().map(|v| v.0).collect();
        self.push(shape, value, &ids, Op::Custom(op))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First element of `v`, as f64.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0].as_f64()
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        Tensor {
            shape: node.shape.clone(),
            data: node.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn ensure_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Reverse-mode sweep from a scalar `loss`, accumulating into leaf grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let (before, _) = grads.split_at_mut(i);
            let mut sink = GradSink {
                grads: before,
                nodes: &self.nodes,
            };
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Unary { kind, x } => {
                    elementwise::unary_backward(*kind, *x, &node.value, &g, &mut sink)
                }
                Op::Binary {
                    kind,
                    a,
                    b,
                    a_pat,
                    b_pat,
                } => elementwise::binary_backward(*kind, (*a, *a_pat), (*b, *b_pat), &g, &mut sink),
                Op::MatMul { a, b, m, k, n } => {
                    linalg::matmul_backward(*a, *b, (*m, *k, *n), &g, &mut sink)
                }
                Op::Conv(c) => c.backward(&g, &mut sink),
                Op::Fft(f) => f.backward(&g, &mut sink),
                Op::Shape(s) => s.backward(&g, &mut sink),
                Op::Custom(c) => c.backward(&node.value, &g, &mut sink),
            }
        }

        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

pub(crate) fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_f64(vec![2, 3], &[1., -2., 3., 0.5, 7., -1.]).unwrap());
        let s = g.sum_all(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_square_is_identity() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_f64(vec![2], &[1.0, -2.0]).unwrap());
        let sq = g.unary(UnaryOp::Square, w).unwrap();
        let s = g.sum_all(sq);
        let half = g.unary(UnaryOp::Scale(0.5), s).unwrap();
        g.backward(half).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, -2.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap());
        let s = g.sum_all(w);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0; 3]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones(vec![2]));
        let w = g.leaf(Tensor::ones(vec![2]));
        let p = g.binary(BinaryOp::Mul, c, w).unwrap();
        let s = g.sum_all(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0]);
    }
}
