//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough context to push gradients to its inputs. Inputs always precede
//! their consumers, so [`Graph::backward`] is a single reverse sweep.
//! Gradients accumulate additively when a value feeds several consumers.

pub mod gradcheck;
mod ops;
pub mod optim;
mod tensor;

pub use gradcheck::{check_gradients, GradReport};
pub(crate) use ops::{focal_term, liou_terms};
pub use optim::{cosine_lr, sgd_step, Adam, Sgd};
pub use tensor::Tensor;

use crate::error::{shape_err, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

/// Pre-softmax score given to correlation candidates outside the frame.
pub const OUT_OF_BOUNDS_SCORE: f64 = -1e9;

/// One pixel of a lane-IoU regression term: the coefficient vector at
/// `pixel` (flattened `y * W + x`) is decoded and compared to lane `target`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LiouSample {
    pub pixel: usize,
    pub target: usize,
}

pub(crate) enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize, cols: Vec<Vec<f64>> },
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    SoftmaxChannels(Var),
    Resize { input: Var, scale: Option<(f64, f64)> },
    Concat(Vec<Var>),
    Warp { map: Var, flow: Var },
    Correlation { cur: Var, prev: Var, radius: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Focal { prob: Var, target: Vec<f64>, alpha: f64, gamma: f64 },
    Mse { input: Var, target: Vec<f64> },
    Liou { coeff: Var, basis: Vec<f64>, samples: Vec<LiouSample>, targets: Vec<Vec<f64>>, half_width: f64 },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Relu(a) | Op::Silu(a) | Op::Sigmoid(a) | Op::SoftmaxChannels(a) => vec![*a],
            Op::Scale(a, _) | Op::Sum(a) | Op::Mean(a) => vec![*a],
            Op::Resize { input, .. } => vec![*input],
            Op::Concat(v) => v.clone(),
            Op::Warp { map, flow } => vec![*map, *flow],
            Op::Correlation { cur, prev, .. } => vec![*cur, *prev],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Focal { prob, .. } => vec![*prob],
            Op::Mse { input, .. } => vec![*input],
            Op::Liou { coeff, .. } => vec![*coeff],
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Tape of executed operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
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

    /// Gradient of the last `backward` call with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of `v`, zeros when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.value(v).len()])
    }

    pub(crate) fn accumulate(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g.to_vec()),
        }
    }

    /// Populate gradients of every tracked ancestor of a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return shape_err(format!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &grad);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }
}
