//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] is an append-only list of nodes. Every differentiable
//! operation evaluates its forward value eagerly, pushes a node recording
//! its inputs and whatever it needs for the backward rule, and returns a
//! [`Var`] handle. Because inputs must already exist when an operation is
//! recorded, node order is a topological order and [`Tape::backward`] is a
//! single reverse sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::conv::PaddingMode;
use super::{conv, norm, ops};
use crate::{origin, sampler};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: PaddingMode,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SpatialSoftmax {
        input: Var,
    },
    Centroid {
        input: Var,
    },
    Affine {
        input: Var,
        scale: T,
    },
    Mask {
        input: Var,
        pass: Vec<bool>,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Reshape {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
    PolarGrid {
        origin: Var,
    },
    BilinearSample {
        input: Var,
        grid: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
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

    /// Records an input tensor. Gradients are accumulated for it during
    /// [`backward`](Self::backward) only when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates gradients from a scalar `loss` back to every reachable
    /// leaf created with `requires_grad`.
    ///
    /// Intermediate gradients are released once consumed; only leaf
    /// gradients remain readable through [`grad`](Self::grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Ok(());
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(shape, T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            for (target, contribution) in self.input_grads(idx, &grad)? {
                let node = &mut self.nodes[target.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, idx: usize, grad: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (dx, dk) = conv::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    *stride,
                    *padding,
                    grad,
                    wants(input),
                    wants(kernel),
                )?;
                let mut v = Vec::new();
                if let Some(dx) = dx {
                    v.push((*input, dx));
                }
                if let Some(dk) = dk {
                    v.push((*kernel, dk));
                }
                v
            }
            Op::ChannelBias { input, bias } => {
                let db = conv::channel_bias_backward(grad)?;
                vec![(*input, grad.clone()), (*bias, db)]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let g = norm::BatchNormSaved {
                    xhat,
                    inv_std,
                    train: *train,
                };
                let (dx, dgamma, dbeta) = norm::backward(grad, self.value(*gamma), &g)?;
                vec![(*input, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Relu { input } => vec![(*input, ops::relu_backward(self.value(*input), grad))],
            Op::GlobalAvgPool { input } => {
                vec![(*input, ops::global_average_pool_backward(self.value(*input), grad)?)]
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => vec![(
                *logits,
                ops::softmax_cross_entropy_backward(self.value(*logits), labels, probs, grad)?,
            )],
            Op::SpatialSoftmax { input } => {
                vec![(*input, origin::spatial_softmax_backward(&node.value, grad)?)]
            }
            Op::Centroid { input } => {
                vec![(*input, origin::centroid_backward(self.value(*input), grad)?)]
            }
            Op::Affine { input, scale } => vec![(*input, grad.map(|g| g * *scale))],
            Op::Mask { input, pass } => {
                let mut g = grad.clone();
                for (x, &p) in g.data_mut().iter_mut().zip(pass) {
                    if !p {
                        *x = T::zero();
                    }
                }
                vec![(*input, g)]
            }
            Op::Add { lhs, rhs } => vec![(*lhs, grad.clone()), (*rhs, grad.clone())],
            Op::Reshape { input } => {
                let shape = self.value(*input).shape().to_vec();
                vec![(*input, grad.clone().reshape(shape)?)]
            }
            Op::WeightedSum { input, weights } => {
                let g = grad.item()?;
                let shape = self.value(*input).shape().to_vec();
                let data = weights.iter().map(|&w| w * g).collect();
                vec![(*input, Tensor::new(shape, data)?)]
            }
            Op::PolarGrid { origin } => {
                vec![(*origin, sampler::polar_grid_backward(grad)?)]
            }
            Op::BilinearSample { input, grid } => {
                let (di, dg) =
                    sampler::bilinear_backward(self.value(*input), self.value(*grid), grad, wants(input), wants(grid))?;
                let mut v = Vec::new();
                if let Some(di) = di {
                    v.push((*input, di));
                }
                if let Some(dg) = dg {
                    v.push((*grid, dg));
                }
                v
            }
        };
        Ok(out)
    }
}
