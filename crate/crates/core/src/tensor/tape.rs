use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation implemented outside the engine.
///
/// `needs[i]` tells whether input `i` wants a gradient; entries for inputs
/// that do not may be returned as `None`.
pub trait CustomOp<R: Real> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<R>],
        output: &Tensor<R>,
        grad: &[R],
        needs: &[bool],
    ) -> Vec<Option<Vec<R>>>;
}

pub(crate) enum Op<R: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, R),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sigmoid(Var),
    Silu(Var),
    LeakyRelu(Var, R),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Broadcast(Var),
    OuterProduct(Var, Var),
    RmsNorm {
        x: Var,
        eps: R,
    },
    L2NormalizeRows(Var),
    LogSumExpRows(Var),
    Diagonal(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    Deconv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<R>>,
    },
}

pub(crate) struct Node<R: Real> {
    pub(crate) value: Tensor<R>,
    pub(crate) op: Op<R>,
    pub(crate) requires_grad: bool,
}

/// Ordered record of executed operations. Node indices are a topological
/// order: an operation is always pushed after every one of its inputs.
pub struct Tape<R: Real> {
    pub(crate) nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    pub(crate) fn push(&mut self, value: Tensor<R>, op: Op<R>, inputs: &[Var]) -> Var {
        let requires_grad = self.any_requires_grad(inputs);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records the result of an externally computed operation together with
    /// its backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<R>, op: Box<dyn CustomOp<R>>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse sweep from a one-element root. Returns the accumulated
    /// gradient of every leaf that requires one.
    pub fn backward(&self, root: Var) -> Result<Gradients<R>> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..=root.0).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![R::one()]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        let shapes = self.nodes[..=root.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    pub(crate) fn accumulate(&self, grads: &mut [Option<Vec<R>>], v: Var, contrib: Vec<R>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<R> {
    grads: Vec<Option<Vec<R>>>,
    shapes: Vec<Vec<usize>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of `v`; `None` if `v` is not a differentiable leaf reached
    /// from the root.
    pub fn get(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when the root does not depend on it.
    pub fn tensor(&self, v: Var) -> Option<Tensor<R>> {
        let shape = self.shapes.get(v.0)?;
        Some(match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        })
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<R>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
