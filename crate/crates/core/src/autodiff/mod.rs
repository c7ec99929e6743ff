//! Dense 64-bit real arrays with reverse-mode gradient accumulation.
//!
//! The engine is deliberately small: a [`Tape`] records every primitive
//! applied during a forward pass, [`Tape::backward`] replays the adjoints
//! in reverse, and [`Sgd`] consumes the harvested gradients. Parameters
//! live outside the tape as [`DenseArray`] values; each training step
//! creates a fresh tape, binds the parameters as leaves, and copies the
//! leaf gradients back after the backward pass.
//!
//! All reductions run in a fixed order, so forward and backward results
//! are bit-identical across runs for identical inputs.

mod array;
mod ops;
mod sgd;

pub use array::DenseArray;
pub use sgd::Sgd;

use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    Mean(Var),
    Sum(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    },
    Upsample2x(Var),
    GlobalAvgPool(Var),
    ConcatChannels(Var, Var),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        softmax: Vec<f64>,
    },
    Mse(Var, Var),
    NllPick {
        probs: Var,
        class: usize,
    },
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Records a forward pass; owned by exactly one worker.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    adjoints: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            adjoints: Vec::new(),
            backward_done: false,
        }
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = match &op {
            Op::Leaf => false,
            other => op_parents(other).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies an array onto the tape as a leaf. Gradients are retrievable
    /// for it after [`Tape::backward`] when `array.requires_grad()` is set.
    pub fn leaf(&mut self, array: &DenseArray) -> Var {
        let var = self.push(array.shape().to_vec(), array.data().to_vec(), Op::Leaf);
        self.nodes[var.0].requires_grad = array.requires_grad();
        var
    }

    /// A leaf that never tracks gradients (model inputs, targets).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let array = DenseArray::new(shape, data)?;
        Ok(self.leaf(&array))
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn data(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].data
    }

    pub fn to_array(&self, var: Var) -> DenseArray {
        DenseArray::new(self.nodes[var.0].shape.clone(), self.nodes[var.0].data.clone())
            .expect("tape nodes hold consistent shapes")
    }

    /// Scalar value of a rank-0 (or single-element) node.
    pub fn scalar_value(&self, var: Var) -> Result<f64> {
        let node = &self.nodes[var.0];
        if node.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar, got shape {:?}",
                node.shape
            )));
        }
        Ok(node.data[0])
    }

    /// Propagates adjoints from a scalar loss back to every recorded node.
    /// Calling it twice on the same tape is a contract violation.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice on the same tape".into(),
            ));
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.shape
            )));
        }
        self.backward_done = true;
        self.adjoints = (0..self.nodes.len()).map(|_| None).collect();
        self.adjoints[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            // Nodes with no differentiable ancestry cannot reach a
            // requires_grad leaf; their parents need no contribution.
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(out_grad) = self.adjoints[idx].take() else {
                continue;
            };
            ops::accumulate_parents(self, idx, &out_grad);
            self.adjoints[idx] = Some(out_grad);
        }
        Ok(())
    }

    /// Gradient of the loss with respect to `var`, valid after
    /// [`Tape::backward`]. Untouched nodes have a zero gradient.
    pub fn grad(&self, var: Var) -> Result<Vec<f64>> {
        if !self.backward_done {
            return Err(Error::Contract("grad queried before backward".into()));
        }
        Ok(match &self.adjoints[var.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[var.0].data.len()],
        })
    }

    pub(crate) fn adjoint_mut(&mut self, var: Var) -> &mut Vec<f64> {
        let len = self.nodes[var.0].data.len();
        self.adjoints[var.0].get_or_insert_with(|| vec![0.0; len])
    }
}

pub(crate) fn op_parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Matmul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::ConcatChannels(a, b) | Op::Mse(a, b) => {
            vec![*a, *b]
        }
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Tanh(a)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::SoftmaxRows(a)
        | Op::Mean(a)
        | Op::Sum(a)
        | Op::Upsample2x(a)
        | Op::GlobalAvgPool(a)
        | Op::Reshape(a) => vec![*a],
        Op::Conv2d { x, kernel, bias, .. } => vec![*x, *kernel, *bias],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::NllPick { probs, .. } => vec![*probs],
    }
}
