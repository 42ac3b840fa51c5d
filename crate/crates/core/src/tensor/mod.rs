//! Dense tensors with reverse-mode automatic differentiation on an
//! append-only tape.
//!
//! The [`Graph`] owns two arenas: leaves (inputs, parameters,
//! perturbation buffers) and tape nodes (recorded operations). Leaves
//! survive [`Graph::reset`]; tape nodes do not. All arithmetic is f64.

mod ops;

pub use ops::OpKind;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("backward expects a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called twice without reset")]
    DoubleBackward,
    #[error("conv2d kernel size {0} exceeds supported maximum of 5")]
    KernelTooLarge(usize),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

/// Handle to a value in a [`Graph`]. Copyable; invalidated for tape
/// nodes by `reset` and for leaves by `truncate_leaves`.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Tensor {
    Leaf(usize),
    Node(usize),
}

struct LeafData {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

struct NodeData {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: ops::Op,
}

#[derive(Default)]
pub struct Graph {
    leaves: Vec<LeafData>,
    nodes: Vec<NodeData>,
    backward_done: bool,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// sign with the deterministic tie-break sign(0) = 0.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(
            numel(&shape),
            values.len(),
            "leaf: {} values for shape {:?}",
            values.len(),
            shape
        );
        self.leaves.push(LeafData {
            shape,
            values,
            grad: None,
            requires_grad,
        });
        Tensor::Leaf(self.leaves.len() - 1)
    }

    pub fn scalar_leaf(&mut self, v: f64, requires_grad: bool) -> Tensor {
        self.leaf(vec![1], vec![v], requires_grad)
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        match t {
            Tensor::Leaf(i) => &self.leaves[i].shape,
            Tensor::Node(i) => &self.nodes[i].shape,
        }
    }

    pub fn values(&self, t: Tensor) -> &[f64] {
        match t {
            Tensor::Leaf(i) => &self.leaves[i].values,
            Tensor::Node(i) => &self.nodes[i].values,
        }
    }

    /// Mutable access to a leaf's value buffer. Only legal between tape
    /// resets; panics on tape nodes.
    pub fn values_mut(&mut self, t: Tensor) -> &mut [f64] {
        match t {
            Tensor::Leaf(i) => &mut self.leaves[i].values,
            Tensor::Node(_) => panic!("values_mut: tape nodes are immutable"),
        }
    }

    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        match t {
            Tensor::Leaf(i) => self.leaves[i].grad.as_deref(),
            Tensor::Node(i) => self.nodes[i].grad.as_deref(),
        }
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        match t {
            Tensor::Leaf(i) => self.leaves[i].requires_grad,
            Tensor::Node(i) => self.nodes[i].needs_grad,
        }
    }

    pub fn set_requires_grad(&mut self, t: Tensor, rg: bool) {
        match t {
            Tensor::Leaf(i) => self.leaves[i].requires_grad = rg,
            Tensor::Node(_) => panic!("set_requires_grad: leaves only"),
        }
    }

    /// Copy of a tensor's values as a fresh non-differentiable leaf.
    pub fn detach(&mut self, t: Tensor) -> Tensor {
        let shape = self.shape(t).to_vec();
        let values = self.values(t).to_vec();
        self.leaf(shape, values, false)
    }

    /// Number of recorded tape nodes.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_watermark(&self) -> usize {
        self.leaves.len()
    }

    /// Drop leaves created after `watermark`; handles past it become invalid.
    pub fn truncate_leaves(&mut self, watermark: usize) {
        assert!(
            self.nodes.is_empty(),
            "truncate_leaves: reset the tape first"
        );
        self.leaves.truncate(watermark);
    }

    /// Free all tape nodes and zero leaf gradients. Leaves survive.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
        for leaf in &mut self.leaves {
            leaf.grad = None;
        }
    }

    pub fn zero_grad(&mut self, t: Tensor) {
        if let Tensor::Leaf(i) = t {
            self.leaves[i].grad = None;
        }
    }

    pub(crate) fn push_node(&mut self, shape: Vec<usize>, values: Vec<f64>, op: ops::Op) -> Tensor {
        let needs_grad = op.inputs().iter().any(|&p| self.requires_grad(p));
        self.nodes.push(NodeData {
            shape,
            values,
            grad: None,
            needs_grad,
            op,
        });
        Tensor::Node(self.nodes.len() - 1)
    }

    fn accum(&mut self, t: Tensor, contrib: &[f64]) {
        match t {
            Tensor::Leaf(i) => {
                let leaf = &mut self.leaves[i];
                if !leaf.requires_grad {
                    return;
                }
                let g = leaf.grad.get_or_insert_with(|| vec![0.0; leaf.values.len()]);
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            Tensor::Node(i) => {
                let node = &mut self.nodes[i];
                if !node.needs_grad {
                    return;
                }
                let g = node.grad.get_or_insert_with(|| vec![0.0; node.values.len()]);
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
        }
    }

    /// Reverse sweep from a scalar loss; populates `grad` on every
    /// requires_grad leaf reachable from it.
    pub fn backward(&mut self, loss: Tensor) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::DoubleBackward);
        }
        let shape = self.shape(loss).to_vec();
        if numel(&shape) != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.backward_done = true;
        let loss_idx = match loss {
            Tensor::Node(i) => i,
            Tensor::Leaf(i) => {
                // Degenerate: a bare leaf as loss. dL/dL = 1.
                if self.leaves[i].requires_grad {
                    self.leaves[i].grad = Some(vec![1.0]);
                }
                return Ok(());
            }
        };
        self.nodes[loss_idx].grad = Some(vec![1.0]);
        for idx in (0..=loss_idx).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g_out) = self.nodes[idx].grad.clone() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            self.backprop_node(idx, &op, &g_out);
        }
        Ok(())
    }
}
