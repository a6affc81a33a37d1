//! Execution-order recording of forward operations and the reverse sweep.
//!
//! Every op pushes one node; node ids are topological by construction, so
//! one reverse walk visits consumers before producers. `backward` may run
//! once per tape: it frees intermediate activations as it goes and leaves
//! gradients on the `requires_grad` leaves.

use super::kernels::{Conv3dGeom, ConvT3dGeom};
use super::{numel, ops, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type TensorId = usize;

/// Recorded operation with whatever the backward pass needs.
#[derive(Debug)]
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    MulScalar { x: TensorId, c: T },
    AddBroadcast { x: TensorId, b: TensorId },
    AddConst { x: TensorId },
    Matmul { a: TensorId, b: TensorId, batch: usize, m: usize, k: usize, n: usize, b_shared: bool, transpose_b: bool },
    Reshape { x: TensorId },
    Permute { x: TensorId, axes: Vec<usize> },
    Roll { x: TensorId, shift: [usize; 3] },
    GatherRows { table: TensorId, idx: Vec<usize> },
    Softmax { x: TensorId },
    Gelu { x: TensorId },
    LeakyRelu { x: TensorId, slope: T },
    Dropout { x: TensorId, mask: Vec<T> },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, mean: Vec<T>, rstd: Vec<T> },
    InstanceNorm { x: TensorId, gamma: TensorId, beta: TensorId, mean: Vec<T>, rstd: Vec<T> },
    Conv3d { x: TensorId, w: TensorId, bias: TensorId, geom: Conv3dGeom },
    ConvT3d { x: TensorId, w: TensorId, geom: ConvT3dGeom },
    ConcatChannels { a: TensorId, b: TensorId, a_channels: usize },
    CrossEntropy { logits: TensorId, labels: Vec<u8>, ignore: u8, count: usize, lse: Vec<T> },
    SumAll { x: TensorId },
}

#[derive(Debug)]
pub(crate) struct Node<T: Scalar> {
    pub(crate) tensor: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) is_leaf: bool,
    /// True when a gradient must flow through this node.
    pub(crate) needs: bool,
}

#[derive(Debug)]
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor; its `requires_grad` flag decides whether
    /// `backward` will produce a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> TensorId {
        let needs = tensor.requires_grad;
        self.nodes.push(Node { tensor, op: Op::Leaf, is_leaf: true, needs });
        self.nodes.len() - 1
    }

    /// Record a non-differentiable input.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> TensorId {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub(crate) fn push(&mut self, tensor: Tensor<T>, op: Op<T>, needs: bool) -> TensorId {
        self.nodes.push(Node { tensor, op, is_leaf: false, needs });
        self.nodes.len() - 1
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id].tensor.shape()
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        self.nodes[id].tensor.data()
    }

    pub(crate) fn needs(&self, id: TensorId) -> bool {
        self.nodes[id].needs
    }

    /// Clone the value out of the tape (shape + data, no grad state).
    pub fn value(&self, id: TensorId) -> Tensor<T> {
        let node = &self.nodes[id].tensor;
        Tensor::new(node.shape().to_vec(), node.data().to_vec()).expect("node tensors are valid")
    }

    pub fn scalar_value(&self, id: TensorId) -> T {
        self.nodes[id].tensor.data()[0]
    }

    /// Gradient of a leaf after `backward`; `None` for non-leaves or
    /// tensors recorded without `requires_grad`.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id].tensor.grad.as_deref()
    }

    /// Reverse sweep from a scalar loss. Frees intermediate activations;
    /// the tape cannot run backward a second time.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.done {
            return Err(Error::Tape("backward called twice on the same tape".into()));
        }
        let node = self
            .nodes
            .get(loss)
            .ok_or_else(|| Error::Tape(format!("unknown tensor id {loss}")))?;
        if node.tensor.numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.tensor.shape()
            )));
        }
        self.done = true;
        let mut grads = GradBufs::new(self.nodes.len());
        if self.nodes[loss].needs {
            grads.slots[loss] = Some(vec![T::ONE]);
        }
        for id in (0..self.nodes.len()).rev() {
            // scalars (loss values) stay readable after the sweep
            let free = |node: &mut Node<T>| {
                if !node.is_leaf && node.tensor.numel() > 1 {
                    node.tensor.take_data();
                }
            };
            let g = match grads.take(id) {
                Some(g) => g,
                None => {
                    free(&mut self.nodes[id]);
                    continue;
                }
            };
            if self.nodes[id].is_leaf {
                if self.nodes[id].tensor.requires_grad {
                    self.nodes[id].tensor.grad = Some(g);
                }
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            ops::backward_op(op, id, &g, &self.nodes, &mut grads);
            free(&mut self.nodes[id]);
        }
        // A leaf the loss never touched still has a defined gradient: zero.
        for node in self.nodes.iter_mut() {
            if node.is_leaf && node.tensor.requires_grad && node.tensor.grad.is_none() {
                node.tensor.grad = Some(vec![T::ZERO; numel(node.tensor.shape())]);
            }
        }
        Ok(())
    }
}

/// Per-node gradient accumulation buffers used during the reverse sweep.
pub(crate) struct GradBufs<T: Scalar> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradBufs<T> {
    fn new(n: usize) -> Self {
        GradBufs { slots: (0..n).map(|_| None).collect() }
    }

    fn take(&mut self, id: TensorId) -> Option<Vec<T>> {
        self.slots[id].take()
    }

    /// Zero-initialized accumulation buffer for `id`.
    pub(crate) fn acc(&mut self, id: TensorId, len: usize) -> &mut [T] {
        self.slots[id].get_or_insert_with(|| vec![T::ZERO; len]).as_mut_slice()
    }

    pub(crate) fn add_slice(&mut self, id: TensorId, src: &[T]) {
        let dst = self.acc(id, src.len());
        for (d, s) in dst.iter_mut().zip(src.iter()) {
            *d += *s;
        }
    }
}
