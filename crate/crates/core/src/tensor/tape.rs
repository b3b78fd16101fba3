use super::ops::ConvGeom;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Leaf,
    StopGradient,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        // None when the im2col matrix is the input itself (1x1, stride 1)
        cols: Option<Vec<T>>,
    },
    GroupedLinear {
        x: Var,
        w: Var,
        b: Option<Var>,
        groups: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Softmax {
        x: Var,
        axis: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    Cosine {
        u: Var,
        v: Var,
        eps: T,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        ignore: u32,
        probs: Vec<T>,
        count: usize,
    },
    Bilinear(Var),
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) op: Op<T>,
}

/// Ordered record of operations supporting reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it and
/// backward is a single reverse sweep. A tape is confined to one thread.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    track_kinks: bool,
    kink_hash: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track_kinks: false,
            kink_hash: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// Record a fingerprint of every ReLU activation pattern evaluated on this tape.
    ///
    /// Two evaluations with equal fingerprints took the same branch at every kink,
    /// which lets finite-difference checks detect steps that straddle one.
    pub fn with_kink_tracking(mut self) -> Self {
        self.track_kinks = true;
        self
    }

    pub fn kink_fingerprint(&self) -> u64 {
        self.kink_hash
    }

    pub(crate) fn record_kinks(&mut self, active: impl Iterator<Item = bool>) {
        if !self.track_kinks {
            return;
        }
        let mut h = self.kink_hash;
        for bit in active {
            h ^= bit as u64 + 1;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        self.kink_hash = h;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input tensor; gradients are accumulated for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, present only after a backward pass reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Stop gradient: forward identity, contributes nothing to `x` in backward.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, false, Op::StopGradient)
    }

    /// Back-propagate from a scalar root.
    ///
    /// Gradients are added to any already present, so repeated calls without
    /// [`Tape::zero_grad`] accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let n = root.0 + 1;
        let mut adj: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            adj[root.0] = Some(vec![T::one()]);
        }
        let mut done: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.backward_node(i, &g, &mut adj);
            done[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(done) {
            let Some(g) = g else { continue };
            if !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Adjoint buffer of `v`, allocated on first use; `None` when `v` needs no grad.
    pub(crate) fn adj_slot<'a>(
        &self,
        adj: &'a mut [Option<Vec<T>>],
        v: Var,
    ) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(adj[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
    }
}
