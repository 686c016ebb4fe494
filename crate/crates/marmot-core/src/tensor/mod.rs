//! Reverse-mode automatic differentiation over row-major `f64` tensors.
//!
//! A [`Tensor`] is a cheaply clonable handle to a graph node. Operations record
//! their inputs, so calling [`Tensor::backward`] on a scalar loss walks the
//! producer graph in reverse topological order and accumulates `d loss / d leaf`
//! into the grad slot of every reachable leaf that requires gradients. Grad
//! slots accumulate across repeated `backward` calls until reset with
//! [`Tensor::zero_grad`].
//!
//! Two properties are load-bearing and worth stating up front:
//!
//! * Reductions along a softmax axis and inside [`Tensor::weighted_sum_rows`]
//!   sum their terms in a value-canonical order (sorted by `f64::total_cmp`).
//!   Summing the same multiset of terms therefore gives bitwise-identical
//!   results no matter how the sequence axis was permuted, which is what makes
//!   self-attention permutation equivariance hold exactly, not just
//!   approximately.
//! * Masking uses an exact `-inf` sentinel. Softmax excludes sentinel entries
//!   from its max and normalizing sum and writes literal `0.0` weights for
//!   them, and the backward pass skips any node whose whole adjoint is zero.
//!   Together these make outputs and parameter gradients bitwise independent
//!   of the content at masked positions.
//!
//! Values are immutable while a graph built from them is alive; the one
//! exception is [`Tensor::update_values`], which optimizers use on leaf
//! parameters between graph builds.

mod ops;
mod vjp;

pub use ops::softmax_values;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for size {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub(crate) type Result<T> = std::result::Result<T, TensorError>;

/// Operation that produced a node, with whatever bookkeeping its backward
/// rule needs. Input tensors live in [`Producer::inputs`].
#[derive(Debug)]
pub(crate) enum Op {
    /// `[m,k] x [k,n] -> [m,n]`.
    MatMul,
    /// Rank-2 transpose.
    Transpose,
    /// Elementwise sum of two same-shape tensors.
    Add,
    /// Elementwise product of two same-shape tensors.
    MulElem,
    /// Multiply by a compile-time constant scalar.
    Scale(f64),
    /// `[n,m] + [m]` broadcast over rows.
    AddBias,
    Relu,
    /// Softmax along `axis`; `-inf` entries are masked out exactly.
    Softmax { axis: usize },
    /// Replace entries where `allowed` is false with the `-inf` sentinel.
    MaskFill { allowed: Vec<bool> },
    /// `weights [q,k] x values [k,d]`, skipping zero weights; see module docs.
    WeightedSum,
    /// Per-row normalization of `x` with learned scale and shift.
    LayerNorm { eps: f64 },
    /// Row lookup: `table [v,d]` gathered at `indices` -> `[indices.len(), d]`.
    Gather { indices: Vec<usize> },
    /// Stack rank-2 inputs on the row axis; `splits` holds input row counts.
    ConcatRows { splits: Vec<usize> },
    /// Stack rank-2 inputs on the column axis; `splits` holds column counts.
    ConcatCols { splits: Vec<usize> },
    SliceRows { start: usize, len: usize },
    /// Average of the listed rows -> `[1,d]`.
    MeanRows { rows: Vec<usize> },
    /// Sum of all entries -> `[1]`.
    SumAll,
    /// Softmax cross-entropy of logits against a class index -> `[1]`.
    CrossEntropy { label: usize },
}

#[derive(Debug)]
pub(crate) struct Producer {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Tensor>,
}

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) values: RefCell<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Vec<f64>>>,
    pub(crate) producer: Option<Producer>,
}

/// Handle to an autodiff graph node. Cloning is O(1) and shares the node.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("values", &self.inner.values.borrow())
            .finish()
    }
}

impl Tensor {
    fn new_leaf(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!(
                    "shape {:?} wants {} values, got {}",
                    shape,
                    expect,
                    values.len()
                ),
            });
        }
        let grad = if requires_grad {
            Some(vec![0.0; values.len()])
        } else {
            None
        };
        Ok(Tensor {
            inner: Rc::new(Node {
                shape,
                values: RefCell::new(values),
                requires_grad,
                grad: RefCell::new(grad),
                producer: None,
            }),
        })
    }

    /// Leaf that does not take gradients (inputs, constants).
    pub fn constant(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        Tensor::new_leaf(shape.to_vec(), values, false)
    }

    /// Trainable leaf; its grad slot starts at zero and accumulates.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        Tensor::new_leaf(shape.to_vec(), values, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new_leaf(shape.to_vec(), vec![0.0; n], false).expect("consistent by construction")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new_leaf(vec![1], vec![v], false).expect("consistent by construction")
    }

    pub(crate) fn from_op(shape: Vec<usize>, values: Vec<f64>, op: Op, inputs: Vec<Tensor>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let requires_grad = inputs.iter().any(|t| t.inner.requires_grad);
        Tensor {
            inner: Rc::new(Node {
                shape,
                values: RefCell::new(values),
                requires_grad,
                grad: RefCell::new(None),
                producer: Some(Producer { op, inputs }),
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.producer.is_none()
    }

    /// Copy of the values, row-major.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.values.borrow().clone()
    }

    /// Run `f` against the raw values without copying.
    pub fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.values.borrow())
    }

    /// The single entry of a `[1]`-shaped tensor.
    pub fn value(&self) -> f64 {
        assert_eq!(self.len(), 1, "value() needs a one-element tensor");
        self.inner.values.borrow()[0]
    }

    /// Mutate leaf values in place. Only meaningful between graph builds:
    /// nodes computed from the old values are not recomputed.
    pub fn update_values(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.values.borrow_mut());
    }

    /// Copy of the accumulated gradient, if this node holds one.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Reset the grad slot to zeros (allocating it for grad-taking leaves).
    pub fn zero_grad(&self) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => buf.iter_mut().for_each(|v| *v = 0.0),
            None => {
                if self.inner.requires_grad {
                    *g = Some(vec![0.0; self.len()]);
                }
            }
        }
    }

    pub(crate) fn ptr(&self) -> *const Node {
        Rc::as_ptr(&self.inner)
    }

    /// Accumulate `d self / d leaf` into every reachable grad-taking leaf.
    /// `self` must be a scalar (shape `[1]`). Repeated calls keep accumulating
    /// until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape().to_vec(),
            });
        }
        let order = topo_order(self);
        let mut adjoints: HashMap<*const Node, Vec<f64>> = HashMap::new();
        adjoints.insert(self.ptr(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(adj) = adjoints.remove(&node.ptr()) else {
                continue;
            };
            // A node whose entire adjoint is zero contributes nothing
            // downstream. Skipping it is what keeps placeholder branches
            // behind a mask from ever being walked, so their leaves keep
            // exact 0.0 gradients regardless of placeholder content.
            if adj.iter().all(|v| *v == 0.0) {
                continue;
            }
            match &node.inner.producer {
                Some(producer) => {
                    let contribs = vjp::backprop(node, producer, &adj);
                    for (input, contrib) in producer.inputs.iter().zip(contribs) {
                        let Some(contrib) = contrib else { continue };
                        let entry = adjoints
                            .entry(input.ptr())
                            .or_insert_with(|| vec![0.0; input.len()]);
                        for (e, c) in entry.iter_mut().zip(&contrib) {
                            *e += c;
                        }
                    }
                }
                None => {
                    if node.inner.requires_grad {
                        let mut slot = node.inner.grad.borrow_mut();
                        let buf = slot.get_or_insert_with(|| vec![0.0; node.len()]);
                        for (g, a) in buf.iter_mut().zip(&adj) {
                            *g += a;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Post-order over the producer graph: every node appears after its inputs.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut seen: HashSet<*const Node> = HashSet::new();
    let mut order = Vec::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    seen.insert(root.ptr());
    while let Some((node, next_input)) = stack.pop() {
        let inputs: &[Tensor] = match &node.inner.producer {
            Some(p) => &p.inputs,
            None => &[],
        };
        if next_input < inputs.len() {
            let child = inputs[next_input].clone();
            stack.push((node, next_input + 1));
            if seen.insert(child.ptr()) {
                stack.push((child, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

/// Sum `terms` in a value-canonical order: sort by `total_cmp`, then fold.
/// Any permutation of the same multiset of terms sums to the same bits.
pub(crate) fn canonical_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_construction_checks_length() {
        let err = Tensor::constant(&[2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::Invalid { .. }));
        let t = Tensor::constant(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let err = x.backward().unwrap_err();
        assert_eq!(
            err,
            TensorError::NotScalar { shape: vec![2] },
            "non-scalar loss must be refused"
        );
    }

    #[test]
    fn backward_on_identity_gives_one() {
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        x.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn grads_accumulate_until_reset() {
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let loss = x.mul_elem(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0], "d(x*x)/dx = 2x = 6 at x=3");
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0], "second backward accumulates");
        x.zero_grad();
        assert_eq!(x.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn unreached_leaf_keeps_zero_grad() {
        let x = Tensor::param(&[1], vec![2.0]).unwrap();
        let w = Tensor::param(&[1], vec![5.0]).unwrap();
        let loss = x.mul_elem(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![0.0], "loss does not depend on w");
        assert_eq!(x.grad().unwrap(), vec![4.0]);
    }

    #[test]
    fn constants_take_no_grad() {
        let x = Tensor::constant(&[1], vec![2.0]).unwrap();
        let y = x.mul_elem(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad(), None);
    }

    #[test]
    fn shared_node_gets_both_paths() {
        // loss = x*x + x -> d/dx = 2x + 1.
        let x = Tensor::param(&[1], vec![4.0]).unwrap();
        let loss = x.mul_elem(&x).unwrap().add(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![9.0]);
    }

    #[test]
    fn canonical_sum_is_permutation_invariant() {
        let base = [0.1, -2.7, 3.3e-9, 1.0 / 3.0, -0.1, 7.77];
        let mut a = base;
        let mut b = [7.77, 0.1, -0.1, 3.3e-9, -2.7, 1.0 / 3.0];
        assert_eq!(
            canonical_sum(&mut a).to_bits(),
            canonical_sum(&mut b).to_bits()
        );
    }
}
