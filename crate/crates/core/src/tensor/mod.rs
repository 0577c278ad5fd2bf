//! Flat `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every tensor owns row-major data in a plain `Vec<f64>`. Operations build an
//! immutable DAG; [`Tensor::backward`] walks it once in reverse construction
//! order and deposits gradients into each tracked node. There is no global
//! tape: the graph lives exactly as long as the tensors referencing it, so a
//! training step that drops its loss drops the whole recording.

mod backward;
pub(crate) mod kernels;
mod ops;

pub mod grad_check;

pub use ops::{kl_divergence, masked_cross_entropy};

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::label::LabelMap;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Node payload: how the tensor was produced, holding handles to its parents.
pub(crate) enum Op {
    Leaf { requires_grad: bool },
    Add(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Relu(Tensor),
    Matmul(Tensor, Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    Softmax { input: Tensor, axis: usize },
    Conv2d { input: Tensor, kernel: Tensor, stride: usize, padding: usize },
    ChannelBias { input: Tensor, bias: Tensor },
    ChannelAffine { input: Tensor, gain: Tensor, bias: Tensor },
    SpatialNorm(Tensor),
    BilinearResize(Tensor),
    CrossEntropy { logits: Tensor, target: LabelMap },
    KlDiv { target_logits: Tensor, logits: Tensor, mask: Rc<Vec<bool>> },
}

pub(crate) struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    tracked: bool,
    op: Op,
}

/// Shared handle to one node of the computation graph. Cloning is cheap and
/// aliases the same node.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f64>, tracked: bool, op: Op) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(TensorInner {
                id: fresh_id(),
                shape,
                data,
                grad: RefCell::new(None),
                tracked,
                op,
            }),
        }
    }

    pub(crate) fn new_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        let tracked = op.parents().iter().any(|p| p.is_tracked());
        Tensor::from_parts(shape, data, tracked, op)
    }

    /// Constant leaf; never receives gradient.
    pub fn leaf(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_numel("Tensor::leaf", shape, data.len())?;
        Ok(Tensor::from_parts(
            shape.to_vec(),
            data,
            false,
            Op::Leaf { requires_grad: false },
        ))
    }

    /// Trainable leaf; `backward` deposits a gradient here.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_numel("Tensor::param", shape, data.len())?;
        Ok(Tensor::from_parts(
            shape.to_vec(),
            data,
            true,
            Op::Leaf { requires_grad: true },
        ))
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_parts(vec![1], vec![value], false, Op::Leaf { requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n], false, Op::Leaf { requires_grad: false })
    }

    /// Copy of the data as a fresh constant leaf, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(
            self.inner.shape.clone(),
            self.inner.data.clone(),
            false,
            Op::Leaf { requires_grad: false },
        )
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.inner.data.len(), 1, "item() on a non-scalar tensor");
        self.inner.data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.inner.tracked
    }

    pub fn requires_grad(&self) -> bool {
        matches!(self.inner.op, Op::Leaf { requires_grad: true })
    }

    /// Gradient accumulated by the most recent `backward`, if any reached
    /// this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        if !self.inner.tracked {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gv, dv) in g.iter_mut().zip(delta) {
                    *gv += dv;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub(crate) fn op(&self) -> &Op {
        &self.inner.op
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every
    /// tracked node reachable from `self`; read them back with [`Tensor::grad`].
    pub fn backward(&self) -> Result<()> {
        if self.inner.data.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("expected scalar output, got shape {:?}", self.inner.shape),
            ));
        }
        if !self.inner.tracked {
            return Ok(());
        }

        // Node ids increase with construction order, so descending id order
        // is a valid reverse topological order.
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.inner.tracked || !seen.insert(t.inner.id) {
                continue;
            }
            for p in t.inner.op.parents() {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

        self.accumulate_grad(&[1.0]);
        for node in &nodes {
            let guard = node.inner.grad.borrow();
            let Some(grad) = guard.as_ref() else { continue };
            node.backward_step(grad);
        }
        Ok(())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("tracked", &self.inner.tracked)
            .finish()
    }
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Transpose(a) | Op::Reshape(a) => vec![a],
            Op::Softmax { input, .. } => vec![input],
            Op::Conv2d { input, kernel, .. } => vec![input, kernel],
            Op::ChannelBias { input, bias } => vec![input, bias],
            Op::ChannelAffine { input, gain, bias } => vec![input, gain, bias],
            Op::SpatialNorm(a) | Op::BilinearResize(a) => vec![a],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::KlDiv { target_logits, logits, .. } => vec![target_logits, logits],
        }
    }
}

fn check_numel(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::invalid(
            op,
            format!("shape {shape:?} implies {numel} elements, got {len}"),
        ));
    }
    Ok(())
}

/// Epsilon added to the spatial variance before the rsqrt in
/// [`Tensor::spatial_norm`]. Small enough that unit variance holds to 1e-6
/// on non-degenerate activations.
pub const NORM_EPS: f64 = 1e-8;
