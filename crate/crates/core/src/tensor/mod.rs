//! Dense tensors with tape-free reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted block of `f64` values in
//! row-major order. Tensors produced by differentiable operations remember
//! their parents and a local backward rule, so the graph is implicit in the
//! tensors themselves. Calling [`Tensor::backward`] on a scalar walks that
//! graph in reverse topological order and accumulates gradients into every
//! reachable leaf created with [`Tensor::parameter`].
//!
//! Spatial tensors use channels-last layout: `(y, x, c)`.

mod conv;
mod gradcheck;
mod ops;
mod sample;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

pub use conv::{conv2d, im2col};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, GRAD_CHECK_FLOOR};
pub use ops::*;
pub use sample::{bilinear_sample, Padding};

pub(crate) use conv::gemm;

/// Errors raised by tensor construction and differentiable operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch on {axes}: expected {expected:?}, found {found:?}")]
    Shape {
        op: &'static str,
        axes: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("graph already consumed by a previous backward pass (node `{0}`)")]
    GraphConsumed(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Local backward rule: receives the upstream gradient, the parents and the
/// forward output values; returns one optional gradient per parent.
pub type BackwardFn =
    Box<dyn Fn(&[f64], &[Tensor], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct OpRecord {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: Mutex<Option<BackwardFn>>,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<OpRecord>,
}

#[derive(Clone)]
pub struct Tensor {
    node: Arc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &self.node.op.as_ref().map(|o| o.name))
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(TensorError::InvalidArgument {
            op: "tensor",
            reason: format!("dimensions must be positive, got {shape:?}"),
        });
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(TensorError::InvalidArgument {
            op: "tensor",
            reason: format!("shape {shape:?} holds {n} values but {len} were supplied"),
        });
    }
    Ok(())
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        let grad = requires_grad.then(|| vec![0.0; data.len()]);
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(grad),
                op: None,
            }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn parameter(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("positive dims")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("positive dims")
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    /// Records the result of a differentiable operation.
    ///
    /// `requires_grad` is inherited from the parents; if none of them track
    /// gradients the backward rule is dropped immediately.
    pub fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}");
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let op = requires_grad.then(|| OpRecord {
            name,
            parents,
            backward: Mutex::new(Some(backward)),
        });
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                op,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    /// Accumulated gradient of a leaf parameter.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.node.grad.lock().expect("grad lock").as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Fresh constant tensor holding the same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.node.shape.clone(), self.node.data.clone(), false)
    }

    /// Same shape, new values, same gradient-tracking flag; always a leaf.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Tensor> {
        check_shape(&self.node.shape, data.len())?;
        Ok(Self::leaf(self.node.shape.clone(), data, self.requires_grad()))
    }

    /// Runs reverse-mode differentiation and accumulates into leaf grads.
    /// The graph is consumed.
    pub fn backward(&self) -> Result<()> {
        self.gradients(false)?.accumulate();
        Ok(())
    }

    /// Like [`Tensor::backward`] but keeps the graph for further passes.
    pub fn backward_retain(&self) -> Result<()> {
        self.gradients(true)?.accumulate();
        Ok(())
    }

    /// Computes leaf gradients without touching the leaves' accumulators.
    pub fn gradients(&self, retain_graph: bool) -> Result<Gradients> {
        self.gradients_watching(retain_graph, &[])
    }

    /// Like [`Tensor::gradients`], additionally recording the gradients of the
    /// given intermediate tensors.
    pub fn gradients_watching(&self, retain_graph: bool, watch: &[Tensor]) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward(self.shape().to_vec()));
        }
        let order = self.topological_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        let mut out = Gradients::default();

        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            let Some(op) = &t.node.op else {
                out.add(t, &g);
                continue;
            };
            if watch.iter().any(|w| w.id() == t.id()) {
                out.add(t, &g);
            }
            let mut slot = op.backward.lock().expect("backward lock");
            let local = match slot.as_ref() {
                Some(f) => f(&g, &op.parents, t.data()),
                None => return Err(TensorError::GraphConsumed(op.name)),
            };
            if !retain_graph {
                *slot = None;
            }
            drop(slot);
            debug_assert_eq!(local.len(), op.parents.len(), "{}", op.name);
            for (p, pg) in op.parents.iter().zip(local) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), p.numel(), "{} -> parent grad", op.name);
                match pending.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(p.id(), pg);
                    }
                }
            }
        }
        Ok(out)
    }

    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        // iterative post-order DFS
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.node.op {
                for p in op.parents.iter().rev() {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Leaf gradients from one backward pass, keyed by tensor id.
///
/// Iteration order is by id, which makes summing several `Gradients` (one per
/// batch item) deterministic regardless of how they were produced.
#[derive(Default, Clone)]
pub struct Gradients {
    entries: BTreeMap<u64, (Tensor, Vec<f64>)>,
}

impl Gradients {
    fn add(&mut self, t: &Tensor, g: &[f64]) {
        match self.entries.get_mut(&t.id()) {
            Some((_, acc)) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                self.entries.insert(t.id(), (t.clone(), g.to_vec()));
            }
        }
    }

    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.entries.get(&t.id()).map(|(_, g)| g.as_slice())
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (t, g) in other.entries.values() {
            self.add(t, g);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, g) in self.entries.values_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Adds every stored gradient into the owning leaf's accumulator.
    pub fn accumulate(&self) {
        for (t, g) in self.entries.values() {
            let mut slot = t.node.grad.lock().expect("grad lock");
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g.clone()),
            }
        }
    }
}
