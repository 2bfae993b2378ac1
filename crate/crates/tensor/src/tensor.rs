use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::memory::Buffer;

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed)
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Runs `f` with graph recording switched to `enabled`, restoring the
/// previous mode afterwards (also on unwind).
pub fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(enabled)));
    f()
}

pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

/// Vector-Jacobian product of one recorded operation.
///
/// `backward` receives the gradient of the op's output and returns one entry
/// per parent passed to [`Tensor::from_op`]. Ops that own nested graphs
/// (checkpoints) deposit parameter gradients directly into `grads`.
pub trait BackwardOp {
    fn name(&self) -> &'static str;

    /// Called once for every reachable op, in processing order, before any
    /// gradient is propagated.
    fn prepare(&self) {}

    fn backward(&self, grad_out: &[f64], grads: &mut Gradients) -> Result<Vec<Option<Vec<f64>>>>;
}

pub(crate) enum NodeKind {
    Leaf,
    Op {
        op: Box<dyn BackwardOp>,
        parents: Vec<Option<Rc<Node>>>,
    },
}

pub(crate) struct Node {
    id: u64,
    numel: usize,
    kind: NodeKind,
    consumed: Cell<bool>,
}

/// Dense row-major f64 tensor.
///
/// Values are immutable and shared; cloning a tensor is cheap. A tensor that
/// requires gradients carries a graph node, either a leaf (parameters and
/// explicitly tracked inputs) or the operation that produced it.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Buffer>,
    node: Option<Rc<Node>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Constant tensor; fails when the value count does not match the shape.
    pub fn new(values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape("new", &values, shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(Buffer::new(values)),
            node: None,
        })
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let mut t = Tensor::new(values, shape)?;
        t.node = Some(Rc::new(Node {
            id: next_id(),
            numel: t.numel(),
            kind: NodeKind::Leaf,
            consumed: Cell::new(false),
        }));
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(vec![0.0; numel(shape)], shape).expect("consistent shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::new(vec![value; numel(shape)], shape).expect("consistent shape")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(vec![value], &[1]).expect("consistent shape")
    }

    /// Wraps an existing buffer as a new leaf that requires gradients.
    pub fn leaf_from_buffer(data: Arc<Buffer>, shape: &[usize]) -> Result<Tensor> {
        check_shape("leaf_from_buffer", data.values(), shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            node: Some(Rc::new(Node {
                id: next_id(),
                numel: data.values().len(),
                kind: NodeKind::Leaf,
                consumed: Cell::new(false),
            })),
            data,
        })
    }

    /// Records an op output. A node is created only when recording is on and
    /// at least one input carries a graph node.
    pub fn from_op(
        values: Vec<f64>,
        shape: &[usize],
        op: impl BackwardOp + 'static,
        inputs: &[&Tensor],
    ) -> Result<Tensor> {
        Tensor::from_op_buffer(Arc::new(Buffer::new(values)), shape, op, inputs, false)
    }

    /// Like [`Tensor::from_op`] over an existing buffer. With `force`, the
    /// node is recorded whenever grad mode is on, even if no input is
    /// tracked; segment ops whose parameters live inside the segment need
    /// that.
    pub fn from_op_buffer(
        data: Arc<Buffer>,
        shape: &[usize],
        op: impl BackwardOp + 'static,
        inputs: &[&Tensor],
        force: bool,
    ) -> Result<Tensor> {
        check_shape(op.name(), data.values(), shape)?;
        let tracked = inputs.iter().any(|t| t.node.is_some());
        let node = if is_grad_enabled() && (tracked || force) {
            Some(Rc::new(Node {
                id: next_id(),
                numel: data.values().len(),
                kind: NodeKind::Op {
                    op: Box::new(op),
                    parents: inputs.iter().map(|t| t.node.clone()).collect(),
                },
                consumed: Cell::new(false),
            }))
        } else {
            None
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            node,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.values().len()
    }

    pub fn values(&self) -> &[f64] {
        self.data.values()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values().to_vec()
    }

    pub fn buffer(&self) -> &Arc<Buffer> {
        &self.data
    }

    pub fn bytes(&self) -> usize {
        self.data.bytes()
    }

    /// First element; intended for scalars.
    pub fn item(&self) -> f64 {
        self.values()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.node.as_deref(), Some(Node { kind: NodeKind::Leaf, .. }))
    }

    /// Graph node id, used as the key of [`Gradients`].
    pub fn id(&self) -> Option<u64> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Same values, no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Allows another backward pass from this root.
    pub fn reset_backward(&self) {
        if let Some(n) = &self.node {
            n.consumed.set(false);
        }
    }

    /// Backpropagates from a scalar root, returning gradients of every
    /// reachable leaf. Leaves not connected to the root have no entry;
    /// [`Gradients::get_or_zeros`] reports them as zero.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape.clone()));
        }
        let mut grads = Gradients::default();
        self.backward_with_seed(vec![1.0], &mut grads)?;
        Ok(grads)
    }

    /// Propagates `seed` (the gradient of this tensor) through its history,
    /// accumulating leaf gradients into `grads`.
    pub fn backward_with_seed(&self, seed: Vec<f64>, grads: &mut Gradients) -> Result<()> {
        if seed.len() != self.numel() {
            return Err(TensorError::shape(
                "backward",
                format!("seed has {} values for shape {:?}", seed.len(), self.shape),
            ));
        }
        let Some(root) = &self.node else {
            return Ok(());
        };
        if root.consumed.replace(true) {
            return Err(TensorError::AlreadyBackpropagated);
        }
        run_backward(root, seed, grads)
    }
}

fn check_shape(op: &'static str, values: &[f64], shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&e| e == 0) {
        return Err(TensorError::shape(op, format!("zero extent in {shape:?}")));
    }
    if numel(shape) != values.len() {
        return Err(TensorError::shape(
            op,
            format!("{} values for shape {:?}", values.len(), shape),
        ));
    }
    Ok(())
}

/// Collects every node reachable from `root` and processes them in
/// decreasing creation order, which is a valid reverse topological order.
/// Leaf gradients are accumulated at the moment each consumer is processed,
/// so the summation order depends only on creation order.
fn run_backward(root: &Rc<Node>, seed: Vec<f64>, grads: &mut Gradients) -> Result<()> {
    let mut seen = HashSet::new();
    let mut stack = vec![Rc::clone(root)];
    let mut ops = Vec::new();
    seen.insert(root.id);
    while let Some(node) = stack.pop() {
        if let NodeKind::Op { parents, .. } = &node.kind {
            for p in parents.iter().flatten() {
                if seen.insert(p.id) {
                    stack.push(Rc::clone(p));
                }
            }
            ops.push(node);
        }
    }
    ops.sort_by(|a, b| b.id.cmp(&a.id));
    for node in &ops {
        if let NodeKind::Op { op, .. } = &node.kind {
            op.prepare();
        }
    }

    if matches!(root.kind, NodeKind::Leaf) {
        grads.accumulate(root.id, seed);
        return Ok(());
    }

    let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
    pending.insert(root.id, seed);
    for node in ops {
        let Some(g) = pending.remove(&node.id) else {
            continue;
        };
        let NodeKind::Op { op, parents } = &node.kind else {
            unreachable!("only op nodes are queued")
        };
        let parent_grads = op.backward(&g, grads)?;
        drop(g);
        if parent_grads.len() != parents.len() {
            return Err(TensorError::invalid(
                op.name(),
                format!(
                    "backward returned {} gradients for {} parents",
                    parent_grads.len(),
                    parents.len()
                ),
            ));
        }
        for (parent, pg) in parents.iter().zip(parent_grads) {
            let (Some(parent), Some(pg)) = (parent, pg) else {
                continue;
            };
            if pg.len() != parent.numel {
                return Err(TensorError::invalid(
                    op.name(),
                    format!("gradient of {} values for a parent of {}", pg.len(), parent.numel),
                ));
            }
            match parent.kind {
                NodeKind::Leaf => grads.accumulate(parent.id, pg),
                NodeKind::Op { .. } => accumulate_into(&mut pending, parent.id, pg),
            }
        }
    }
    Ok(())
}

fn accumulate_into(map: &mut HashMap<u64, Vec<f64>>, id: u64, g: Vec<f64>) {
    match map.get_mut(&id) {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        None => {
            map.insert(id, g);
        }
    }
}

/// Leaf gradients keyed by graph node id.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        t.id().and_then(|id| self.map.get(&id)).map(Vec::as_slice)
    }

    /// Gradient of `t`, or zeros when `t` was not reached.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }

    pub fn take(&mut self, t: &Tensor) -> Option<Vec<f64>> {
        t.id().and_then(|id| self.map.remove(&id))
    }

    pub fn accumulate(&mut self, id: u64, g: Vec<f64>) {
        accumulate_into(&mut self.map, id, g);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
