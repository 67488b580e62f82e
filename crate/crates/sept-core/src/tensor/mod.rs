//! Minimal reverse-mode autodiff over dense f64 arrays.
//!
//! [`DiffArray`] is a value-semantic row-major array. Operations that should
//! participate in gradient computation take a [`GradRecord`]; the record logs
//! one backward closure per produced value and replays them in reverse when
//! [`GradRecord::backward`] is called on a scalar loss. Arrays whose inputs
//! carry no node id are treated as constants and cost nothing at backward
//! time.
//!
//! The engine is deliberately small: f64 only, batch size 1, no fusion, no
//! threading inside kernels. Forward passes are deterministic — identical
//! inputs produce bit-identical outputs.

mod gradcheck;
pub mod ops;
mod params;

pub use gradcheck::{grad_check, grad_check_multi};
pub use params::{LeafParams, Params, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} elements")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("shape mismatch: {left:?} vs {right:?} in {op}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op} expects rank {expected}, got shape {shape:?}")]
    BadRank { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("kernel extent {kernel} exceeds padded input extent {input}")]
    KernelTooLarge { kernel: usize, input: usize },
    #[error("depthwise kernel count {kernels} must equal input channels {channels}")]
    DepthwiseChannelMismatch { kernels: usize, channels: usize },
    #[error("{op} requires {what}")]
    InvalidArgument { op: &'static str, what: String },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("loss is not attached to this record")]
    DetachedLoss,
    #[error("array belongs to a different gradient record")]
    WrongRecord,
    #[error("backward was already called on this record")]
    RecordConsumed,
    #[error("log of non-positive value {value}")]
    LogDomain { value: f64 },
    #[error("grad_check eps {eps} outside [1e-7, 1e-3]")]
    EpsOutOfRange { eps: f64 },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint io: {0}")]
    CheckpointIo(String),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
}

/// Handle tying an array to a node of one specific record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRef {
    record: u64,
    index: usize,
}

/// Dense row-major f64 array, optionally attached to a gradient record.
///
/// The payload is shared copy-on-write, so cloning an array (or capturing
/// one in a backward closure) does not copy the numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffArray {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl DiffArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch { shape, len: data.len() });
        }
        Ok(DiffArray { shape, data: Arc::new(data), node: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        DiffArray { shape, data: Arc::new(vec![0.0; n]), node: None }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        DiffArray { shape, data: Arc::new(vec![value; n]), node: None }
    }

    pub fn scalar(value: f64) -> Self {
        DiffArray { shape: vec![], data: Arc::new(vec![value]), node: None }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        DiffArray { shape: vec![data.len()], data: Arc::new(data), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Shared handle to the payload, for cheap captures in backward closures.
    pub(crate) fn shared_data(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        // Mutating detaches the array from any recorded history.
        self.node = None;
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Value of a scalar array.
    pub fn item(&self) -> Option<f64> {
        if self.data.len() == 1 {
            Some(self.data[0])
        } else {
            None
        }
    }

    /// Reinterpret the row-major buffer under a new shape. Keeps the node:
    /// gradients are flat per node, so reshaping is free.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ShapeDataMismatch { shape, len: self.data.len() });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

type BackwardFn = Box<dyn FnOnce(&[f64], &mut GradTable)>;

struct Node {
    backward: Option<BackwardFn>,
}

/// Accumulation buffers for one backward pass, indexed by node.
pub struct GradTable {
    bufs: Vec<Vec<f64>>,
}

impl GradTable {
    /// Mutable gradient buffer for `node`, allocated on first touch.
    pub fn buf(&mut self, node: usize, len: usize) -> &mut [f64] {
        if self.bufs[node].is_empty() {
            self.bufs[node] = vec![0.0; len];
        }
        &mut self.bufs[node]
    }

    /// Take a buffer out for hot backward loops that accumulate into two
    /// buffers at once; must be paired with [`GradTable::restore`].
    pub fn take(&mut self, node: usize, len: usize) -> Vec<f64> {
        let buf = std::mem::take(&mut self.bufs[node]);
        if buf.is_empty() {
            vec![0.0; len]
        } else {
            buf
        }
    }

    pub fn restore(&mut self, node: usize, buf: Vec<f64>) {
        self.bufs[node] = buf;
    }
}

static RECORD_IDS: AtomicU64 = AtomicU64::new(1);

/// Log of recorded operations for one forward pass.
///
/// Confined to a single logical thread; a second `backward` call is rejected.
pub struct GradRecord {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for GradRecord {
    fn default() -> Self {
        Self::new()
    }
}

impl GradRecord {
    pub fn new() -> Self {
        GradRecord {
            id: RECORD_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Register `value` as a differentiable input of this record.
    pub fn leaf(&self, value: &DiffArray) -> DiffArray {
        let index = self.push(None);
        DiffArray {
            shape: value.shape.clone(),
            data: value.data.clone(),
            node: Some(NodeRef { record: self.id, index }),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, backward: Option<BackwardFn>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { backward });
        nodes.len() - 1
    }

    /// Node index of `a` if it is attached to this record.
    fn node_of(&self, a: &DiffArray) -> Result<Option<usize>, TensorError> {
        match a.node {
            None => Ok(None),
            Some(r) if r.record == self.id => Ok(Some(r.index)),
            Some(_) => Err(TensorError::WrongRecord),
        }
    }

    /// Record a new value whose gradient flows through `backward`.
    fn emit(&self, shape: Vec<usize>, data: Vec<f64>, backward: BackwardFn) -> DiffArray {
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite forward value");
        let index = self.push(Some(backward));
        DiffArray { shape, data: Arc::new(data), node: Some(NodeRef { record: self.id, index }) }
    }

    /// Run reverse-mode accumulation from a scalar loss.
    ///
    /// Visits recorded nodes in reverse order exactly once. Gradients of
    /// nodes the loss does not depend on stay zero.
    pub fn backward(&self, loss: &DiffArray) -> Result<Gradients, TensorError> {
        if self.consumed.get() {
            return Err(TensorError::RecordConsumed);
        }
        if loss.data.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: loss.shape.clone() });
        }
        let loss_node = match self.node_of(loss)? {
            Some(ix) => ix,
            None => return Err(TensorError::DetachedLoss),
        };
        self.consumed.set(true);

        let mut nodes = self.nodes.borrow_mut();
        let mut table = GradTable { bufs: vec![Vec::new(); nodes.len()] };
        table.buf(loss_node, 1)[0] = 1.0;

        for ix in (0..nodes.len()).rev() {
            if table.bufs[ix].is_empty() {
                continue;
            }
            if let Some(backward) = nodes[ix].backward.take() {
                let upstream = std::mem::take(&mut table.bufs[ix]);
                backward(&upstream, &mut table);
                table.bufs[ix] = upstream;
            }
        }
        Ok(Gradients { record: self.id, grads: table.bufs })
    }
}

/// Result of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    record: u64,
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient with respect to `x`, shaped like `x`.
    ///
    /// Returns `None` when `x` was never recorded. A recorded array the loss
    /// does not depend on yields zeros.
    pub fn wrt(&self, x: &DiffArray) -> Option<DiffArray> {
        let node = x.node?;
        if node.record != self.record || node.index >= self.grads.len() {
            return None;
        }
        let buf = &self.grads[node.index];
        let data = if buf.is_empty() { vec![0.0; x.len()] } else { buf.clone() };
        Some(DiffArray { shape: x.shape.clone(), data: Arc::new(data), node: None })
    }
}

#[cfg(test)]
mod tests {
    use super::ops;
    use super::*;

    #[test]
    fn leaf_roundtrip() {
        let rec = GradRecord::new();
        let x = rec.leaf(&DiffArray::vector(vec![1.0, 2.0, 3.0]));
        assert!(x.node().is_some());
        assert_eq!(x.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let rec = GradRecord::new();
        let x = rec.leaf(&DiffArray::vector(vec![1.0, -2.0, 0.5, 4.0]));
        let loss = ops::sum(&rec, &x).unwrap();
        let grads = rec.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum_is_2x() {
        let rec = GradRecord::new();
        let x = rec.leaf(&DiffArray::vector(vec![1.5, -2.0, 3.0]));
        let sq = ops::mul(&rec, &x, &x).unwrap();
        let loss = ops::sum(&rec, &sq).unwrap();
        let grads = rec.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[3.0, -4.0, 6.0]);
    }

    #[test]
    fn second_backward_rejected() {
        let rec = GradRecord::new();
        let x = rec.leaf(&DiffArray::vector(vec![1.0]));
        let loss = ops::sum(&rec, &x).unwrap();
        rec.backward(&loss).unwrap();
        match rec.backward(&loss) {
            Err(TensorError::RecordConsumed) => {}
            other => panic!("expected RecordConsumed, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let rec = GradRecord::new();
        let x = rec.leaf(&DiffArray::vector(vec![1.0, 2.0]));
        match rec.backward(&x) {
            Err(TensorError::NonScalarLoss { .. }) => {}
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
    }

    #[test]
    fn detached_loss_rejected() {
        let rec = GradRecord::new();
        let loss = DiffArray::scalar(1.0);
        match rec.backward(&loss) {
            Err(TensorError::DetachedLoss) => {}
            other => panic!("expected DetachedLoss, got {other:?}"),
        }
    }

    #[test]
    fn mixing_records_rejected() {
        let rec_a = GradRecord::new();
        let rec_b = GradRecord::new();
        let x = rec_a.leaf(&DiffArray::vector(vec![1.0, 2.0]));
        match ops::sum(&rec_b, &x) {
            Err(TensorError::WrongRecord) => {}
            other => panic!("expected WrongRecord, got {other:?}"),
        }
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let rec = GradRecord::new();
        let x = rec.leaf(&DiffArray::vector(vec![1.0, 2.0]));
        let y = rec.leaf(&DiffArray::vector(vec![3.0]));
        let loss = ops::sum(&rec, &x).unwrap();
        let grads = rec.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&y).unwrap().data(), &[0.0]);
    }
}
