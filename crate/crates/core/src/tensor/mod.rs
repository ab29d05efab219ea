//! Define-by-run reverse-mode automatic differentiation over dense `f32` arrays.
//!
//! Every operation that consumes a tensor with `requires_grad` records a node
//! holding its inputs and whatever it needs for the backward pass. Calling
//! [`Tensor::backward`] on a scalar walks that record in reverse topological
//! order, accumulates gradients into the leaf tensors, and releases each node
//! as soon as it has been visited.

mod conv;
mod norm;
mod optim;
mod pointwise;
mod upsample;

pub use conv::{conv3d, conv_transpose3d, set_conv3d_backward_corruption};
pub use norm::{normalize, NormMode, NormState};
pub use optim::Sgd;
pub use pointwise::{add, mean, mse, mul, narrow, relu, reshape, scalar_mul, sigmoid, sub, sum, SIGMOID_FLOOR};
pub use upsample::{upsample, UpsampleMode};

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on the current thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward rule of a recorded operation.
pub(crate) trait Backward: Send + Sync {
    fn op_name(&self) -> &'static str;

    /// One entry per input; `None` where the input takes no gradient.
    fn backward(&self, inputs: &[Tensor], grad_out: &[f32]) -> Vec<Option<Vec<f32>>>;
}

struct Node {
    inputs: Vec<Tensor>,
    op: Box<dyn Backward>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f32>>,
    grad: Mutex<Option<Vec<f32>>>,
    requires_grad: bool,
    is_leaf: bool,
    name: Option<String>,
    op_name: Option<&'static str>,
    node: Mutex<Option<Node>>,
}

/// Shared handle to a dense row-major `f32` array.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("name", &self.0.name)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        data: Vec<f32>,
        requires_grad: bool,
        name: Option<String>,
        node: Option<Node>,
    ) -> Self {
        let op_name = node.as_ref().map(|n| n.op.op_name());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad,
            is_leaf: node.is_none(),
            name,
            op_name,
            node: Mutex::new(node),
        }))
    }

    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {} elements but buffer has {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, false, None, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::build(shape.to_vec(), vec![value; numel(shape)], false, None, None)
    }

    pub fn scalar(value: f32) -> Self {
        Self::build(Vec::new(), vec![value], false, None, None)
    }

    /// A named trainable leaf.
    pub fn parameter(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        let inner = Arc::try_unwrap(t.0).unwrap_or_else(|_| unreachable!());
        Ok(Self::build(inner.shape, inner.data.into_inner(), true, Some(name.into()), None))
    }

    /// Same values, marked as a gradient-receiving leaf.
    pub fn requires_grad_(self) -> Self {
        let data = self.to_vec();
        Self::build(self.0.shape.clone(), data, true, self.0.name.clone(), None)
    }

    /// Output of a recorded operation. A node is kept only when some input
    /// takes gradients and recording is enabled.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f32>,
        inputs: Vec<Tensor>,
        op: Box<dyn Backward>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then(|| Node { inputs, op });
        Self::build(shape, data, requires_grad, None, node)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn name(&self) -> Option<&str> {
        self.0.name.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.is_leaf
    }

    /// Name of the operation that produced this tensor, if any was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op_name
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f32>> {
        self.0.data.read()
    }

    pub(crate) fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<f32>> {
        self.0.data.write()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        let d = self.data();
        debug_assert_eq!(d.len(), 1);
        d[0]
    }

    /// Overwrites the values of a leaf in place (checkpoint restore).
    pub fn copy_from_slice(&self, values: &[f32]) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::invalid("copy_from_slice", "target is not a leaf"));
        }
        let mut d = self.data_mut();
        if d.len() != values.len() {
            return Err(Error::shape(
                "copy_from_slice",
                format!("expected {} values, got {}", d.len(), values.len()),
            ));
        }
        d.copy_from_slice(values);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.lock().clone()
    }

    pub(crate) fn take_grad(&self) -> Option<Vec<f32>> {
        self.0.grad.lock().take()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock() = None;
    }

    fn accumulate_grad(&self, g: &[f32]) {
        let mut slot = self.0.grad.lock();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Same values with no graph edge back to `self`.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.to_vec(), false, None, None)
    }

    fn inputs(&self) -> Vec<Tensor> {
        self.0
            .node
            .lock()
            .as_ref()
            .map(|n| n.inputs.clone())
            .unwrap_or_default()
    }

    /// Tensors reachable from `self`, inputs before consumers.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, Vec<Tensor>, usize)> = Vec::new();
        visited.insert(self.id());
        stack.push((self.clone(), self.inputs(), 0));
        while let Some((t, inputs, next)) = stack.last_mut() {
            if *next < inputs.len() {
                let child = inputs[*next].clone();
                *next += 1;
                if child.requires_grad() && visited.insert(child.id()) {
                    let grand = child.inputs();
                    stack.push((child, grand, 0));
                }
            } else {
                order.push(t.clone());
                stack.pop();
            }
        }
        order
    }

    /// Accumulates `d self / d leaf` into every reachable leaf with
    /// `requires_grad`. The recorded graph is consumed.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let mut order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f32>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        while let Some(t) = order.pop() {
            let Some(g) = pending.remove(&t.id()) else { continue };
            if t.is_leaf() {
                t.accumulate_grad(&g);
                continue;
            }
            let node = t.0.node.lock().take().ok_or_else(|| {
                Error::invalid("backward", "graph was already consumed by an earlier backward pass")
            })?;
            let grads = node.op.backward(&node.inputs, &g);
            debug_assert_eq!(grads.len(), node.inputs.len(), "{}", node.op.op_name());
            for (input, grad) in node.inputs.iter().zip(grads) {
                let Some(grad) = grad else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(grad.len(), input.numel(), "{}", node.op.op_name());
                match pending.get_mut(&input.id()) {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(input.id(), grad);
                    }
                }
            }
        }
        Ok(())
    }
}

/// One executed operation in a recorded graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphNode {
    pub op: &'static str,
    pub inputs: Vec<u64>,
    pub output: u64,
}

/// Read-only snapshot of the graph behind a tensor, in topological order.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    pub nodes: Vec<GraphNode>,
}

impl Graph {
    pub fn trace(root: &Tensor) -> Graph {
        let nodes = root
            .topo_order()
            .into_iter()
            .filter_map(|t| {
                let op = t.op_name()?;
                Some(GraphNode {
                    op,
                    inputs: t.inputs().iter().map(Tensor::id).collect(),
                    output: t.id(),
                })
            })
            .collect();
        Graph { nodes }
    }

    pub fn count(&self, op: &str) -> usize {
        self.nodes.iter().filter(|n| n.op == op).count()
    }
}

pub(crate) fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_buffer() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn linear_loss_gradient_is_the_constant() {
        let w = Tensor::parameter("w", &[3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = sum(&mul(&w, &x).unwrap());
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let w = Tensor::parameter("w", &[2], vec![1.0, 2.0]).unwrap();
        let y = scalar_mul(&w, 2.0);
        assert!(matches!(y.backward(), Err(Error::InvalidArgument { .. })));
    }

    #[test]
    fn fan_out_accumulates_both_paths() {
        // loss = sum(w*w + 3w) -> dloss/dw = 2w + 3
        let w = Tensor::parameter("w", &[2], vec![1.5, -2.0]).unwrap();
        let sq = mul(&w, &w).unwrap();
        let lin = scalar_mul(&w, 3.0);
        let loss = sum(&add(&sq, &lin).unwrap());
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![6.0, -1.0]);
    }

    #[test]
    fn summed_losses_match_individual_gradients() {
        let data = vec![0.3, -0.7, 1.1];
        let x = Tensor::new(&[3], vec![2.0, 1.0, -1.0]).unwrap();
        let run = |which: u8| {
            let w = Tensor::parameter("w", &[3], data.clone()).unwrap();
            let a = sum(&mul(&w, &x).unwrap());
            let b = mse(&w, &x).unwrap();
            let loss = match which {
                0 => a,
                1 => b,
                _ => add(&a, &b).unwrap(),
            };
            loss.backward().unwrap();
            w.grad().unwrap()
        };
        let (ga, gb, gab) = (run(0), run(1), run(2));
        for i in 0..3 {
            assert!((ga[i] + gb[i] - gab[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let w = Tensor::parameter("w", &[1], vec![2.0]).unwrap();
        for _ in 0..2 {
            sum(&scalar_mul(&w, 4.0)).backward().unwrap();
        }
        assert_eq!(w.grad().unwrap(), vec![8.0]);
    }

    #[test]
    fn detach_cuts_the_graph() {
        let a = Tensor::parameter("a", &[2], vec![0.2, 0.9]).unwrap();
        let b = Tensor::parameter("b", &[2], vec![0.5, 0.1]).unwrap();
        let d = a.detach();
        assert_eq!(*d.data(), *a.data());
        assert!(!d.requires_grad());
        mse(&d, &b).unwrap().backward().unwrap();
        assert!(a.grad().is_none());
        assert!(b.grad().is_some());
    }

    #[test]
    fn no_grad_records_nothing() {
        let w = Tensor::parameter("w", &[2], vec![1.0, 2.0]).unwrap();
        let y = {
            let _g = no_grad();
            sum(&w)
        };
        assert!(!y.requires_grad());
        assert!(sum(&w).requires_grad());
    }

    #[test]
    fn graph_trace_is_topological() {
        let w = Tensor::parameter("w", &[2], vec![1.0, 2.0]).unwrap();
        let loss = sum(&relu(&scalar_mul(&w, 2.0)));
        let g = Graph::trace(&loss);
        let ops: Vec<_> = g.nodes.iter().map(|n| n.op).collect();
        assert_eq!(ops, vec!["scalar_mul", "relu", "sum"]);
        for (i, n) in g.nodes.iter().enumerate() {
            for input in &n.inputs {
                if let Some(j) = g.nodes.iter().position(|m| m.output == *input) {
                    assert!(j < i);
                }
            }
        }
    }

    #[test]
    fn second_backward_on_consumed_graph_errors() {
        let w = Tensor::parameter("w", &[2], vec![1.0, 2.0]).unwrap();
        let loss = sum(&scalar_mul(&w, 2.0));
        loss.backward().unwrap();
        assert!(loss.backward().is_err());
    }
}
