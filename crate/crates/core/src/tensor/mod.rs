//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap reference-counted handle. Every differentiable
//! operation records its parents and enough saved context to run its
//! backward rule; [`Tensor::backward`] walks the recorded graph in reverse
//! creation order and accumulates gradients into every reachable node.
//!
//! Graphs are confined to the thread that built them (`Rc` handles).

mod broadcast;
mod gemm;
pub mod gradcheck;
mod ops;
pub mod param;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckReport, ParamGradError};
pub use ops::Mask;
pub use param::{ParamCount, ParamStore, Parameter};

use ops::Op;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|c| c.get() == 0)
}

/// Disables graph recording on this thread while alive.
pub struct NoGradGuard(());

impl NoGradGuard {
    pub fn new() -> Self {
        NO_GRAD_DEPTH.with(|c| c.set(c.get() + 1));
        NoGradGuard(())
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|c| c.set(c.get() - 1));
    }
}

/// Runs `f` with graph recording disabled.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = NoGradGuard::new();
    f()
}

struct GradFn {
    parents: Vec<Tensor>,
    op: Op,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    grad_fn: RefCell<Option<GradFn>>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("data", &preview)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn check_extents(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::contract(format!(
            "tensor extents must be positive, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, grad_fn: Option<GradFn>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            grad_fn: RefCell::new(grad_fn),
        }))
    }

    /// Builds an operation result, recording the backward rule only when a
    /// parent needs gradients and recording is enabled.
    fn from_op(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, op: Op) -> Tensor {
        let needs = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if needs {
            Tensor::make(shape, data, true, Some(GradFn { parents, op }))
        } else {
            Tensor::make(shape, data, false, None)
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n = check_extents(shape)?;
        if n != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor::make(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn parameter(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        let node = Rc::try_unwrap(t.0).ok().expect("fresh tensor is uniquely owned");
        Ok(Tensor::make(node.shape, node.data.into_inner(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let n = check_extents(shape)?;
        Tensor::from_vec(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::make(Vec::new(), vec![value], false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn len(&self) -> usize {
        self.0.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Identity of the underlying node; equal for clones of the same handle.
    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable access for in-place parameter updates. Must not be used
    /// while a graph that saved this tensor's values is still pending.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        let data = self.0.data.borrow();
        if data.len() != 1 {
            return Err(Error::contract(format!(
                "item() needs a single-element tensor, got shape {:?}",
                self.0.shape
            )));
        }
        Ok(data[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy of the values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::make(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// Multiplies the stored gradient (if any) by `factor`.
    pub fn scale_grad(&self, factor: f64) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    #[cfg(test)]
    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        self.accumulate_grad_owned(contribution.to_vec());
    }

    fn accumulate_grad_owned(&self, contribution: Vec<f64>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contribution) {
                    *a += b;
                }
            }
            None => *slot = Some(contribution),
        }
    }

    /// Reverse-mode sweep from a single-element root. The recorded graph is
    /// released afterwards.
    pub fn backward(&self) -> Result<()> {
        self.backward_with(false)
    }

    /// As [`Tensor::backward`]; with `retain_graph` the graph survives so a
    /// second sweep accumulates again.
    pub fn backward_with(&self, retain_graph: bool) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::contract(format!(
                "backward() needs a single-element root, got shape {:?}",
                self.0.shape
            )));
        }
        if !self.0.requires_grad {
            return Err(Error::contract("backward() root does not depend on any parameter"));
        }

        let order = self.reachable_nodes();
        let mut sweep: HashMap<u64, Vec<f64>> = HashMap::with_capacity(order.len());
        sweep.insert(self.0.id, vec![1.0]);

        for node in order.iter() {
            let Some(grad) = sweep.get(&node.0.id) else {
                continue;
            };
            let taken;
            let borrowed;
            let grad_fn: &GradFn = if retain_graph {
                borrowed = node.0.grad_fn.borrow();
                match borrowed.as_ref() {
                    Some(f) => f,
                    None => continue,
                }
            } else {
                taken = node.0.grad_fn.borrow_mut().take();
                match taken.as_ref() {
                    Some(f) => f,
                    None => continue,
                }
            };
            let contributions = {
                let out = node.0.data.borrow();
                ops::backward(&grad_fn.op, &grad_fn.parents, &node.0.shape, &out, grad)
            };
            for (parent, contribution) in grad_fn.parents.iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                match sweep.get_mut(&parent.0.id) {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&c) {
                            *a += b;
                        }
                    }
                    None => {
                        sweep.insert(parent.0.id, c);
                    }
                }
            }
        }

        for node in order.iter() {
            if let Some(g) = sweep.remove(&node.0.id) {
                node.accumulate_grad_owned(g);
            }
        }
        Ok(())
    }

    /// Nodes reachable through recorded graph edges, newest first. Parents
    /// are always created before children, so descending id order is a
    /// valid reverse topological order.
    fn reachable_nodes(&self) -> Vec<Tensor> {
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut out = Vec::new();
        seen.insert(self.0.id);
        while let Some(t) = stack.pop() {
            if let Some(f) = t.0.grad_fn.borrow().as_ref() {
                for p in &f.parents {
                    if p.0.requires_grad && seen.insert(p.0.id) {
                        stack.push(p.clone());
                    }
                }
            }
            out.push(t);
        }
        out.sort_by_key(|t| std::cmp::Reverse(t.0.id));
        out
    }
}
