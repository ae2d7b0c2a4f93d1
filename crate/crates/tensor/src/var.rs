use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Maps the upstream gradient of a node to gradients for each of its parents.
/// `None` entries mean "no contribution" (or the parent does not need one).
pub(crate) type BackwardFn = Box<dyn FnOnce(&[f32]) -> Vec<Option<Vec<f32>>>>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<f32>>,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: RefCell<Option<BackwardFn>>,
    grad: RefCell<Option<Vec<f32>>>,
}

/// A node in the computation graph: an immutable dense row-major f32 array
/// plus, when it depends on a trainable leaf, the closure that propagates
/// gradients to its parents.
///
/// Nodes are created in topological order (parents always get a smaller id),
/// so a reverse sort by id is a valid backward schedule.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Var {
    fn new_node(
        data: Rc<Vec<f32>>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Var>,
        backward: Option<BackwardFn>,
    ) -> Var {
        assert_eq!(
            data.len(),
            numel(&shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            parents,
            backward: RefCell::new(backward),
            grad: RefCell::new(None),
        }))
    }

    /// A value that never receives a gradient (inputs, masks, targets).
    pub fn constant(data: Vec<f32>, shape: &[usize]) -> Var {
        Self::new_node(Rc::new(data), shape.to_vec(), false, Vec::new(), None)
    }

    /// A trainable leaf; its gradient is retained after `backward`.
    pub fn leaf(data: Vec<f32>, shape: &[usize]) -> Var {
        Self::new_node(Rc::new(data), shape.to_vec(), true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Var {
        Self::constant(vec![0.0; numel(shape)], shape)
    }

    pub fn full(value: f32, shape: &[usize]) -> Var {
        Self::constant(vec![value; numel(shape)], shape)
    }

    /// Builds the result of an op. The backward closure is dropped (and the
    /// parents released) when no parent needs a gradient.
    pub(crate) fn from_op<F>(data: Vec<f32>, shape: Vec<usize>, parents: Vec<Var>, backward: F) -> Var
    where
        F: FnOnce(&[f32]) -> Vec<Option<Vec<f32>>> + 'static,
    {
        Self::from_shared(Rc::new(data), shape, parents, backward)
    }

    pub(crate) fn from_shared<F>(
        data: Rc<Vec<f32>>,
        shape: Vec<usize>,
        parents: Vec<Var>,
        backward: F,
    ) -> Var
    where
        F: FnOnce(&[f32]) -> Vec<Option<Vec<f32>>> + 'static,
    {
        if parents.iter().any(Var::requires_grad) {
            Self::new_node(data, shape, true, parents, Some(Box::new(backward)))
        } else {
            Self::new_node(data, shape, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub(crate) fn shared_data(&self) -> Rc<Vec<f32>> {
        self.0.data.clone()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Gradient accumulated on this node by the last backward pass. Only
    /// leaves keep their gradient once the pass finishes.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow().clone()
    }

    /// A copy of the value cut off from the graph.
    pub fn detach(&self) -> Var {
        Self::new_node(self.0.data.clone(), self.0.shape.clone(), false, Vec::new(), None)
    }

    /// Reverse-mode pass seeded with `seed` as d(objective)/d(self).
    pub fn backward_with(&self, seed: Vec<f32>) {
        assert_eq!(seed.len(), self.numel(), "seed gradient has wrong length");
        if !self.requires_grad() {
            return;
        }
        let mut order: Vec<Var> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !v.requires_grad() || !seen.insert(v.id()) {
                continue;
            }
            for p in &v.0.parents {
                stack.push(p.clone());
            }
            order.push(v);
        }
        order.sort_by(|a, b| b.id().cmp(&a.id()));

        accumulate(&self.0.grad, seed);
        for node in order {
            let is_leaf = node.0.parents.is_empty();
            if is_leaf {
                continue;
            }
            let grad = node.0.grad.borrow_mut().take();
            let backward = node.0.backward.borrow_mut().take();
            let (Some(grad), Some(backward)) = (grad, backward) else {
                continue;
            };
            let parent_grads = backward(&grad);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for (parent, g) in node.0.parents.iter().zip(parent_grads) {
                if let Some(g) = g {
                    if parent.requires_grad() {
                        debug_assert_eq!(g.len(), parent.numel());
                        accumulate(&parent.0.grad, g);
                    }
                }
            }
        }
    }

    /// Backward pass for a scalar objective.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() needs a scalar; use backward_with");
        self.backward_with(vec![1.0]);
    }
}

fn accumulate(slot: &RefCell<Option<Vec<f32>>>, g: Vec<f32>) {
    let mut slot = slot.borrow_mut();
    match slot.as_mut() {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Drop for Node {
    // Long op chains would otherwise drop recursively through `parents`.
    fn drop(&mut self) {
        let mut pending: Vec<Var> = std::mem::take(&mut self.parents);
        // the closure may hold the only other handles to the parents
        drop(self.backward.get_mut().take());
        while let Some(v) = pending.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                pending.append(&mut node.parents);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_do_not_record_history() {
        let a = Var::constant(vec![1.0, 2.0], &[2]);
        let b = crate::ops::mul(&a, &a);
        assert!(!b.requires_grad());
        assert_eq!(b.data(), &[1.0, 4.0]);
    }

    #[test]
    fn leaf_gradient_accumulates_over_shared_use() {
        let a = Var::leaf(vec![3.0], &[1]);
        let b = crate::ops::add(&a, &a);
        let c = crate::ops::mul(&b, &a);
        c.backward();
        // c = 2a^2
        assert_eq!(a.grad().unwrap(), vec![12.0]);
    }

    #[test]
    fn deep_chain_drops_without_overflow() {
        let mut x = Var::leaf(vec![1.0], &[1]);
        for _ in 0..200_000 {
            x = crate::ops::scale(&x, 1.0);
        }
        drop(x);
    }
}
