use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use super::ops::{backward_step, Op};
use super::value::Value;

pub(crate) struct Node {
    pub data: ArrayD<f64>,
    pub grad: Option<ArrayD<f64>>,
    pub op: Op,
    pub gen: u32,
    pub requires_grad: bool,
}

pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
    pub generation: u32,
}

/// Shared recording tape. Cloning the handle shares the underlying list.
#[derive(Clone)]
pub struct Tape {
    pub(crate) inner: Rc<RefCell<TapeInner>>,
}

/// Snapshot of the tape length, used to truncate intermediate nodes after a
/// training step while keeping parameter leaves alive.
#[derive(Clone, Copy, Debug)]
pub struct TapeMark {
    pub(crate) len: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                generation: 0,
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable leaf (a parameter).
    pub fn leaf(&self, data: ArrayD<f64>) -> Value {
        self.push(data, Op::Leaf, true)
    }

    /// Records a non-differentiable constant.
    pub fn constant(&self, data: ArrayD<f64>) -> Value {
        self.push(data, Op::Leaf, false)
    }

    pub fn scalar_constant(&self, v: f64) -> Value {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub(crate) fn push(&self, data: ArrayD<f64>, op: Op, requires_grad: bool) -> Value {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "tape push: non-finite data in {:?}",
            op.name()
        );
        let mut inner = self.inner.borrow_mut();
        let gen = inner.generation;
        inner.nodes.push(Node {
            data,
            grad: None,
            op,
            gen,
            requires_grad,
        });
        Value {
            tape: self.clone(),
            idx: inner.nodes.len() - 1,
            gen,
        }
    }

    pub fn mark(&self) -> TapeMark {
        TapeMark { len: self.len() }
    }

    /// Drops every node recorded after `mark` and bumps the generation so
    /// stale handles are rejected instead of silently reading freed slots.
    pub fn truncate(&self, mark: TapeMark) {
        let mut inner = self.inner.borrow_mut();
        assert!(
            mark.len <= inner.nodes.len(),
            "truncate: mark length {} exceeds tape length {}",
            mark.len,
            inner.nodes.len()
        );
        inner.nodes.truncate(mark.len);
        inner.generation += 1;
        let generation = inner.generation;
        // Surviving nodes move to the new generation so their handles would
        // also go stale; re-issue handles for anything that must outlive a
        // truncation by recording it before the mark.
        for node in inner.nodes.iter_mut() {
            node.gen = generation;
        }
    }

    /// Re-issues a handle for a value recorded before the last truncation.
    pub fn retain(&self, value: &Value) -> Value {
        let inner = self.inner.borrow();
        assert!(
            value.idx < inner.nodes.len(),
            "retain: node {} was truncated (tape length {})",
            value.idx,
            inner.nodes.len()
        );
        Value {
            tape: self.clone(),
            idx: value.idx,
            gen: inner.nodes[value.idx].gen,
        }
    }

    pub fn zero_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        for node in inner.nodes.iter_mut() {
            node.grad = None;
        }
    }

    /// Reverse pass from a scalar value. Gradients accumulate: call
    /// [`Tape::zero_grads`] (or let the optimizer do it) between steps.
    pub fn backward(&self, loss: &Value) {
        loss.check_live();
        let inner = &mut *self.inner.borrow_mut();
        let root = loss.idx;
        assert_eq!(
            inner.nodes[root].data.len(),
            1,
            "backward: loss must be a scalar, got shape {:?}",
            inner.nodes[root].data.shape()
        );
        if !inner.nodes[root].requires_grad {
            return;
        }
        let seed = ArrayD::ones(inner.nodes[root].data.raw_dim());
        match &mut inner.nodes[root].grad {
            Some(g) => *g += &seed,
            slot @ None => *slot = Some(seed),
        }
        for idx in (0..=root).rev() {
            if !inner.nodes[idx].requires_grad || inner.nodes[idx].grad.is_none() {
                continue;
            }
            let op = inner.nodes[idx].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            // Intermediate gradients are dropped once propagated; only leaves
            // accumulate across backward calls.
            let gout = inner.nodes[idx].grad.take().expect("checked above");
            let contribs = backward_step(&op, &gout, &inner.nodes[idx].data, &inner.nodes);
            for (parent, contrib) in contribs {
                debug_assert!(parent < idx, "tape order violated");
                match &mut inner.nodes[parent].grad {
                    Some(g) => *g += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
    }
}
