//! Reverse-mode autodiff on an append-only tape.
//!
//! Each op pushes a node whose backward closure scatters the incoming
//! gradient to its parents. Node ids grow monotonically, so a single
//! reverse sweep over ids is a valid topological order.

use std::cell::RefCell;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::tensor::Tensor;

static TAPE_COUNTER: AtomicUsize = AtomicUsize::new(0);

type BackwardFn = Box<dyn FnOnce(&Tensor, &mut GradSink)>;

struct Node {
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Tape {
    id: usize,
    nodes: RefCell<Vec<Node>>,
    inference: bool,
}

/// One variable on a tape: node id plus its forward value.
#[derive(Clone)]
pub struct Var {
    pub(crate) id: usize,
    pub(crate) tape_id: usize,
    value: Tensor,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Gradient accumulator indexed by node id.
pub struct GradSink {
    grads: Vec<Option<Tensor>>,
    requires: Vec<bool>,
}

impl GradSink {
    /// Whether anything downstream wants this node's gradient.
    pub fn wants(&self, id: usize) -> bool {
        self.requires[id]
    }

    pub fn add(&mut self, id: usize, grad: Tensor) {
        if !self.requires[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => g.accumulate(&grad, 1.0),
            slot => *slot = Some(grad),
        }
    }
}

/// Gradients of a completed backward pass.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            inference: false,
        }
    }

    /// A tape that records values only; backward closures are dropped.
    pub fn inference() -> Self {
        Self { inference: true, ..Self::new() }
    }

    pub fn is_inference(&self) -> bool {
        self.inference
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf (parameter or input under test).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, !self.inference, None)
    }

    /// A non-differentiable input; backward never flows into it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    pub(crate) fn push(
        &self,
        value: Tensor,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            backward: if self.inference { None } else { backward },
            requires_grad: requires_grad && !self.inference,
        });
        Var { id, tape_id: self.id, value }
    }

    pub(crate) fn check(&self, v: &Var) {
        debug_assert_eq!(v.tape_id, self.id, "var used on a foreign tape");
    }

    pub(crate) fn any_requires(&self, vars: &[&Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.id].requires_grad)
    }

    /// Reverse sweep from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: &Var) -> Grads {
        self.check(loss);
        assert_eq!(loss.value.numel(), 1, "backward needs a scalar loss");
        assert!(!self.inference, "backward on an inference tape");
        let n = self.nodes.borrow().len();
        let requires: Vec<bool> = self.nodes.borrow().iter().map(|n| n.requires_grad).collect();
        let mut sink = GradSink { grads: vec![None; n], requires };
        sink.grads[loss.id] = Some(Tensor::from_vec(loss.value.shape().to_vec(), vec![1.0]));
        for id in (0..=loss.id).rev() {
            let grad = match &sink.grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            let backward = self.nodes.borrow_mut()[id].backward.take();
            if let Some(f) = backward {
                f(&grad, &mut sink);
            }
        }
        Grads { grads: sink.grads }
    }
}
