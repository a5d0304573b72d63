//! Named parameters and thin layer wrappers.
//!
//! A `ParamStore` owns every weight by name; a `Graph` binds params onto a
//! tape for one forward pass (trainable params as leaves, frozen ones as
//! constants) and hands gradients back keyed by param id.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::ops::{self, PadMode};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamId {
    /// Stable index of this param within its store.
    pub fn index(&self) -> usize {
        self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, trainable });
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape());
        self.entries[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Flip trainability for every param whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, e)| e.trainable).map(|(id, _)| id).collect()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// Per-forward binding of params onto a tape.
pub struct Graph<'a> {
    pub tape: &'a Tape,
    pub store: &'a ParamStore,
    bound: RefCell<HashMap<usize, Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Self { tape, store, bound: RefCell::new(HashMap::new()) }
    }

    /// Bind a param as a tape var (leaf if trainable, constant otherwise).
    /// Repeated use of the same param reuses the same node.
    pub fn p(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow().get(&id.0) {
            return v.clone();
        }
        let entry = &self.store.entries[id.0];
        let var = if entry.trainable && !self.tape.is_inference() {
            self.tape.leaf(entry.value.clone())
        } else {
            self.tape.constant(entry.value.clone())
        };
        self.bound.borrow_mut().insert(id.0, var.clone());
        var
    }

    /// Collect parameter gradients after a backward pass.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, Tensor)> {
        let mut out = Vec::new();
        for (&pid, var) in self.bound.borrow().iter() {
            if let Some(g) = grads.get(var) {
                out.push((ParamId(pid), g.clone()));
            }
        }
        out.sort_by_key(|(id, _)| id.0);
        out
    }
}

pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        mode: PadMode,
        rng: &mut impl Rng,
    ) -> Self {
        let w = Tensor::randn_scaled([cout, cin, k, k], he_std(cin * k * k), rng);
        let wid = store.add(format!("{name}.w"), w, true);
        let bid = store.add(format!("{name}.b"), Tensor::zeros([cout]), true);
        Self { w: wid, b: Some(bid), stride, pad, mode }
    }

    pub fn new_zeroed(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Self {
        let wid = store.add(format!("{name}.w"), Tensor::zeros([cout, cin, k, k]), true);
        let bid = store.add(format!("{name}.b"), Tensor::zeros([cout]), true);
        Self { w: wid, b: Some(bid), stride, pad, mode }
    }

    /// 1x1 projection without bias.
    pub fn new_proj(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = Tensor::randn_scaled([cout, cin, 1, 1], he_std(cin), rng);
        let wid = store.add(format!("{name}.w"), w, true);
        Self { w: wid, b: None, stride: 1, pad: 0, mode: PadMode::Zero }
    }

    /// 1x1 projection without bias, zero-initialized: the branch it feeds
    /// contributes nothing until training moves it.
    pub fn new_proj_zeroed(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        let wid = store.add(format!("{name}.w"), Tensor::zeros([cout, cin, 1, 1]), true);
        Self { w: wid, b: None, stride: 1, pad: 0, mode: PadMode::Zero }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let w = g.p(self.w);
        let b = self.b.map(|b| g.p(b));
        ops::conv2d(g.tape, x, &w, b.as_ref(), self.stride, self.pad, self.mode)
    }
}

#[derive(Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = Tensor::randn_scaled([din, dout], (1.0 / din as f64).sqrt(), rng);
        let wid = store.add(format!("{name}.w"), w, true);
        let bid = store.add(format!("{name}.b"), Tensor::zeros([dout]), true);
        Self { w: wid, b: Some(bid) }
    }

    pub fn new_no_bias(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = Tensor::randn_scaled([din, dout], (1.0 / din as f64).sqrt(), rng);
        let wid = store.add(format!("{name}.w"), w, true);
        Self { w: wid, b: None }
    }

    pub fn new_zeroed(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Self {
        let wid = store.add(format!("{name}.w"), Tensor::zeros([din, dout]), true);
        let bid = store.add(format!("{name}.b"), Tensor::zeros([dout]), true);
        Self { w: wid, b: Some(bid) }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let w = g.p(self.w);
        let y = ops::matmul(g.tape, x, &w);
        match self.b {
            Some(b) => {
                let b = g.p(b);
                ops::add_bias_rows(g.tape, &y, &b)
            }
            None => y,
        }
    }
}

#[derive(Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([channels], 1.0), true);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([channels]), true);
        Self { gamma, beta, groups, eps: 1e-5 }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let gamma = g.p(self.gamma);
        let beta = g.p(self.beta);
        ops::group_norm(g.tape, x, &gamma, &beta, self.groups, self.eps)
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([dim], 1.0), true);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([dim]), true);
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let gamma = g.p(self.gamma);
        let beta = g.p(self.beta);
        ops::layer_norm(g.tape, x, &gamma, &beta, self.eps)
    }
}
