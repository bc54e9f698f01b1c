//! Named parameter storage and per-forward binding of parameters to graph
//! leaves.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::tensor::Tensor;
use crate::var::{grad, Var};

/// Ordered map of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(!self.tensors.contains_key(&name), "duplicate parameter {}", name);
        self.tensors.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Panicking lookup for names the architecture itself registered.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing parameter {}", name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor)> + 'a {
        self.tensors.iter().filter(move |(k, _)| k.starts_with(prefix))
    }
}

/// Binds parameters to graph leaves for one forward pass.
///
/// In trainable mode every parameter touched becomes a gradient leaf;
/// otherwise parameters enter the graph as constants.
pub struct Bind<'a> {
    store: &'a ParamStore,
    trainable: bool,
    leaves: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Bind<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { store, trainable: true, leaves: RefCell::new(BTreeMap::new()) }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, trainable: false, leaves: RefCell::new(BTreeMap::new()) }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn p(&self, name: &str) -> Var {
        if let Some(v) = self.leaves.borrow().get(name) {
            return v.clone();
        }
        let t = self.store.expect(name).clone();
        let v = if self.trainable { Var::leaf(t) } else { Var::constant(t) };
        self.leaves.borrow_mut().insert(name.to_string(), v.clone());
        v
    }

    /// Leaves created so far, by name.
    pub fn leaves(&self) -> BTreeMap<String, Var> {
        self.leaves.borrow().clone()
    }

    /// Gradient of `loss` for every parameter of the store; parameters the
    /// loss does not touch get zeros.
    pub fn grads(&self, loss: &Var) -> BTreeMap<String, Tensor> {
        let leaves = self.leaves.borrow();
        let names: Vec<&String> = leaves.keys().collect();
        let vars: Vec<&Var> = leaves.values().collect();
        let gs = grad(loss, &vars, false);
        let mut out: BTreeMap<String, Tensor> = names
            .into_iter()
            .zip(gs)
            .map(|(n, g)| {
                let t = g.map(|v| v.value().clone()).unwrap_or_else(|| Tensor::zeros(self.store.expect(n).shape()));
                (n.clone(), t)
            })
            .collect();
        for (name, t) in self.store.iter() {
            out.entry(name.clone()).or_insert_with(|| Tensor::zeros(t.shape()));
        }
        out
    }
}
