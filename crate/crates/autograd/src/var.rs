//! Graph nodes and reverse-mode differentiation.
//!
//! Every backward rule is written in terms of differentiable [`Var`] ops, so
//! a gradient computed with `create_graph = true` is itself part of a graph
//! and can be differentiated again (needed for gradient penalties).

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::tensor::Tensor;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) type BackwardFn = dyn Fn(&[Var], &Var, &Var, &[bool]) -> Vec<Option<Var>> + Send + Sync;

struct GradFn {
    name: &'static str,
    inputs: Vec<Var>,
    backward: Box<BackwardFn>,
}

struct Node {
    id: usize,
    value: Tensor,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Var(Arc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.0.grad_fn.as_ref().map(|g| g.name).unwrap_or("leaf");
        write!(f, "Var#{}({}, {:?})", self.0.id, op, self.0.value)
    }
}

impl Var {
    fn make(value: Tensor, requires_grad: bool, grad_fn: Option<GradFn>) -> Var {
        Var(Arc::new(Node { id: NEXT_ID.fetch_add(1, Ordering::Relaxed), value, requires_grad, grad_fn }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Var {
        Var::make(value, false, None)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn leaf(value: Tensor) -> Var {
        Var::make(value, true, None)
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(Tensor::scalar(v))
    }

    pub(crate) fn from_op(
        name: &'static str,
        value: Tensor,
        inputs: Vec<Var>,
        backward: impl Fn(&[Var], &Var, &Var, &[bool]) -> Vec<Option<Var>> + Send + Sync + 'static,
    ) -> Var {
        let track = grad_enabled() && inputs.iter().any(|v| v.requires_grad());
        if track {
            Var::make(value, true, Some(GradFn { name, inputs, backward: Box::new(backward) }))
        } else {
            Var::constant(value)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    fn inputs(&self) -> &[Var] {
        self.0.grad_fn.as_ref().map(|g| &g.inputs[..]).unwrap_or(&[])
    }
}

/// Gradients of `output` with respect to each of `wrt`, seeded with `seed`
/// (ones of the output shape when `None`).
///
/// Entries are `None` for inputs the output does not depend on. With
/// `create_graph`, the returned gradients are differentiable.
pub fn grad_with_seed(output: &Var, seed: Option<Tensor>, wrt: &[&Var], create_graph: bool) -> Vec<Option<Var>> {
    let run = || backward_pass(output, seed, wrt);
    if create_graph {
        run()
    } else {
        no_grad(run)
    }
}

pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Option<Var>> {
    grad_with_seed(output, None, wrt, create_graph)
}

fn backward_pass(output: &Var, seed: Option<Tensor>, wrt: &[&Var]) -> Vec<Option<Var>> {
    let mut results: Vec<Option<Var>> = vec![None; wrt.len()];
    if !output.requires_grad() {
        return results;
    }

    // Post-order DFS gives a topological order (inputs before consumers).
    let mut order: Vec<Var> = Vec::new();
    let mut visited: HashMap<usize, ()> = HashMap::new();
    let mut stack: Vec<(Var, bool)> = vec![(output.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if visited.insert(v.id(), ()).is_some() {
            continue;
        }
        stack.push((v.clone(), true));
        for inp in v.inputs().iter().rev() {
            if inp.requires_grad() && !visited.contains_key(&inp.id()) {
                stack.push((inp.clone(), false));
            }
        }
    }

    // A node is relevant when some requested variable is reachable from it.
    let targets: HashMap<usize, usize> = wrt.iter().enumerate().map(|(i, v)| (v.id(), i)).collect();
    let mut relevant: HashMap<usize, bool> = HashMap::with_capacity(order.len());
    for v in &order {
        let r = targets.contains_key(&v.id()) || v.inputs().iter().any(|i| relevant.get(&i.id()).copied().unwrap_or(false));
        relevant.insert(v.id(), r);
    }

    let seed = seed.unwrap_or_else(|| Tensor::ones(output.shape()));
    assert_eq!(seed.shape(), output.shape(), "gradient seed shape mismatch");
    let mut grads: HashMap<usize, Var> = HashMap::new();
    grads.insert(output.id(), Var::constant(seed));

    for v in order.iter().rev() {
        if !relevant[&v.id()] {
            continue;
        }
        let Some(g) = grads.remove(&v.id()) else { continue };
        if let Some(&slot) = targets.get(&v.id()) {
            results[slot] = Some(g.clone());
        }
        let Some(gf) = v.0.grad_fn.as_ref() else { continue };
        let needs: Vec<bool> =
            gf.inputs.iter().map(|i| i.requires_grad() && relevant.get(&i.id()).copied().unwrap_or(false)).collect();
        if !needs.iter().any(|&n| n) {
            continue;
        }
        let input_grads = (gf.backward)(&gf.inputs, v, &g, &needs);
        debug_assert_eq!(input_grads.len(), gf.inputs.len(), "backward of {} returned wrong arity", gf.name);
        for ((inp, ig), need) in gf.inputs.iter().zip(input_grads).zip(&needs) {
            let (Some(ig), true) = (ig, *need) else { continue };
            debug_assert_eq!(ig.shape(), inp.shape(), "gradient shape mismatch in {}", gf.name);
            let acc = match grads.remove(&inp.id()) {
                Some(prev) => prev.add(&ig),
                None => ig,
            };
            grads.insert(inp.id(), acc);
        }
    }
    results
}
