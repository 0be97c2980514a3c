//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Var`] is a reference-counted node holding its forward value and, when
//! gradients are being tracked, the parents and vector-Jacobian product that
//! produced it. The graph is built implicitly by calling ops; [`backward`]
//! walks it once in reverse topological order.
//!
//! Inside [`no_grad`] ops only compute values, so intermediate activations are
//! released as soon as they go out of scope. Inference uses this mode.

mod conv;
mod linalg;
mod norm;
mod ops;
mod resample;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::tensor::Tensor;

pub use conv::{conv3d_raw, Conv3dGeometry};
pub(crate) use resample::resample_axis;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` without recording a graph.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

type BackwardFn = Box<dyn Fn(&Tensor, &[Var], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    id: usize,
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value)
    }
}

impl Var {
    /// A value that never receives a gradient.
    pub fn constant(value: Tensor) -> Self {
        Self::leaf_with(Rc::new(value), false)
    }

    /// A leaf that accumulates a gradient when grad mode is on.
    pub fn leaf(value: Tensor) -> Self {
        Self::leaf_with(Rc::new(value), true)
    }

    pub(crate) fn shared_leaf(value: Rc<Tensor>) -> Self {
        Self::leaf_with(value, true)
    }

    fn leaf_with(value: Rc<Tensor>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: requires_grad && grad_enabled(),
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Build an op result. Parents and the VJP are kept only if some parent
    /// needs a gradient and grad mode is on.
    pub(crate) fn from_op(value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if track {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Var(Rc::new(Node {
            id: next_id(),
            value: Rc::new(value),
            requires_grad: track,
            parents,
            backward,
        }))
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

    /// Copy of the value, detached from the graph.
    pub fn detach(&self) -> Var {
        Var::leaf_with(self.0.value.clone(), false)
    }
}

/// Gradients of a scalar with respect to the leaves that required them.
#[derive(Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.grads.get(&v.id())
    }

    pub fn take(&mut self, v: &Var) -> Option<Tensor> {
        self.grads.remove(&v.id())
    }
}

/// Back-propagate from `root`, seeding with ones (so a non-scalar root gives
/// the gradient of the sum of its elements).
pub fn backward(root: &Var) -> Gradients {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // iterative post-order DFS
    let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in &v.0.parents {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }

    let mut pending: HashMap<usize, Tensor> = HashMap::new();
    let mut out = Gradients::default();
    if !root.requires_grad() {
        return out;
    }
    pending.insert(root.id(), Tensor::ones(root.shape()));
    for v in order.iter().rev() {
        let Some(g) = pending.remove(&v.id()) else {
            continue;
        };
        match &v.0.backward {
            None => {
                out.grads.insert(v.id(), g);
            }
            Some(f) => {
                let pg = f(&g, &v.0.parents, &v.0.value);
                debug_assert_eq!(pg.len(), v.0.parents.len());
                for (p, gp) in v.0.parents.iter().zip(pg) {
                    let Some(gp) = gp else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(gp.shape(), p.shape(), "gradient shape for parent");
                    match pending.get_mut(&p.id()) {
                        Some(acc) => acc.add_assign(&gp),
                        None => {
                            pending.insert(p.id(), gp);
                        }
                    }
                }
            }
        }
    }
    out
}
