//! A small reverse-mode differentiation tape.
//!
//! Every operation eagerly computes its value and, when at least one input
//! needs a gradient, records a closure mapping the output gradient to input
//! gradients. `Tape::backward` replays those closures in reverse creation
//! order, which is a valid topological order because a node can only consume
//! nodes created before it.

mod conv;
mod deform;
mod ops;

pub use deform::{bilinear_sample, TAPS};
pub(crate) use ops::bce_mean_kernel;

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Shape, Tensor};

pub(crate) type GradFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    grad_fn: Option<GradFn<T>>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<BTreeMap<String, usize>>,
    track_params: bool,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape whose parameters are trainable leaves.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
            track_params: true,
        }
    }

    /// A tape that records parameters as constants, so no backward closures
    /// are ever built.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        grad_fn: Option<GradFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            grad_fn,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, Vec::new(), None, false)
    }

    /// A differentiable input that is not a named parameter.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, Vec::new(), None, true)
    }

    /// Binds a named parameter. Repeated lookups of the same name return the
    /// same node, so parameters used by several sub-networks accumulate one
    /// gradient.
    pub fn param(&self, store: &ParamStore<T>, name: &str) -> Result<Var<'_, T>> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(Var { tape: self, id });
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?
            .clone();
        let var = self.push_node(value, Vec::new(), None, self.track_params);
        self.params.borrow_mut().insert(name.to_owned(), var.id);
        Ok(var)
    }

    /// Records an operation result. `grad_fn` receives the output gradient and
    /// a flag per parent saying whether that parent needs a gradient.
    pub(crate) fn op(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        grad_fn: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        if requires_grad {
            self.push_node(value, ids, Some(Box::new(grad_fn)), true)
        } else {
            self.push_node(value, Vec::new(), None, false)
        }
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", root_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(root_value.shape(), T::one()));
        let mut leaves = HashMap::new();
        for id in (0..=root.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            match &node.grad_fn {
                Some(f) => {
                    let needs: Vec<bool> = node
                        .parents
                        .iter()
                        .map(|&p| nodes[p].requires_grad)
                        .collect();
                    let parent_grads = f(&grad, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot => *slot = Some(pg),
                        }
                    }
                }
                None if node.requires_grad => {
                    leaves.insert(id, grad);
                }
                None => {}
            }
        }
        Ok(Gradients {
            leaves,
            params: self.params.borrow().clone(),
        })
    }
}

/// Gradients of the leaves reached by a backward pass.
pub struct Gradients<T: Scalar> {
    leaves: HashMap<usize, Tensor<T>>,
    params: BTreeMap<String, usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|id| self.leaves.get(id))
    }

    /// Gradient per bound parameter; parameters that did not influence the
    /// root get zeros so optimizers see a complete map.
    pub fn param_map(&self, store: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
        store
            .iter()
            .map(|(name, value)| {
                let g = self
                    .param(name)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Shape {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a `[1,1,1,1]` node.
    pub fn item(&self) -> T {
        self.value().item()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_parameter_accumulates_both_uses() {
        let mut store = ParamStore::<f64>::default();
        store.insert("w", Tensor::scalar(3.0));
        let tape = Tape::new();
        let a = tape.param(&store, "w").unwrap();
        let b = tape.param(&store, "w").unwrap();
        let y = a.mul(b).unwrap().mean();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.param("w").unwrap().item(), 6.0);
    }

    #[test]
    fn inference_tape_builds_no_closures() {
        let mut store = ParamStore::<f32>::default();
        store.insert("w", Tensor::scalar(2.0));
        let tape = Tape::inference();
        let w = tape.param(&store, "w").unwrap();
        let y = w.relu();
        assert!(!y.requires_grad());
        assert_eq!(y.item(), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 2, 2]));
        assert!(tape.backward(x).is_err());
    }
}
