//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node holding its
//! forward value and, when any input requires a gradient, a [`Backward`]
//! implementation. [`Graph::backward`] walks the tape once in reverse.
//!
//! Parameters live outside the tape in a [`ParamStore`]; binding one into a
//! graph creates (at most once per graph) a leaf that collects its gradient.

mod conv;
mod ops;
#[doc(hidden)]
pub mod testing;

pub use conv::{avg_pool2, conv2d_forward};
pub(crate) use ops::boxed;

use std::collections::HashMap;
use std::sync::Arc;

use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Handle to a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Gradient rule of a recorded operation.
///
/// `needs[i]` tells whether input `i` requires a gradient; implementations may
/// return `None` for inputs that do not.
pub(crate) trait Backward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Named, shaped parameter tensors shared by every network in a model.
///
/// Values are reference-counted so a store can be cloned cheaply into
/// operations that re-evaluate a sub-network during their backward pass.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }
}

/// Whether parameters bound into a graph should collect gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    Frozen,
}

pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    mode: ParamMode,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            mode: ParamMode::Trainable,
        }
    }

    /// A graph whose bound parameters are constants.
    pub fn frozen() -> Self {
        Self {
            mode: ParamMode::Frozen,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that collects a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = store.get(id).clone();
        let v = match self.mode {
            ParamMode::Trainable => self.leaf(value),
            ParamMode::Frozen => self.constant(value),
        };
        self.bound.insert(id, v);
        v
    }

    /// The variable a parameter was bound to, if it has been.
    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// Records an operation. The backward rule is dropped when no parent needs a gradient.
    pub(crate) fn push(&mut self, value: Tensor, parents: Vec<Var>, op: Box<dyn Backward>) -> Var {
        let requires_grad = self.any_requires_grad(&parents);
        self.nodes.push(Node {
            value,
            parents: if requires_grad { parents } else { Vec::new() },
            op: if requires_grad { Some(op) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let value = self.value(root);
        assert_eq!(value.numel(), 1, "backward() needs a scalar root, got {:?}", value.shape());
        self.backward_with(root, Tensor::from_vec(value.shape(), vec![1.0]))
    }

    /// Back-propagates `seed` (shaped like the root) through the tape.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(input_grads.len(), node.parents.len());
            for ((parent, g), need) in node.parents.iter().zip(input_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.shape(), self.nodes[parent.0].value.shape());
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients {
            grads,
            bound: self.bound.clone(),
        }
    }
}

/// Result of a backward pass: gradients of leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bound: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.bound.get(&id).and_then(|&v| self.get(v))
    }

    /// Gradient for every parameter in `store`, zero where the parameter was unused.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}
