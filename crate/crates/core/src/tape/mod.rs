//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is an append-only arena: every op records its output value and a
//! backward closure mapping the output gradient to per-input gradients. Nodes
//! only reference earlier nodes, so the graph is acyclic by construction and
//! [`Tape::backward`] walks it once in reverse insertion order.

mod conv;
mod gradcheck;
mod norm;
mod ops;
mod optim;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub use conv::{col2im, conv2d_forward, im2col, ConvParams};
pub use gradcheck::{check_gradients, rel_error, GradCheckReport};
pub use norm::{BatchNormState, BnBuffers};
pub use ops::sigmoid;
pub use optim::{LrSchedule, NonFinitePolicy, OptimizerKind, OptimizerState, StepReport};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    op: &'static str,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; backward closures are dropped.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, "constant")
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.leaf(value, rg, "param")
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, op: &'static str) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op. `backward` is only built when some input needs a gradient.
    pub fn push<F, B>(&mut self, op: &'static str, value: Tensor<T>, parents: &[Var], backward: F) -> Var
    where
        F: FnOnce() -> B,
        B: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward: Option<BackwardFn<T>> = if requires_grad {
            Some(Box::new(backward()))
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::Gradient(format!(
                "loss must be scalar, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_node.value.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let input_grads = backward(&g);
            if input_grads.len() != node.parents.len() {
                return Err(Error::Gradient(format!(
                    "op `{}` returned {} gradients for {} inputs",
                    node.op,
                    input_grads.len(),
                    node.parents.len()
                )));
            }
            for (&p, ig) in node.parents.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if ig.shape() != self.nodes[p].value.shape() {
                    return Err(Error::Gradient(format!(
                        "op `{}` produced gradient of shape {:?} for input of shape {:?}",
                        node.op,
                        ig.shape(),
                        self.nodes[p].value.shape()
                    )));
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf; a detached leaf is a diagnostic.
    pub fn require(&self, v: Var, name: &str) -> Result<&Tensor<T>> {
        self.get(v)
            .ok_or_else(|| Error::Gradient(format!("parameter `{name}` is detached from the loss")))
    }
}

/// Index of a trainable tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors that persist across tapes.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Binds a [`ParamStore`] onto a tape, one leaf per parameter on first use.
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn new<T: Real>(store: &ParamStore<T>) -> Self {
        Self {
            vars: vec![None; store.len()],
        }
    }

    pub fn var<T: Real>(&mut self, tape: &mut Tape<T>, store: &ParamStore<T>, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| tape.param(store.get(id).clone()))
    }

    /// Per-parameter gradients in store order; unused parameters get `None`.
    pub fn collect<T: Real>(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect()
    }

    /// Uses `var` for parameter `id` instead of creating a leaf.
    pub fn set(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = Some(var);
    }

    pub fn lookup(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }
}
