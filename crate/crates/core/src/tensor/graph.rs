use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

use super::nn::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Vector-Jacobian product of one recorded operation.
///
/// Arguments are the upstream gradient, the parent values, the op's own
/// output, and which parents need a gradient. Returns one entry per parent.
pub(crate) type BackwardFn =
    Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Arc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Gradient tape: every operation on a [`Var`] appends a node. Nodes are
/// appended in evaluation order, so reverse id order is a valid reverse
/// topological order for the backward pass.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: Vec<Arc<Tensor>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    check_finite: bool,
    first_non_finite: Cell<Option<(usize, &'static str)>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.len())
            .field("params", &self.params.len())
            .finish()
    }
}

impl Graph {
    /// Empty tape without parameters.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: Vec::new(),
            param_nodes: RefCell::new(HashMap::new()),
            check_finite: cfg!(debug_assertions),
            first_non_finite: Cell::new(None),
        }
    }

    /// Tape that can bind the parameters of `store` (values are shared, not copied).
    pub fn with_params(store: &ParamStore) -> Self {
        Self {
            params: store.snapshot(),
            ..Self::new()
        }
    }

    /// Turns NaN/Inf detection on or off (default: on in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false, "constant")
    }

    /// Leaf that receives a gradient.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true, "input")
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let value = self
            .params
            .get(id.index())
            .unwrap_or_else(|| panic!("parameter {id:?} is not bound to this graph"))
            .clone();
        let var = self.push_node(Node {
            op: "param",
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        self.param_nodes.borrow_mut().insert(id, var.id);
        var
    }

    fn leaf(&self, value: Tensor, requires_grad: bool, op: &'static str) -> Var<'_> {
        self.push_node(Node {
            op,
            value: Arc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        })
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.check_finite
            && self.first_non_finite.get().is_none()
            && node.value.iter().any(|v| !v.is_finite())
        {
            self.first_non_finite.set(Some((id, node.op)));
        }
        nodes.push(node);
        Var { graph: self, id }
    }

    pub(crate) fn push_op(
        &self,
        op: &'static str,
        value: Tensor,
        parents: &[Var<'_>],
        backward: BackwardFn,
    ) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push_node(Node {
            op,
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        })
    }

    /// Error if any recorded value was NaN/Inf while checking was enabled.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite.get() {
            Some((id, op)) => Err(Error::Numeric(format!(
                "non-finite value produced by `{op}` (node {id})"
            ))),
            None => Ok(()),
        }
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_finite()?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::input(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(ArrayD::ones(root.value.raw_dim()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let parent_values: Vec<&Tensor> =
                node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&grad, &parent_values, &node.value, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(
                    pg.shape(),
                    nodes[p].value.shape(),
                    "gradient shape from op {}",
                    node.op
                );
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        // Interior gradients were consumed above; only leaves keep theirs.
        let params = self.param_nodes.borrow().clone();
        Ok(Gradients { grads, params })
    }

    pub(crate) fn value(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on tensor of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    /// Same value, cut off from the tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    /// Gradient of a leaf (`input` or `param`); `None` if it did not
    /// influence the loss.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .get(&id)
            .and_then(|&node| self.grads[node].as_ref())
    }

    /// Every bound parameter that received a gradient, in id order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&pid, &node)| self.grads[node].as_ref().map(|g| (pid, g)))
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }
}
