use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::autodiff::params::ParamStore;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Reverse rule of a recorded operation.
///
/// `needs[i]` tells whether input `i` requires a gradient; implementations may
/// return `None` for inputs that do not.
pub trait Backward<T: Real> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Dynamic computation graph, rebuilt for every forward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<BTreeMap<String, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            op: None,
            requires_grad,
        })
    }

    /// Records the parameter `name` from `store`; repeated requests within one
    /// graph return the same node so gradients accumulate in one place.
    pub fn param(&self, store: &ParamStore<T>, name: &str) -> Result<Var<'_, T>> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(Var { tape: self, id });
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown parameter `{name}`")))?;
        let var = self.leaf(p.value.clone(), p.trainable);
        self.params.borrow_mut().insert(name.to_string(), var.id);
        Ok(var)
    }

    /// Records the output of an operation.
    pub fn push<'t>(
        &'t self,
        value: Tensor<T>,
        parents: &[Var<'t, T>],
        op: impl Backward<T> + 'static,
    ) -> Var<'t, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push_node(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            op: if requires_grad { Some(Box::new(op)) } else { None },
            requires_grad,
        })
    }

    /// Reverse sweep from a scalar `loss`. Nodes are visited in decreasing
    /// creation order, which fixes the accumulation order of every gradient.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.id].value.shape();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(loss_shape));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &*nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = op.backward(&inputs, &node.value, &g, &needs)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                if pg.shape() != nodes[p].value.shape() {
                    return Err(Error::shape("backward", &[pg.shape(), nodes[p].value.shape()]));
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradients of `loss` for every trainable parameter in `store`; parameters
    /// the loss does not reach get zeros.
    pub fn backpropagate(
        &self,
        loss: Var<'_, T>,
        store: &ParamStore<T>,
    ) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut grads = self.backward(loss)?;
        let params = self.params.borrow();
        let mut out = BTreeMap::new();
        for (name, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            let g = params
                .get(name)
                .and_then(|&id| grads.grads[id].take())
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, zeros if the loss does not depend on it.
    pub fn wrt_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.wrt(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}
