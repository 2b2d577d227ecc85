use std::cell::RefCell;
use std::collections::BTreeSet;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::{Array, Scalar};

/// Per-node context handed to a backward closure.
pub(crate) struct BackwardCtx<'a, T> {
    pub grad: &'a Array<T>,
    pub out: &'a Array<T>,
    pub inputs: Vec<&'a Array<T>>,
    pub needs: Vec<bool>,
}

impl<T> BackwardCtx<'_, T> {
    pub fn input(&self, i: usize) -> &Array<T> {
        self.inputs[i]
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Result<Vec<Option<Array<T>>>>>;

struct Node<T> {
    op: &'static str,
    value: Rc<Array<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Records every operation of one forward pass so it can be replayed in reverse.
///
/// Nodes are appended in execution order, which is already a topological order.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn leaf(&self, value: Array<T>, requires_grad: bool) -> Var<'_, T> {
        self.push("leaf", value, Vec::new(), None, requires_grad)
    }

    pub fn constant(&self, value: Array<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Distinct op names recorded so far (leaves excluded).
    pub fn op_names(&self) -> BTreeSet<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).filter(|&op| op != "leaf").collect()
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Array<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(
        &self,
        op: &'static str,
        value: Array<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op, value: Rc::new(value), parents, backward, requires_grad });
        Var { tape: self, id }
    }

    pub(crate) fn push_op<F>(&self, op: &'static str, value: Array<T>, parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: Fn(&BackwardCtx<'_, T>) -> Result<Vec<Option<Array<T>>>> + 'static,
    {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = ids.iter().any(|&i| self.requires_grad(i));
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(op, value, ids, backward, requires_grad)
    }

    /// Reverse pass from a single-element output. Returns gradients of every leaf
    /// that requires them; intermediate gradients are released as soon as they are consumed.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[output.id];
        if root.value.len() != 1 {
            return Err(Error::Argument(format!("backward needs a scalar output, got shape {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..=output.id).map(|_| None).collect();
        grads[output.id] = Some(Array::full(root.value.shape(), T::one()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let inputs: Vec<&Array<T>> = node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let ctx = BackwardCtx { grad: &grad, out: &node.value, inputs, needs };
            let parent_grads = backward(&ctx)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                if g.shape() != nodes[p].value.shape() {
                    return Err(Error::Shape(format!(
                        "op {} produced gradient {:?} for input {:?}",
                        node.op,
                        g.shape(),
                        nodes[p].value.shape()
                    )));
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        // Only leaves keep their gradient; everything else was taken above.
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Array<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Array<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }

    pub fn get_id(&self, id: usize) -> Option<&Array<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take_id(&mut self, id: usize) -> Option<Array<T>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Array<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        self.value().dims4()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub(crate) fn new_op<F>(&self, op: &'static str, value: Array<T>, parents: &[Var<'t, T>], backward: F) -> Var<'t, T>
    where
        F: Fn(&BackwardCtx<'_, T>) -> Result<Vec<Option<Array<T>>>> + 'static,
    {
        self.tape.push_op(op, value, parents, backward)
    }
}
