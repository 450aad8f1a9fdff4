use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::{Scalar, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &mut GradSink<'_, T>)>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Records operations in evaluation order so that [`Tape::backward`] can
/// replay them in reverse.
///
/// A tape is single-threaded and meant to live for one forward/backward
/// pass; drop it afterwards to release the saved activations.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// Accumulates gradient contributions during the reverse sweep.
pub struct GradSink<'a, T: Scalar> {
    grads: &'a mut [Option<Tensor<T>>],
    requires: &'a [bool],
}

impl<T: Scalar> GradSink<'_, T> {
    /// Whether a contribution to `id` would be kept.
    pub fn wants(&self, id: usize) -> bool {
        self.requires[id]
    }

    pub fn add(&mut self, id: usize, grad: Tensor<T>) {
        if !self.requires[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => g.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.insert(Rc::new(value), true, None)
    }

    /// Shares an existing buffer as a differentiable input.
    pub fn leaf_shared(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.insert(value, true, None)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.insert(Rc::new(value), false, None)
    }

    pub fn constant_shared(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.insert(value, false, None)
    }

    fn insert(&self, value: Rc<Tensor<T>>, requires_grad: bool, backward: Option<BackwardFn<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, backward });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Records the result of an operation. `backward` receives the upstream
    /// gradient and pushes contributions for the parents into the sink. It
    /// is only retained when at least one parent requires a gradient.
    pub fn op<F>(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>, &mut GradSink<'_, T>) + 'static,
    {
        self.op_shared(Rc::new(value), parents, backward)
    }

    /// Like [`Tape::op`] for outputs the backward closure also keeps.
    pub fn op_shared<F>(&self, value: Rc<Tensor<T>>, parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>, &mut GradSink<'_, T>) + 'static,
    {
        let requires = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| {
                debug_assert!(std::ptr::eq(p.tape, self), "operands from different tapes");
                nodes[p.id].requires_grad
            })
        };
        if requires {
            self.insert(value, true, Some(Box::new(backward)))
        } else {
            self.insert(value, false, None)
        }
    }

    /// Reverse sweep from a single-element `output`. Gradients are kept for
    /// leaves only.
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        self.backward_with(output, Tensor::full(&output.shape(), T::one()))
    }

    pub fn backward_with(&self, output: Var<'_, T>, seed: Tensor<T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(seed.shape(), nodes[output.id].value.shape(), "seed shape mismatch");
        let requires: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if requires[output.id] {
            grads[output.id] = Some(seed);
        }
        for id in (0..=output.id).rev() {
            let Some(bw) = nodes[id].backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let mut sink = GradSink { grads: &mut grads, requires: &requires };
            bw(&g, &mut sink);
        }
        Gradients { grads }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl<'t, T: Scalar> Var<'t, T> {
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

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element var.
    pub fn item(&self) -> T {
        self.value().item()
    }
}
