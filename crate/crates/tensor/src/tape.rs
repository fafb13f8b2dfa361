use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::{Array, Float};

/// Computes parent gradients from the output gradient.
///
/// The second argument flags which parents need a gradient; entries for the
/// others may be `None`.
pub type BackwardFn<T> = Box<dyn Fn(&Array<T>, &[bool]) -> Vec<Option<Array<T>>>>;

struct Node<T> {
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Records operations for one forward pass.
///
/// A tape is cheap to clone (shared handle). Build a fresh tape per step;
/// dropping it releases every intermediate value.
pub struct Tape<T: Float> {
    inner: Rc<RefCell<Inner<T>>>,
}

impl<T: Float> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("grad_enabled", &inner.grad_enabled)
            .finish()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A tape that never records backward closures (inference).
    pub fn no_grad() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Self {
            inner: Rc::new(RefCell::new(Inner {
                nodes: Vec::new(),
                grad_enabled,
            })),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.borrow().grad_enabled
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, node: Node<T>, value: Rc<Array<T>>) -> Var<T> {
        let requires_grad = node.requires_grad;
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
            value,
            requires_grad,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Array<T>) -> Var<T> {
        self.push(
            Node {
                parents: vec![],
                backward: None,
                requires_grad: false,
            },
            Rc::new(value),
        )
    }

    /// A differentiable input (parameter or probe). Tracks gradients only
    /// when the tape has gradients enabled.
    pub fn leaf(&self, value: Rc<Array<T>>) -> Var<T> {
        let requires_grad = self.grad_enabled();
        self.push(
            Node {
                parents: vec![],
                backward: None,
                requires_grad,
            },
            value,
        )
    }

    /// Records a custom operation.
    ///
    /// `backward` receives the output gradient and must return one entry per
    /// parent, in order. It is dropped unused when no parent requires a gradient.
    pub fn op<F>(&self, value: Array<T>, parents: &[&Var<T>], backward: F) -> Var<T>
    where
        F: Fn(&Array<T>, &[bool]) -> Vec<Option<Array<T>>> + 'static,
    {
        for p in parents {
            assert!(p.tape.same(self), "operands recorded on different tapes");
        }
        let requires_grad = self.grad_enabled() && parents.iter().any(|p| p.requires_grad);
        let node = if requires_grad {
            Node {
                parents: parents.iter().map(|p| p.id).collect(),
                backward: Some(Box::new(backward)),
                requires_grad,
            }
        } else {
            Node {
                parents: vec![],
                backward: None,
                requires_grad: false,
            }
        };
        self.push(node, Rc::new(value))
    }

    fn backward_from(&self, root: usize, seed: Array<T>) -> Gradients<T> {
        let inner = self.inner.borrow();
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Array<T>>> = (0..n).map(|_| None).collect();
        grads[root] = Some(seed);
        for id in (0..=root).rev() {
            let node = &inner.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let need: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| inner.nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &need);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), needed) in node.parents.iter().zip(parent_grads).zip(need) {
                let Some(pg) = pg else { continue };
                if !needed {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => {
                        assert_eq!(acc.shape(), pg.shape(), "gradient shape mismatch");
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// A value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var<T: Float> {
    tape: Tape<T>,
    id: usize,
    value: Rc<Array<T>>,
    requires_grad: bool,
}

impl<T: Float> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl<T: Float> Var<T> {
    pub fn value(&self) -> &Array<T> {
        &self.value
    }

    pub fn value_rc(&self) -> Rc<Array<T>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// The single element of a one-element value.
    pub fn item(&self) -> T {
        assert_eq!(self.value.len(), 1, "item() on a non-scalar of shape {:?}", self.shape());
        self.value.data()[0]
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&self) -> Var<T> {
        self.tape.push(
            Node {
                parents: vec![],
                backward: None,
                requires_grad: false,
            },
            Rc::clone(&self.value),
        )
    }

    /// Reverse-mode sweep seeded with ones (the gradient of `sum(self)`).
    pub fn backward(&self) -> Gradients<T> {
        self.tape
            .backward_from(self.id, Array::ones(self.shape().to_vec()))
    }

    /// Reverse-mode sweep seeded with an explicit output gradient.
    pub fn backward_with(&self, seed: Array<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(), "seed shape mismatch");
        self.tape.backward_from(self.id, seed)
    }
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a leaf. `None` when the value did not influence the root
    /// or was not differentiable.
    pub fn get(&self, v: &Var<T>) -> Option<&Array<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: &Var<T>) -> Option<Array<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }

    /// Gradient of a leaf, or zeros of its shape.
    pub fn get_or_zeros(&self, v: &Var<T>) -> Array<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(v.shape().to_vec()))
    }
}
