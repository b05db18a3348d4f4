//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Every operation validates shapes, computes its forward value eagerly, and
//! rejects non-finite outputs. When any input (transitively) requires
//! gradients, the op records its inputs and a vector-Jacobian product closure
//! on the output node; [`Tensor::backward`] then walks the graph in reverse
//! topological order and accumulates gradients into `requires_grad` leaves.
//!
//! Gradients accumulate across repeated `backward` calls (used by gradient
//! accumulation); call [`zero_grad`] to reset. Leaf data is immutable except
//! through the optimizer, which must not run between a forward pass and its
//! `backward` (the graph reads leaf data lazily).

mod adamw;
mod ops;
pub mod rng;

pub use adamw::AdamW;
pub use rng::Rng;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Vector-Jacobian product: upstream gradient plus a per-parent "needed" mask,
/// returning one optional gradient contribution per parent (same order).
type VjpFn = Box<dyn Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>>>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f32>>>,
    parents: Vec<Tensor>,
    vjp: Option<VjpFn>,
}

/// Dense row-major f32 tensor. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                vjp: None,
            }),
        }
    }

    /// Output node of an op. `requires_grad` is inherited from the parents;
    /// the vjp is recorded only when some parent needs it.
    fn from_op(shape: Vec<usize>, data: Vec<f32>, parents: Vec<Tensor>, vjp: VjpFn) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.inner.requires_grad);
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents: if requires_grad { parents } else { Vec::new() },
                vjp: if requires_grad { Some(vjp) } else { None },
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::InvalidArg {
                op: "from_vec",
                msg: format!("shape {:?} implies {} elements, got {}", shape, numel(shape), data.len()),
            });
        }
        check_finite("from_vec", &data)?;
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(Tensor::leaf(t.inner.shape.clone(), t.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(shape.to_vec(), vec![0.0; numel(shape)], false)
    }

    pub fn full(shape: &[usize], v: f32) -> Tensor {
        Tensor::leaf(shape.to_vec(), vec![v; numel(shape)], false)
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::leaf(vec![1], vec![v], false)
    }

    pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::leaf(shape.to_vec(), rng.normal_vec(numel(shape)), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn data_ref(&self) -> Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.len(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Detached copy: same values, no graph, not trainable.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.inner.shape.clone(), self.to_vec(), false)
    }

    /// Trainable deep copy of this tensor's values.
    pub fn detach_trainable(&self) -> Tensor {
        Tensor::leaf(self.inner.shape.clone(), self.to_vec(), true)
    }

    /// Overwrite leaf data in place (optimizer / EMA path). The caller must
    /// not hold a live graph that reads this leaf.
    pub(crate) fn set_data(&self, data: Vec<f32>) {
        debug_assert_eq!(data.len(), self.len());
        *self.inner.data.borrow_mut() = data;
    }

    /// Stable identity for graph bookkeeping and aliasing tests.
    pub fn id(&self) -> u64 {
        self.inner.id
    }

    /// Reverse-mode gradient of a scalar loss.
    ///
    /// Gradients are accumulated (`+=`) into every reachable `requires_grad`
    /// leaf; intermediate nodes use transient buffers, so calling `backward`
    /// twice on the same graph adds the same leaf gradients twice.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.inner.shape.clone(),
            });
        }
        if self.inner.vjp.is_none() {
            return Err(Error::DetachedGraph);
        }

        // Iterative post-order DFS: parents first, reversed afterwards.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id, ());
        while let Some((node, pi)) = stack.pop() {
            if pi < node.inner.parents.len() {
                let parent = node.inner.parents[pi].clone();
                stack.push((node, pi + 1));
                if parent.inner.requires_grad && !visited.contains_key(&parent.inner.id) {
                    visited.insert(parent.inner.id, ());
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }

        // Transient gradient buffers for interior nodes.
        let mut interior: HashMap<u64, Vec<f32>> = HashMap::new();
        interior.insert(self.inner.id, vec![1.0]);

        for node in order.iter().rev() {
            let Some(vjp) = node.inner.vjp.as_ref() else {
                continue; // leaf
            };
            let Some(up) = interior.remove(&node.inner.id) else {
                continue; // no gradient reached this node
            };
            let needed: Vec<bool> = node
                .inner
                .parents
                .iter()
                .map(|p| p.inner.requires_grad)
                .collect();
            let contribs = vjp(&up, &needed);
            debug_assert_eq!(contribs.len(), node.inner.parents.len());
            for (parent, contrib) in node.inner.parents.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                debug_assert_eq!(c.len(), parent.len());
                if parent.inner.vjp.is_none() {
                    // requires_grad leaf: accumulate persistently
                    let mut g = parent.inner.grad.borrow_mut();
                    match g.as_mut() {
                        Some(buf) => {
                            for (a, b) in buf.iter_mut().zip(&c) {
                                *a += b;
                            }
                        }
                        None => *g = Some(c),
                    }
                } else {
                    match interior.entry(parent.inner.id) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (a, b) in e.get_mut().iter_mut().zip(&c) {
                                *a += b;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(c);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Reset gradients on a set of parameters.
pub fn zero_grad<'a, I: IntoIterator<Item = &'a Tensor>>(params: I) {
    for p in params {
        p.zero_grad();
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
