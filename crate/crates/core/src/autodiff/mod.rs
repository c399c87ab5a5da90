//! Dense reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable row-major array plus, when any input
//! requires a gradient, the closure that maps the output gradient to its
//! parents' gradients. Graphs are built eagerly during the forward pass and
//! dropped with the last tensor handle. Node ids grow monotonically, so a
//! descending id sort is a valid reverse topological order.
//!
//! Graphs are confined to the thread that builds them (`Rc`); leaf values
//! are shared through `Arc` so parameter buffers can seed graphs on several
//! workers without copying.

mod custom;
pub mod gradcheck;
pub mod ops;

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use custom::{polar_rotation, rigid_from_params, take_suppressed_polar_grads, POLAR_GRAD_GAP};
pub use ops::{affine, concat, matmul, DEFAULT_LEAKY_SLOPE};

type BackwardFn = dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>;

struct Backward {
    parents: Vec<Tensor>,
    func: Box<BackwardFn>,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    backward: Option<Backward>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static ROUND_F32: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` with every op output rounded to single precision on this
/// thread. Used for reduced-precision runs; arithmetic itself stays f64.
pub fn with_f32_rounding<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    let prev = ROUND_F32.with(|c| c.replace(enabled));
    let out = f();
    ROUND_F32.with(|c| c.set(prev));
    out
}

fn finish(mut v: Vec<f64>) -> Vec<f64> {
    if ROUND_F32.with(|c| c.get()) {
        for x in v.iter_mut() {
            *x = *x as f32 as f64;
        }
    }
    v
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn leaf(value: Arc<Vec<f64>>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("extents must be positive, got {shape:?}")));
        }
        if value.len() != numel(&shape) {
            return Err(Error::shape(format!("{} values for shape {shape:?}", value.len())));
        }
        Ok(Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            value,
            requires_grad,
            grad: RefCell::new(None),
            backward: None,
        })))
    }

    /// Constant input (no gradient).
    pub fn new(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(Arc::new(finish(values)), shape.to_vec(), false)
    }

    /// Trainable leaf.
    pub fn variable(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(Arc::new(finish(values)), shape.to_vec(), true)
    }

    /// Leaf sharing an existing buffer.
    pub fn from_shared(values: Arc<Vec<f64>>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        Self::leaf(values, shape.to_vec(), requires_grad)
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![v], &[1]).expect("scalar")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(vec![0.0; numel(shape)], shape).expect("zeros")
    }

    /// Internal constructor for op outputs.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        value: Vec<f64>,
        parents: Vec<Tensor>,
        func: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        debug_assert_eq!(value.len(), numel(&shape));
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let backward = requires_grad.then(|| Backward { parents, func: Box::new(func) });
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            value: Arc::new(finish(value)),
            requires_grad,
            grad: RefCell::new(None),
            backward,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.value.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0.value
    }

    pub fn shared_values(&self) -> Arc<Vec<f64>> {
        self.0.value.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.value[0]
    }

    /// Accumulated gradient; zeros when nothing reached this leaf.
    pub fn grad(&self) -> Vec<f64> {
        self.0.grad.borrow().clone().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::from_shared(self.0.value.clone(), &self.0.shape, false).expect("detach")
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Propagates gradients from this scalar to every trainable leaf that
    /// it depends on. Leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!("backward needs a scalar, got shape {:?}", self.shape())));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.0.id) {
                continue;
            }
            if let Some(bw) = &t.0.backward {
                for p in &bw.parents {
                    if p.requires_grad() && !seen.contains(&p.0.id) {
                        stack.push(p.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_by_key(|e| std::cmp::Reverse(e.0.id));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.0.id, vec![1.0]);
        for t in order {
            let Some(g) = pending.remove(&t.0.id) else { continue };
            match &t.0.backward {
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(bw) => {
                    let needs: Vec<bool> = bw.parents.iter().map(Tensor::requires_grad).collect();
                    let grads = (bw.func)(&g, &needs);
                    for ((p, pg), need) in bw.parents.iter().zip(grads).zip(needs) {
                        let (Some(pg), true) = (pg, need) else { continue };
                        debug_assert_eq!(pg.len(), p.numel());
                        match pending.get_mut(&p.0.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(p.0.id, pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
