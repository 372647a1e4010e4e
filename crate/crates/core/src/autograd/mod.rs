//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation executed through it together with a
//! backward closure. Calling [`Tape::backward`] on a scalar result replays the
//! record in exact reverse order, summing gradient contributions into each
//! input. Values are shared through `Arc`, so parameters are never copied onto
//! the tape.
//!
//! ```
//! use accvit::autograd::Tape;
//! use accvit::tensor::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
//! let loss = tape.sum(&tape.mul(&x, &x).unwrap()).unwrap();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.get(&x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```
//!
//! A tape created with [`Tape::no_grad`] records nothing; intermediate values
//! are freed as soon as their [`Var`] handles drop.

mod ops;

pub use ops::count_macs;
pub(crate) use ops::add_macs;

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::{Scalar, Shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Backward closure of one recorded op: maps the output gradient to one
/// optional gradient per input. The `needs` mask tells which inputs are on the tape.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
    shape: Shape,
}

/// Handle to a value produced on a tape.
#[derive(Clone)]
pub struct Var<T> {
    value: Arc<Tensor<T>>,
    node: Option<usize>,
    tape: u64,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    pub fn dims(&self) -> &[usize] {
        self.value.dims()
    }

    /// Whether gradients flow into this value.
    pub fn tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|shared| (*shared).clone())
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node)
            .finish()
    }
}

/// Ordered record of executed operations.
pub struct Tape<T: Scalar> {
    id: u64,
    grad_mode: bool,
    nodes: RefCell<Vec<Node<T>>>,
    param_nodes: RefCell<HashMap<usize, usize>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Self::with_mode(true)
    }

    /// A tape that evaluates ops without recording them.
    pub fn no_grad() -> Self {
        Self::with_mode(false)
    }

    fn with_mode(grad_mode: bool) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            grad_mode,
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
        }
    }

    pub fn grad_mode(&self) -> bool {
        self.grad_mode
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names of the recorded ops in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }

    fn push_leaf(&self, shape: Shape) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op: "leaf", parents: Vec::new(), backward: None, shape });
        nodes.len() - 1
    }

    /// A gradient-tracked input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        self.leaf_shared(Arc::new(value))
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<T>>) -> Var<T> {
        let node = self.grad_mode.then(|| self.push_leaf(value.shape().clone()));
        Var { value, node, tape: self.id }
    }

    /// An untracked input; it never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var { value: Arc::new(value), node: None, tape: self.id }
    }

    /// Binds a parameter. Trainable parameters become leaves (one per
    /// parameter, however often it is bound); frozen ones are constants.
    pub fn param(&self, p: &Param<T>) -> Var<T> {
        let value = p.shared();
        if !(self.grad_mode && p.trainable) {
            return Var { value, node: None, tape: self.id };
        }
        let key = Arc::as_ptr(&value) as usize;
        let existing = self.param_nodes.borrow().get(&key).copied();
        let node = existing.unwrap_or_else(|| {
            let n = self.push_leaf(value.shape().clone());
            self.param_nodes.borrow_mut().insert(key, n);
            n
        });
        Var { value, node: Some(node), tape: self.id }
    }

    fn check_input(&self, v: &Var<T>) -> Result<Option<usize>> {
        match v.node {
            Some(_) if v.tape != self.id => {
                Err(Error::Usage("variable belongs to a different tape".into()))
            }
            n => Ok(n),
        }
    }

    /// Records an op. `value` is the forward result; `backward` maps the output
    /// gradient to per-input gradients. Non-finite results are rejected.
    pub fn record(
        &self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[&Var<T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var<T>> {
        let parents = inputs.iter().map(|v| self.check_input(v)).collect::<Result<Vec<_>>>()?;
        if !value.all_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        let node = if self.grad_mode && parents.iter().any(Option::is_some) {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                op,
                parents,
                backward: Some(Box::new(backward)),
                shape: value.shape().clone(),
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Ok(Var { value: Arc::new(value), node, tape: self.id })
    }

    /// Propagates from a scalar `loss` back to every leaf.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        let root = match (loss.node, loss.tape == self.id) {
            (Some(n), true) => n,
            _ => return Err(Error::Usage("backward on a value that is not on this tape".into())),
        };
        if loss.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {}",
                loss.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::full(loss.dims(), T::ONE)?);
        let mut leaves = HashMap::new();
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let Some(backward) = &node.backward else {
                leaves.insert(i, g);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(p), Some(pg)) = (parent, pg) else { continue };
                if pg.shape() != &nodes[*p].shape {
                    return Err(Error::Dimension(format!(
                        "op {} produced gradient {} for input of shape {}",
                        node.op,
                        pg.shape(),
                        nodes[*p].shape
                    )));
                }
                match &mut grads[*p] {
                    Some(acc) => crate::tensor::kernels::add_into(acc.data_mut(), pg.data()),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            leaves,
            params: self.param_nodes.borrow().clone(),
        })
    }
}

/// Gradients of a loss with respect to every leaf reached by backward.
pub struct Gradients<T> {
    tape: u64,
    leaves: HashMap<usize, Tensor<T>>,
    params: HashMap<usize, usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` if the leaf is untracked or unreachable.
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        v.node.and_then(|n| self.leaves.get(&n))
    }

    /// Gradient of a leaf, zeros when it received none.
    pub fn get_or_zero(&self, v: &Var<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| v.value.zeros_like())
    }

    /// Gradient of a bound parameter, matched by identity of its storage.
    pub fn param(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        let key = Arc::as_ptr(&p.shared()) as usize;
        self.params.get(&key).and_then(|n| self.leaves.get(n))
    }
}
