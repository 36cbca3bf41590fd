//! Reverse-mode automatic differentiation over dynamic-rank `f64` arrays.
//!
//! A [`Tape`] records one forward computation as a topologically ordered list
//! of nodes. Calling [`Tape::backward`] walks the list in reverse, applying
//! each node's backward closure and accumulating gradients into every
//! [`Param`] that was leased onto the tape. Tapes are cheap and short-lived:
//! one per training step (or per rollout frame), while parameters persist
//! across tapes.
//!
//! Everything is double precision so that central finite differences agree
//! with analytic gradients to tight tolerances (see [`gradcheck`]).

use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

mod conv;
pub mod ops;
mod resample;

pub mod gradcheck;

pub use ops::co_broadcast_shape;

/// Gradient contributions produced by a node's backward closure, one per
/// parent, aligned with the node's parent list.
type BackFn = Box<dyn FnOnce(&ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    backward: Option<BackFn>,
}

/// A learnable (or persistent non-learnable) array shared between model
/// structs, tapes, the optimizer, and checkpoints.
#[derive(Clone)]
pub struct Param {
    inner: Rc<RefCell<ParamInner>>,
}

pub struct ParamInner {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            inner: Rc::new(RefCell::new(ParamInner {
                value,
                grad,
                trainable: true,
            })),
        }
    }

    /// A persistent buffer that backward passes and the optimizer skip
    /// (e.g. spectral-norm power-iteration state).
    pub fn new_buffer(value: ArrayD<f64>) -> Self {
        let p = Param::new(value);
        p.inner.borrow_mut().trainable = false;
        p
    }

    /// Exclude this param from gradient accumulation and optimizer updates.
    pub fn freeze(&self) {
        self.inner.borrow_mut().trainable = false;
    }

    pub fn value(&self) -> ArrayD<f64> {
        self.inner.borrow().value.clone()
    }

    pub fn set_value(&self, v: ArrayD<f64>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.value.shape(), v.shape(), "param shape changed");
        inner.grad = ArrayD::zeros(v.raw_dim());
        inner.value = v;
    }

    pub fn grad(&self) -> ArrayD<f64> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.grad.fill(0.0);
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().value.shape().to_vec()
    }

    pub fn is_trainable(&self) -> bool {
        self.inner.borrow().trainable
    }

    /// In-place update, used by optimizers.
    pub fn update<F: FnOnce(&mut ArrayD<f64>, &ArrayD<f64>)>(&self, f: F) {
        let mut inner = self.inner.borrow_mut();
        let ParamInner { value, grad, .. } = &mut *inner;
        f(value, grad);
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }
}

/// Anything that owns [`Param`]s. `visit_params` walks them in a fixed,
/// deterministic order with dotted path names.
pub trait Module {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));

    fn parameters(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, p| out.push((name.to_string(), p.clone())));
        out
    }

    fn trainable_parameters(&self) -> Vec<Param> {
        self.parameters()
            .into_iter()
            .filter(|(_, p)| p.is_trainable())
            .map(|(_, p)| p)
            .collect()
    }
}

/// Joins a prefix and a field name into a dotted parameter path.
pub fn join_path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// One recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_ids: RefCell<HashMap<usize, usize>>,
    leases: RefCell<Vec<(Param, usize)>>,
    train: bool,
}

impl Tape {
    /// Evaluation tape: layers with internal running state (spectral-norm
    /// power iteration) leave that state untouched, so repeated forwards
    /// are bit-identical.
    pub fn new() -> Self {
        Tape::default()
    }

    /// Training tape: stateful layers may update their buffers.
    pub fn training() -> Self {
        Tape {
            train: true,
            ..Tape::default()
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, parents: Vec<usize>, backward: Option<BackFn>) -> usize {
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite tensor");
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward,
        });
        id
    }

    fn make<'t>(
        &'t self,
        value: ArrayD<f64>,
        parents: Vec<usize>,
        backward: Option<BackFn>,
    ) -> Tensor<'t> {
        let shape = value.shape().to_vec();
        let id = self.push(value, parents, backward);
        Tensor {
            tape: self,
            id,
            shape,
        }
    }

    /// Record a constant: no gradient flows into it.
    pub fn constant<'t>(&'t self, value: ArrayD<f64>) -> Tensor<'t> {
        self.make(value, vec![], None)
    }

    pub fn scalar<'t>(&'t self, value: f64) -> Tensor<'t> {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), value))
    }

    /// Lease a parameter onto this tape. Repeated leases of the same param
    /// return the same node, so gradients accumulate correctly for shared
    /// parameters.
    pub fn param<'t>(&'t self, p: &Param) -> Tensor<'t> {
        let key = p.key();
        if let Some(&id) = self.param_ids.borrow().get(&key) {
            let shape = self.nodes.borrow()[id].value.shape().to_vec();
            return Tensor {
                tape: self,
                id,
                shape,
            };
        }
        let t = self.make(p.value(), vec![], None);
        self.param_ids.borrow_mut().insert(key, t.id);
        self.leases.borrow_mut().push((p.clone(), t.id));
        t
    }

    fn value_of(&self, id: usize) -> ArrayD<f64> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse pass from a scalar loss. Accumulates `d loss / d p` into the
    /// grad buffer of every trainable leased param.
    pub fn backward(&self, loss: &Tensor) {
        assert_eq!(loss.value_len(), 1, "backward needs a scalar loss");
        let n = loss.id + 1;
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..n).map(|_| None).collect();
        let seed_shape = self.nodes.borrow()[loss.id].value.raw_dim();
        grads[loss.id] = Some(ArrayD::ones(seed_shape));

        for id in (0..n).rev() {
            if grads[id].is_none() {
                continue;
            }
            let (parents, back) = {
                let mut nodes = self.nodes.borrow_mut();
                let node = &mut nodes[id];
                (node.parents.clone(), node.backward.take())
            };
            let Some(back) = back else { continue };
            let gout = grads[id].as_ref().unwrap().clone();
            let parent_grads = back(&gout);
            debug_assert_eq!(parent_grads.len(), parents.len());
            for (pid, g) in parents.into_iter().zip(parent_grads) {
                match &mut grads[pid] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            }
        }

        for (param, id) in self.leases.borrow().iter() {
            if !param.is_trainable() {
                continue;
            }
            if let Some(g) = &grads[*id] {
                let mut inner = param.inner.borrow_mut();
                inner.grad += g;
            }
        }
    }
}

/// A handle to one node on a tape.
#[derive(Clone)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: usize,
    shape: Vec<usize>,
}

impl<'t> Tensor<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn value_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn value(&self) -> ArrayD<f64> {
        self.tape.value_of(self.id)
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar tensor");
        v.iter().copied().next().unwrap()
    }

    /// Cut the graph: same value, no gradient flow.
    pub fn detach(&self) -> Tensor<'t> {
        self.tape.constant(self.value())
    }

    pub(crate) fn make_unary(
        &self,
        value: ArrayD<f64>,
        backward: impl FnOnce(&ArrayD<f64>) -> ArrayD<f64> + 'static,
    ) -> Tensor<'t> {
        self.tape.make(
            value,
            vec![self.id],
            Some(Box::new(move |g| vec![backward(g)])),
        )
    }

    pub(crate) fn make_binary(
        &self,
        other: &Tensor<'t>,
        value: ArrayD<f64>,
        backward: impl FnOnce(&ArrayD<f64>) -> (ArrayD<f64>, ArrayD<f64>) + 'static,
    ) -> Tensor<'t> {
        self.tape.make(
            value,
            vec![self.id, other.id],
            Some(Box::new(move |g| {
                let (ga, gb) = backward(g);
                vec![ga, gb]
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn param_lease_is_deduplicated() {
        let p = Param::new(array![1.0, 2.0].into_dyn());
        let tape = Tape::new();
        let a = tape.param(&p);
        let b = tape.param(&p);
        assert_eq!(a.id, b.id);
        // y = sum(p * p) computed through two leases; dy/dp = 2p
        let y = a.mul(&b).sum_all();
        tape.backward(&y);
        let g = p.grad();
        assert_eq!(g, array![2.0, 4.0].into_dyn());
    }

    #[test]
    fn backward_accumulates_over_fanout() {
        let p = Param::new(array![3.0].into_dyn());
        let tape = Tape::new();
        let x = tape.param(&p);
        // y = x^2 + x  =>  dy/dx = 2x + 1 = 7
        let y = x.square().add(&x).sum_all();
        tape.backward(&y);
        assert_eq!(p.grad()[[0]], 7.0);
    }

    #[test]
    fn non_trainable_buffer_gets_no_grad() {
        let p = Param::new_buffer(array![5.0].into_dyn());
        let tape = Tape::new();
        let x = tape.param(&p);
        let y = x.square().sum_all();
        tape.backward(&y);
        assert_eq!(p.grad()[[0]], 0.0);
    }
}
