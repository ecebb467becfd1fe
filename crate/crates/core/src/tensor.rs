//! Dense N-d tensors with reverse-mode automatic differentiation.
//!
//! The graph is dynamic: every differentiable operation allocates a node that
//! keeps handles to its inputs plus whatever context its backward rule needs.
//! `backward` walks the graph once in reverse topological order and
//! accumulates gradients into every reachable tensor that tracks them.
//! Gradients keep accumulating across calls until `zero_grad` is invoked,
//! matching the usual training-loop semantics.
//!
//! Precision is a type parameter: training code instantiates `f32`, gradient
//! checks and metric oracles instantiate `f64`. Graphs are confined to the
//! thread that built them (`Rc` interior), which is what the training loop
//! assumes anyway.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt::{Debug, Display};
use std::rc::Rc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use crate::ops::kernels;

/// Scalar type usable as tensor element: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    /// Width of the little-endian encoding used in checkpoints.
    const BYTE_WIDTH: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const BYTE_WIDTH: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const BYTE_WIDTH: usize = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Lossy-but-total conversion from `f64` into the working precision.
#[inline]
pub fn real<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("f64 converts into Real")
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` without recording any graph nodes; used by evaluation paths.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

/// Differentiable operations; each variant keeps its parents and whatever
/// the backward rule needs. NN-level rules live in `ops::kernels`.
pub(crate) enum Op<F: Real> {
    Add(Tensor<F>, Tensor<F>),
    Mul(Tensor<F>, Tensor<F>),
    Div(Tensor<F>, Tensor<F>),
    Neg(Tensor<F>),
    Scale(Tensor<F>, F),
    Offset(Tensor<F>),
    Sum(Tensor<F>),
    Relu(Tensor<F>),
    Sigmoid(Tensor<F>),
    Conv2d {
        x: Tensor<F>,
        weight: Tensor<F>,
        bias: Tensor<F>,
        stride: usize,
        pad: usize,
    },
    BatchNormTrain {
        x: Tensor<F>,
        gamma: Tensor<F>,
        beta: Tensor<F>,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    BatchNormEval {
        x: Tensor<F>,
        gamma: Tensor<F>,
        beta: Tensor<F>,
        running_mean: Vec<F>,
        inv_std: Vec<F>,
    },
    Dropout {
        x: Tensor<F>,
        mask: Vec<F>,
    },
    Decimate {
        x: Tensor<F>,
        factor: usize,
    },
    Repeat {
        x: Tensor<F>,
        factor: usize,
    },
    BceWithLogits {
        logits: Tensor<F>,
        targets: Vec<F>,
    },
}

impl<F: Real> Op<F> {
    fn parents(&self) -> Vec<Tensor<F>> {
        match self {
            Op::Add(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a.clone(), b.clone()],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Sum(a)
            | Op::Relu(a)
            | Op::Sigmoid(a) => vec![a.clone()],
            Op::Conv2d { x, weight, bias, .. } => vec![x.clone(), weight.clone(), bias.clone()],
            Op::BatchNormTrain { x, gamma, beta, .. }
            | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![x.clone(), gamma.clone(), beta.clone()]
            }
            Op::Dropout { x, .. } | Op::Decimate { x, .. } | Op::Repeat { x, .. } => {
                vec![x.clone()]
            }
            Op::BceWithLogits { logits, .. } => vec![logits.clone()],
        }
    }
}

struct TensorData<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Option<Op<F>>,
    id: u64,
}

/// Shared handle to a tensor; clones are cheap and alias the same storage.
pub struct Tensor<F: Real> {
    inner: Rc<RefCell<TensorData<F>>>,
}

impl<F: Real> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<F: Real> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("id", &inner.id)
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl<F: Real> Tensor<F> {
    fn from_parts(data: Vec<F>, shape: Vec<usize>, op: Option<Op<F>>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                data,
                grad: None,
                requires_grad: false,
                op,
                id: next_id(),
            })),
        }
    }

    /// Leaf tensor from raw data; shape product must match the data length.
    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(Error::Dimension {
                op: "from_vec",
                msg: format!("empty shape {shape:?}"),
            });
        }
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "from_vec",
                msg: format!("shape {shape:?} wants {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self::from_parts(data, shape.to_vec(), None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel: usize = shape.iter().product();
        assert!(numel > 0, "tensor shapes must be non-empty");
        Self::from_parts(vec![value; numel], shape.to_vec(), None)
    }

    pub fn scalar(value: F) -> Self {
        Self::from_parts(vec![value], vec![1], None)
    }

    pub(crate) fn from_op(data: Vec<F>, shape: Vec<usize>, op: Op<F>, track: bool) -> Self {
        if track && grad_enabled() {
            Self::from_parts(data, shape, Some(op))
        } else {
            Self::from_parts(data, shape, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Borrowed view of the raw data (row-major).
    pub fn data(&self) -> Ref<'_, [F]> {
        Ref::map(self.inner.borrow(), |d| d.data.as_slice())
    }

    pub fn data_vec(&self) -> Vec<F> {
        self.inner.borrow().data.clone()
    }

    /// Mutates the raw data in place (optimizer updates, checkpoint load).
    pub fn apply_data<R>(&self, f: impl FnOnce(&mut [F]) -> R) -> R {
        f(&mut self.inner.borrow_mut().data)
    }

    pub fn grad_vec(&self) -> Option<Vec<F>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, value: bool) {
        self.inner.borrow_mut().requires_grad = value;
    }

    /// Whether gradients must flow through this tensor.
    pub(crate) fn tracks(&self) -> bool {
        let inner = self.inner.borrow();
        inner.requires_grad || inner.op.is_some()
    }

    /// Copy of the values as a fresh leaf, cut from the graph.
    pub fn detach(&self) -> Tensor<F> {
        let inner = self.inner.borrow();
        Tensor::from_parts(inner.data.clone(), inner.shape.clone(), None)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<F> {
        let inner = self.inner.borrow();
        if inner.data.len() != 1 {
            return Err(Error::Contract {
                op: "item",
                msg: format!("expected scalar, got shape {:?}", inner.shape),
            });
        }
        Ok(inner.data[0])
    }

    fn same_shape(&self, other: &Tensor<F>, op: &'static str) -> Result<Vec<usize>> {
        let a = self.shape();
        let b = other.shape();
        if a != b {
            return Err(Error::ShapeMismatch {
                op,
                left: a,
                right: b,
            });
        }
        Ok(a)
    }

    /// Elementwise sum; both inputs receive the upstream gradient unchanged.
    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let shape = self.same_shape(other, "add")?;
        let a = self.data();
        let b = other.data();
        let data = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
        drop(a);
        drop(b);
        let track = self.tracks() || other.tracks();
        Ok(Tensor::from_op(
            data,
            shape,
            Op::Add(self.clone(), other.clone()),
            track,
        ))
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let shape = self.same_shape(other, "mul")?;
        let a = self.data();
        let b = other.data();
        let data = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
        drop(a);
        drop(b);
        let track = self.tracks() || other.tracks();
        Ok(Tensor::from_op(
            data,
            shape,
            Op::Mul(self.clone(), other.clone()),
            track,
        ))
    }

    pub fn div(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let shape = self.same_shape(other, "div")?;
        let a = self.data();
        let b = other.data();
        let data = a.iter().zip(b.iter()).map(|(&x, &y)| x / y).collect();
        drop(a);
        drop(b);
        let track = self.tracks() || other.tracks();
        Ok(Tensor::from_op(
            data,
            shape,
            Op::Div(self.clone(), other.clone()),
            track,
        ))
    }

    pub fn neg(&self) -> Tensor<F> {
        let shape = self.shape();
        let data = self.data().iter().map(|&x| -x).collect();
        Tensor::from_op(data, shape, Op::Neg(self.clone()), self.tracks())
    }

    pub fn scale(&self, c: F) -> Tensor<F> {
        let shape = self.shape();
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(data, shape, Op::Scale(self.clone(), c), self.tracks())
    }

    pub fn offset(&self, c: F) -> Tensor<F> {
        let shape = self.shape();
        let data = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(data, shape, Op::Offset(self.clone()), self.tracks())
    }

    /// Full reduction to a `[1]` tensor; accumulates in f64.
    pub fn sum(&self) -> Tensor<F> {
        let total: f64 = self.data().iter().map(|v| v.to_f64().unwrap()).sum();
        Tensor::from_op(
            vec![real(total)],
            vec![1],
            Op::Sum(self.clone()),
            self.tracks(),
        )
    }

    /// Reverse-mode sweep from a scalar loss. Visits each reachable node
    /// exactly once; gradients accumulate until zeroed.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.inner.borrow();
            if inner.data.len() != 1 {
                return Err(Error::Contract {
                    op: "backward",
                    msg: format!("loss must be scalar, got shape {:?}", inner.shape),
                });
            }
            if inner.op.is_none() {
                return Err(Error::Contract {
                    op: "backward",
                    msg: "loss is detached from the graph (leaf tensor)".into(),
                });
            }
        }
        accumulate_grad(self, &[F::one()]);
        let order = topo_order(self);
        for node in order.iter().rev() {
            step_backward(node);
        }
        Ok(())
    }
}

/// Post-order over the graph (parents precede children), iterative to keep
/// stack depth independent of network depth.
fn topo_order<F: Real>(root: &Tensor<F>) -> Vec<Tensor<F>> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    visited.insert(root.id());
    let mut stack: Vec<(Tensor<F>, usize)> = vec![(root.clone(), 0)];
    while let Some((node, idx)) = stack.pop() {
        let parents = {
            let inner = node.inner.borrow();
            inner.op.as_ref().map(|op| op.parents()).unwrap_or_default()
        };
        if idx < parents.len() {
            stack.push((node.clone(), idx + 1));
            let p = &parents[idx];
            if p.tracks() && visited.insert(p.id()) {
                stack.push((p.clone(), 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

fn accumulate_grad<F: Real>(t: &Tensor<F>, delta: &[F]) {
    if !t.tracks() {
        return;
    }
    let mut inner = t.inner.borrow_mut();
    debug_assert_eq!(inner.data.len(), delta.len());
    match &mut inner.grad {
        Some(g) => {
            for (gi, &d) in g.iter_mut().zip(delta.iter()) {
                *gi = *gi + d;
            }
        }
        None => inner.grad = Some(delta.to_vec()),
    }
}

fn step_backward<F: Real>(node: &Tensor<F>) {
    // Snapshot the upstream gradient, then compute parent deltas without
    // holding any borrow across the accumulation calls.
    let grad = match node.inner.borrow().grad.as_ref() {
        Some(g) => g.clone(),
        None => return,
    };
    let inner = node.inner.borrow();
    let op = match inner.op.as_ref() {
        Some(op) => op,
        None => return,
    };
    match op {
        Op::Add(a, b) => {
            drop_and_acc2(&inner, a.clone(), grad.clone(), b.clone(), grad);
        }
        Op::Mul(a, b) => {
            let da: Vec<F> = grad
                .iter()
                .zip(b.data().iter())
                .map(|(&g, &y)| g * y)
                .collect();
            let db: Vec<F> = grad
                .iter()
                .zip(a.data().iter())
                .map(|(&g, &x)| g * x)
                .collect();
            drop_and_acc2(&inner, a.clone(), da, b.clone(), db);
        }
        Op::Div(a, b) => {
            let bd = b.data_vec();
            let ad = a.data_vec();
            let da: Vec<F> = grad.iter().zip(bd.iter()).map(|(&g, &y)| g / y).collect();
            let db: Vec<F> = grad
                .iter()
                .zip(ad.iter().zip(bd.iter()))
                .map(|(&g, (&x, &y))| -g * x / (y * y))
                .collect();
            drop_and_acc2(&inner, a.clone(), da, b.clone(), db);
        }
        Op::Neg(a) => {
            let da: Vec<F> = grad.iter().map(|&g| -g).collect();
            drop_and_acc(&inner, a.clone(), da);
        }
        Op::Scale(a, c) => {
            let c = *c;
            let da: Vec<F> = grad.iter().map(|&g| g * c).collect();
            drop_and_acc(&inner, a.clone(), da);
        }
        Op::Offset(a) => {
            drop_and_acc(&inner, a.clone(), grad);
        }
        Op::Sum(a) => {
            let g0 = grad[0];
            let da = vec![g0; a.numel()];
            drop_and_acc(&inner, a.clone(), da);
        }
        Op::Relu(a) => {
            let da: Vec<F> = grad
                .iter()
                .zip(a.data().iter())
                .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                .collect();
            drop_and_acc(&inner, a.clone(), da);
        }
        Op::Sigmoid(a) => {
            // sigma' = y (1 - y), read off this node's own output.
            let da: Vec<F> = grad
                .iter()
                .zip(inner.data.iter())
                .map(|(&g, &y)| g * y * (F::one() - y))
                .collect();
            drop_and_acc(&inner, a.clone(), da);
        }
        Op::Conv2d {
            x,
            weight,
            bias,
            stride,
            pad,
        } => {
            let (stride, pad) = (*stride, *pad);
            let xs = x.shape();
            let ws = weight.shape();
            let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (cout, k) = (ws[0], ws[2]);
            let (oh, ow) = (inner.shape[2], inner.shape[3]);
            let dx = x.tracks().then(|| {
                kernels::conv2d_bwd_x(
                    &grad,
                    &weight.data(),
                    n,
                    cin,
                    h,
                    w,
                    cout,
                    k,
                    oh,
                    ow,
                    stride,
                    pad,
                )
            });
            let dw = weight.tracks().then(|| {
                kernels::conv2d_bwd_w(&grad, &x.data(), n, cin, h, w, cout, k, oh, ow, stride, pad)
            });
            let db = bias
                .tracks()
                .then(|| kernels::conv2d_bwd_b(&grad, n, cout, oh, ow));
            let (x, weight, bias) = (x.clone(), weight.clone(), bias.clone());
            drop(inner);
            if let Some(dx) = dx {
                accumulate_grad(&x, &dx);
            }
            if let Some(dw) = dw {
                accumulate_grad(&weight, &dw);
            }
            if let Some(db) = db {
                accumulate_grad(&bias, &db);
            }
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let xs = x.shape();
            let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (dx, dgamma, dbeta) =
                kernels::bn_train_bwd(&grad, xhat, inv_std, &gamma.data(), n, c, h, w);
            let (x, gamma, beta) = (x.clone(), gamma.clone(), beta.clone());
            drop(inner);
            accumulate_grad(&x, &dx);
            accumulate_grad(&gamma, &dgamma);
            accumulate_grad(&beta, &dbeta);
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            running_mean,
            inv_std,
        } => {
            let xs = x.shape();
            let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (dx, dgamma, dbeta) = kernels::bn_eval_bwd(
                &grad,
                &x.data(),
                running_mean,
                inv_std,
                &gamma.data(),
                n,
                c,
                h,
                w,
            );
            let (x, gamma, beta) = (x.clone(), gamma.clone(), beta.clone());
            drop(inner);
            accumulate_grad(&x, &dx);
            accumulate_grad(&gamma, &dgamma);
            accumulate_grad(&beta, &dbeta);
        }
        Op::Dropout { x, mask } => {
            let da: Vec<F> = grad
                .iter()
                .zip(mask.iter())
                .map(|(&g, &m)| g * m)
                .collect();
            drop_and_acc(&inner, x.clone(), da);
        }
        Op::Decimate { x, factor } => {
            let xs = x.shape();
            let da = kernels::decimate_bwd(&grad, xs[0], xs[1], xs[2], xs[3], *factor);
            drop_and_acc(&inner, x.clone(), da);
        }
        Op::Repeat { x, factor } => {
            let xs = x.shape();
            let da = kernels::repeat_bwd(&grad, xs[0], xs[1], xs[2], xs[3], *factor);
            drop_and_acc(&inner, x.clone(), da);
        }
        Op::BceWithLogits { logits, targets } => {
            let g0 = grad[0];
            let inv_n = F::one() / real::<F>(targets.len() as f64);
            let da: Vec<F> = logits
                .data()
                .iter()
                .zip(targets.iter())
                .map(|(&z, &y)| {
                    let p = F::one() / (F::one() + (-z).exp());
                    g0 * (p - y) * inv_n
                })
                .collect();
            drop_and_acc(&inner, logits.clone(), da);
        }
    }
}

fn drop_and_acc<F: Real>(inner: &Ref<'_, TensorData<F>>, t: Tensor<F>, delta: Vec<F>) {
    let _ = inner;
    accumulate_grad(&t, &delta);
}

fn drop_and_acc2<F: Real>(
    inner: &Ref<'_, TensorData<F>>,
    a: Tensor<F>,
    da: Vec<F>,
    b: Tensor<F>,
    db: Vec<F>,
) {
    let _ = inner;
    accumulate_grad(&a, &da);
    accumulate_grad(&b, &db);
}

/// Named trainable tensor with its position along the network path.
pub struct Parameter<F: Real> {
    pub tensor: Tensor<F>,
    pub name: String,
    pub depth_index: usize,
}

impl<F: Real> Clone for Parameter<F> {
    fn clone(&self) -> Self {
        Parameter {
            tensor: self.tensor.clone(),
            name: self.name.clone(),
            depth_index: self.depth_index,
        }
    }
}

impl<F: Real> Parameter<F> {
    pub fn new(tensor: Tensor<F>, name: impl Into<String>, depth_index: usize) -> Self {
        tensor.set_requires_grad(true);
        Parameter {
            tensor,
            name: name.into(),
            depth_index,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central finite difference, per the contract
/// `max_i |analytic_i - (f(x+eps e_i) - f(x-eps e_i)) / 2 eps| / max(1, |analytic_i|)`.
///
/// `f` must be deterministic (stochastic layers re-seeded inside the
/// closure); this is probed by evaluating twice before differentiating.
pub fn finite_diff_check<F: Real>(
    f: &mut dyn FnMut(&Tensor<F>) -> Result<Tensor<F>>,
    x: &Tensor<F>,
    eps: F,
) -> Result<F> {
    let base = x.data_vec();
    let shape = x.shape();
    let probe_a = f(&x.detach())?.item()?;
    let probe_b = f(&x.detach())?.item()?;
    if probe_a != probe_b {
        return Err(Error::NonDeterministic(format!(
            "f(x) evaluated twice gave {probe_a} and {probe_b}"
        )));
    }

    let leaf = x.detach();
    leaf.set_requires_grad(true);
    let loss = f(&leaf)?;
    if loss.numel() != 1 {
        return Err(Error::Contract {
            op: "finite_diff_check",
            msg: format!("f must be scalar-valued, got shape {:?}", loss.shape()),
        });
    }
    loss.backward()?;
    let analytic = leaf.grad_vec().ok_or_else(|| Error::Contract {
        op: "finite_diff_check",
        msg: "f does not depend on x (no gradient reached the input)".into(),
    })?;

    let two_eps = eps + eps;
    let mut max_rel = F::zero();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] = plus[i] + eps;
        let mut minus = base.clone();
        minus[i] = minus[i] - eps;
        let fp = f(&Tensor::from_vec(plus, &shape)?)?.item()?;
        let fm = f(&Tensor::from_vec(minus, &shape)?)?.item()?;
        let numeric = (fp - fm) / two_eps;
        let denom = F::one().max(analytic[i].abs());
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn add_elementwise_values() {
        let a = Tensor::from_vec(vec![1.0f64, 2.0], &[2]).unwrap();
        let b = Tensor::from_vec(vec![3.0, 4.0], &[2]).unwrap();
        assert_eq!(a.add(&b).unwrap().data_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let a = Tensor::from_vec(vec![0.5f64, -1.25, 3.0], &[3]).unwrap();
        let z = Tensor::zeros(&[3]);
        assert_eq!(a.add(&z).unwrap().data_vec(), a.data_vec());
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn add_gradient_is_ones_by_finite_differences() {
        let b = Tensor::from_vec(vec![0.3f64, -0.7], &[2]).unwrap();
        let x = Tensor::from_vec(vec![1.5, 2.5], &[2]).unwrap();
        let rel = finite_diff_check(&mut |t: &Tensor<f64>| Ok(t.add(&b)?.sum()), &x, 1e-5).unwrap();
        assert!(rel < 1e-6, "rel err {rel}");
        // and the analytic gradient itself is exactly ones
        let leaf = x.detach();
        leaf.set_requires_grad(true);
        leaf.add(&b).unwrap().sum().backward().unwrap();
        assert_eq!(leaf.grad_vec().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn skip_sum_distributes_same_gradient_to_both_branches() {
        let a = Tensor::from_vec(vec![1.0f64, 2.0, 3.0], &[3]).unwrap();
        let b = Tensor::from_vec(vec![-1.0, 0.5, 2.0], &[3]).unwrap();
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        let out = a.add(&b).unwrap();
        let loss = out.mul(&out).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(a.grad_vec().unwrap(), b.grad_vec().unwrap());
    }

    #[test]
    fn relu_subgradient_and_sigmoid_at_zero() {
        let x = Tensor::from_vec(vec![-1.0f64, 2.0], &[2]).unwrap();
        x.set_requires_grad(true);
        ops::relu(&x).sum().backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![0.0, 1.0]);

        let z = Tensor::from_vec(vec![0.0f64], &[1]).unwrap();
        z.set_requires_grad(true);
        ops::sigmoid(&z).sum().backward().unwrap();
        assert_eq!(z.grad_vec().unwrap(), vec![0.25]);
    }

    #[test]
    fn backward_requires_scalar_and_graph() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0], &[2]).unwrap();
        x.set_requires_grad(true);
        let y = x.scale(2.0);
        assert!(matches!(
            y.backward(),
            Err(Error::Contract { op: "backward", .. })
        ));
        let leaf = Tensor::scalar(1.0f64);
        leaf.set_requires_grad(true);
        assert!(matches!(
            leaf.backward(),
            Err(Error::Contract { op: "backward", .. })
        ));
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let x = Tensor::from_vec(vec![2.0f64], &[1]).unwrap();
        x.set_requires_grad(true);
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![4.0]);
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![8.0]);
        x.zero_grad();
        assert!(x.grad_vec().is_none());
    }

    #[test]
    fn diamond_graph_visits_each_node_once() {
        // y = x*x used twice: d/dx (y + y) = 4x, not 8x.
        let x = Tensor::from_vec(vec![3.0f64], &[1]).unwrap();
        x.set_requires_grad(true);
        let y = x.mul(&x).unwrap();
        let loss = y.add(&y).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![12.0]);
    }

    #[test]
    fn finite_diff_on_quadratic_is_nearly_exact() {
        let x = Tensor::from_vec(vec![3.0f64], &[1]).unwrap();
        let rel =
            finite_diff_check(&mut |t: &Tensor<f64>| Ok(t.mul(t)?.sum()), &x, 1e-5).unwrap();
        assert!(rel < 1e-8, "rel err {rel}");
    }

    #[test]
    fn finite_diff_rejects_nondeterministic_f() {
        let mut calls = 0u32;
        let x = Tensor::from_vec(vec![1.0f64], &[1]).unwrap();
        let err = finite_diff_check(
            &mut |t: &Tensor<f64>| {
                calls += 1;
                Ok(t.scale(calls as f64).sum())
            },
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic(_)));
    }

    #[test]
    fn div_gradients_match_finite_differences() {
        let x = Tensor::from_vec(vec![0.8f64, -1.3, 2.1], &[3]).unwrap();
        let c = Tensor::from_vec(vec![1.7, 0.4, -2.2], &[3]).unwrap();
        let rel = finite_diff_check(
            &mut |t: &Tensor<f64>| Ok(t.div(&c)?.mul(t)?.sum()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-8, "rel err {rel}");
    }

    #[test]
    fn no_grad_suppresses_graph_recording() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0], &[2]).unwrap();
        x.set_requires_grad(true);
        let y = no_grad(|| x.scale(3.0));
        assert!(!y.tracks());
        assert!(grad_enabled());
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let run = || {
            let x = Tensor::from_vec(vec![0.1f32, -0.2, 0.3, 0.7], &[4]).unwrap();
            ops::sigmoid(&ops::relu(&x.scale(1.37))).sum().item().unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
