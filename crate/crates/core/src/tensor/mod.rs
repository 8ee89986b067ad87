//! Dense row-major tensors with tape-free reverse-mode differentiation.
//!
//! Every operation that has at least one differentiable input records its
//! parents and a vector-Jacobian closure on the result. [`Tensor::backward`]
//! walks that graph in reverse topological order. Axis order is documented
//! per operation; image-like values are always `[H, W, C]` and per-category
//! values `[H, W, N, C]`.

mod attention;
mod conv;
mod elementwise;
mod linalg;
mod loss;
mod resize;
mod shape_ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::iter::Sum;
use std::sync::{Arc, Mutex};

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

pub use attention::linear_attention;
pub use conv::{conv2d, depthwise_conv2d, transposed_conv2d};
pub use elementwise::{add, add_bias, elu_plus_one, gelu, mean, mul, scale, sub, sum};
pub use linalg::{layer_norm, linear};
pub use loss::{softmax_cross_entropy, IGNORE_LABEL};
pub use resize::{bilinear_resize, bilinear_weights};
pub use shape_ops::{concat_last, index_select, repeat_categories, reshape};

/// Scalar type of a tensor. `f32` is the runtime precision, `f64` is used
/// for finite-difference gradient checks.
pub trait Real: Float + NumAssign + FromPrimitive + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static {
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn erf(self) -> Self {
        Self::of(libm::erf(self.as_f64()))
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Vector-Jacobian product: receives the gradient of the output and a mask
/// of which parents need a gradient, returns one entry per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Real> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Reference-counted n-dimensional array. Values are immutable once built;
/// only the gradient buffer changes.
pub struct Tensor<T: Real = f32>(Arc<Node<T>>);

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.0.shape).field("dtype", &T::NAME).field("requires_grad", &self.0.requires_grad).finish()
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any graph on this thread.
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

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    fn build(shape: Vec<usize>, data: Arc<Vec<T>>, requires_grad: bool) -> Self {
        Tensor(Arc::new(Node { shape, data, requires_grad, grad: Mutex::new(None), parents: Vec::new(), backward: None }))
    }

    /// Constant tensor. Fails when `data.len()` differs from the shape's
    /// element count.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape("Tensor::new", format!("{} values for shape {:?}", numel(shape), shape), format!("{} values", data.len())));
        }
        Ok(Self::build(shape.to_vec(), Arc::new(data), false))
    }

    /// Leaf tensor that accumulates a gradient.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::build(t.0.shape.clone(), Arc::clone(&t.0.data), true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), Arc::new(vec![T::zero(); numel(shape)]), false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(shape.to_vec(), Arc::new(vec![value; numel(shape)]), false)
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Result of an operation. The closure is kept only when some parent
    /// requires a gradient and recording is enabled.
    pub(crate) fn from_op<F>(shape: Vec<usize>, data: Vec<T>, parents: Vec<Tensor<T>>, backward: F) -> Self
    where
        F: Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    {
        debug_assert_eq!(numel(&shape), data.len());
        let tracked = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !tracked {
            return Self::build(shape, Arc::new(data), false);
        }
        Tensor(Arc::new(Node { shape, data: Arc::new(data), requires_grad: true, grad: Mutex::new(None), parents, backward: Some(Box::new(backward)) }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.0.data)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("gradient lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("gradient lock poisoned") = None;
    }

    /// Same values, no history: contributes nothing upstream in backward.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), Arc::clone(&self.0.data), false)
    }

    /// Copy into another precision. The result is a constant.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let data = self.0.data.iter().map(|v| U::of(v.as_f64())).collect();
        Tensor::build(self.0.shape.clone(), Arc::new(data), false)
    }

    pub fn same_node(&self, other: &Tensor<T>) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Node<T> {
        Arc::as_ptr(&self.0)
    }

    /// Reverse-mode sweep from a scalar. Gradients from several uses of one
    /// tensor are summed; leaf gradients accumulate across calls until
    /// [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS over nodes that carry gradient.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashSet<*const Node<T>> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.0.parents {
                if p.requires_grad() && !seen.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }

        let mut pending: HashMap<*const Node<T>, Vec<T>> = HashMap::new();
        pending.insert(self.key(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.key()) else {
                continue;
            };
            if let Some(f) = &t.0.backward {
                let needs: Vec<bool> = t.0.parents.iter().map(|p| p.requires_grad()).collect();
                let parent_grads = f(&g, &needs);
                debug_assert_eq!(parent_grads.len(), t.0.parents.len());
                for ((p, pg), need) in t.0.parents.iter().zip(parent_grads).zip(&needs) {
                    let (Some(pg), true) = (pg, *need) else {
                        continue;
                    };
                    debug_assert_eq!(pg.len(), p.numel());
                    match pending.get_mut(&p.key()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                        None => {
                            pending.insert(p.key(), pg);
                        }
                    }
                }
            }
            let mut slot = t.0.grad.lock().expect("gradient lock poisoned");
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

pub(crate) fn shape_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::<f64>::param(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
        sum(&x).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn square_gives_two_x() {
        let vals = vec![1.0, -2.0, 3.5, 0.25];
        let x = Tensor::<f64>::param(&[4], vals.clone()).unwrap();
        let loss = sum(&mul(&x, &x).unwrap());
        loss.backward().unwrap();
        let expected: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        assert_eq!(x.grad().unwrap(), expected);
    }

    #[test]
    fn detached_input_gets_no_grad() {
        let x = Tensor::<f64>::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = Tensor::<f64>::param(&[3], vec![-1.0, 0.5, 4.0]).unwrap();
        let loss = sum(&mul(&x.detach(), &y).unwrap());
        loss.backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(x.grad().is_none());
    }

    #[test]
    fn detach_is_idempotent() {
        let x = Tensor::<f64>::param(&[2], vec![3.0, 4.0]).unwrap();
        let d1 = x.detach();
        let d2 = d1.detach();
        assert!(!d2.requires_grad());
        assert_eq!(d1.data(), d2.data());
        assert_eq!(d2.data(), x.data());
    }

    #[test]
    fn reuse_accumulates_exactly() {
        let x = Tensor::<f64>::param(&[3], vec![0.3, -1.7, 2.2]).unwrap();
        // loss = sum(3x) + sum(x)  ->  grad = 4 exactly
        let a = scale(&x, 3.0);
        let loss = add(&sum(&a), &sum(&x)).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0; 3]);
    }

    #[test]
    fn non_scalar_backward_fails() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = scale(&x, 2.0);
        assert!(matches!(y.backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn intermediates_receive_grad() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = scale(&x, 2.0);
        let loss = sum(&y);
        loss.backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(loss.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| scale(&x, 2.0));
        assert!(!y.requires_grad());
        assert!(grad_enabled());
    }

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }
}
