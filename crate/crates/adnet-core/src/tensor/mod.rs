//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! The graph is a tape built during the forward pass: every op allocates a new
//! node holding its output data plus a backward closure that scatters the
//! incoming gradient to the op's parents. `backward()` on a scalar loss walks
//! the tape once in reverse topological order and then drops the closures, so
//! the graph is freed as soon as the output tensors go out of scope. Leaves
//! created with [`Tensor::param`] keep their accumulated gradient until
//! [`Tensor::zero_grad`].
//!
//! Two element types are supported: `f32` for training and inference, `f64`
//! for finite-difference gradient verification.

mod conv;
mod linalg;
pub mod optim;

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Element type of a [`Tensor`].
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn is_finite(self) -> bool;
    fn is_nan(self) -> bool;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn is_nan(self) -> bool {
                <$t>::is_nan(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn min(self, other: Self) -> Self {
                <$t>::min(self, other)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

type BackFn<T> = Box<dyn Fn(&[T])>;

pub(crate) struct Node<T: Scalar> {
    data: Vec<T>,
    shape: Vec<usize>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackFn<T>>,
}

/// Shared handle to a node of the autodiff tape.
///
/// Cloning is cheap (reference-counted). A single graph is single-threaded;
/// independent graphs may live on different threads.
pub struct Tensor<T: Scalar = f32>(Rc<RefCell<Node<T>>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.0.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, numel={})",
            n.shape,
            n.requires_grad,
            n.data.len()
        )
    }
}

fn check_shape<T: Scalar>(data: &[T], shape: &[usize]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(Error::dimension(
            "tensor construction",
            shape,
            format!("shape product {} to equal data length {}", numel, data.len()),
        ));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn new_node(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Tensor<T> {
        Tensor(Rc::new(RefCell::new(Node {
            data,
            shape,
            grad: None,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        })))
    }

    /// Leaf tensor that does not take part in gradient computation.
    pub fn constant(data: Vec<T>, shape: &[usize]) -> Result<Tensor<T>> {
        check_shape(&data, shape)?;
        Ok(Self::new_node(data, shape.to_vec(), false))
    }

    /// Trainable leaf; gradients accumulate here across `backward()` calls.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Tensor<T>> {
        check_shape(&data, shape)?;
        Ok(Self::new_node(data, shape.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor<T> {
        let numel = shape.iter().product();
        Self::new_node(vec![T::ZERO; numel], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: T) -> Tensor<T> {
        let numel = shape.iter().product();
        Self::new_node(vec![value; numel], shape.to_vec(), false)
    }

    pub fn scalar(value: T) -> Tensor<T> {
        Self::new_node(vec![value], vec![1], false)
    }

    /// Interior node produced by an op.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: Option<BackFn<T>>,
    ) -> Tensor<T> {
        let requires_grad = backward.is_some();
        let t = Self::new_node(data, shape, requires_grad);
        {
            let mut n = t.0.borrow_mut();
            n.parents = parents;
            n.backward = backward;
        }
        t
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// Borrow the underlying data. Panics if a backward pass is mid-write.
    pub fn data(&self) -> Ref<'_, Vec<T>> {
        Ref::map(self.0.borrow(), |n| &n.data)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.borrow().data.clone()
    }

    pub fn item(&self) -> Result<T> {
        let n = self.0.borrow();
        if n.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor with {} elements",
                n.data.len()
            )));
        }
        Ok(n.data[0])
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Overwrite leaf data in place (used by the optimizer and checkpoint load).
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        let mut n = self.0.borrow_mut();
        if data.len() != n.data.len() {
            return Err(Error::dimension(
                "set_data",
                &[data.len()],
                format!("{} elements", n.data.len()),
            ));
        }
        n.data = data;
        Ok(())
    }

    /// Apply `f` to the raw data in place.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.0.borrow_mut().data);
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        let mut n = self.0.borrow_mut();
        if !n.requires_grad {
            return;
        }
        let len = n.data.len();
        debug_assert_eq!(delta.len(), len);
        let g = n.grad.get_or_insert_with(|| vec![T::ZERO; len]);
        for (gi, di) in g.iter_mut().zip(delta.iter()) {
            *gi += *di;
        }
    }

    /// Reverse-mode sweep from a scalar loss. Fills `grad` on every
    /// `requires_grad` leaf reachable from `self`; interior closures are
    /// consumed, freeing the tape.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward() on a graph with no differentiable leaves".into(),
            ));
        }

        // Post-order DFS: parents appear before their consumers.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            let n = t.0.borrow();
            for p in n.parents.iter() {
                if p.requires_grad() && !visited.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }

        self.0.borrow_mut().grad = Some(vec![T::ONE]);

        for t in order.iter().rev() {
            let back = t.0.borrow_mut().backward.take();
            if let Some(back) = back {
                // Move the accumulated grad out so the node is not borrowed
                // while the closure mutates parent nodes.
                let grad = t.0.borrow_mut().grad.take();
                if let Some(g) = grad {
                    back(&g);
                    t.0.borrow_mut().grad = Some(g);
                }
            }
            // Interior gradients are transient; free them eagerly.
            if t.key() != self.key() && !t.0.borrow().parents.is_empty() {
                t.0.borrow_mut().grad = None;
            }
        }
        Ok(())
    }

    fn same_shape(&self, rhs: &Tensor<T>, op: &str) -> Result<()> {
        let a = self.shape();
        let b = rhs.shape();
        if a != b {
            return Err(Error::dimension(op, &b, format!("shape {:?}", a)));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(rhs, "add")?;
        let out: Vec<T> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| *x + *y).collect()
        };
        let grads = self.requires_grad() || rhs.requires_grad();
        let back: Option<BackFn<T>> = if grads {
            let a = self.clone();
            let b = rhs.clone();
            Some(Box::new(move |g: &[T]| {
                a.accumulate_grad(g);
                b.accumulate_grad(g);
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone(), rhs.clone()],
            back,
        ))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(rhs, "sub")?;
        let out: Vec<T> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| *x - *y).collect()
        };
        let grads = self.requires_grad() || rhs.requires_grad();
        let back: Option<BackFn<T>> = if grads {
            let a = self.clone();
            let b = rhs.clone();
            Some(Box::new(move |g: &[T]| {
                a.accumulate_grad(g);
                let neg: Vec<T> = g.iter().map(|v| -*v).collect();
                b.accumulate_grad(&neg);
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone(), rhs.clone()],
            back,
        ))
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(rhs, "mul")?;
        let out: Vec<T> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| *x * *y).collect()
        };
        let grads = self.requires_grad() || rhs.requires_grad();
        let back: Option<BackFn<T>> = if grads {
            let a = self.clone();
            let b = rhs.clone();
            Some(Box::new(move |g: &[T]| {
                let da: Vec<T> = {
                    let bd = b.data();
                    g.iter().zip(bd.iter()).map(|(gi, bi)| *gi * *bi).collect()
                };
                a.accumulate_grad(&da);
                let db: Vec<T> = {
                    let ad = a.data();
                    g.iter().zip(ad.iter()).map(|(gi, ai)| *gi * *ai).collect()
                };
                b.accumulate_grad(&db);
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone(), rhs.clone()],
            back,
        ))
    }

    pub fn add_const(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64(c);
        let out: Vec<T> = self.data().iter().map(|x| *x + c).collect();
        let back: Option<BackFn<T>> = if self.requires_grad() {
            let a = self.clone();
            Some(Box::new(move |g: &[T]| a.accumulate_grad(g)))
        } else {
            None
        };
        Tensor::from_op(out, self.shape(), vec![self.clone()], back)
    }

    pub fn mul_const(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64(c);
        let out: Vec<T> = self.data().iter().map(|x| *x * c).collect();
        let back: Option<BackFn<T>> = if self.requires_grad() {
            let a = self.clone();
            Some(Box::new(move |g: &[T]| {
                let d: Vec<T> = g.iter().map(|gi| *gi * c).collect();
                a.accumulate_grad(&d);
            }))
        } else {
            None
        };
        Tensor::from_op(out, self.shape(), vec![self.clone()], back)
    }

    pub fn abs(&self) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|x| x.abs()).collect();
        let back: Option<BackFn<T>> = if self.requires_grad() {
            let a = self.clone();
            Some(Box::new(move |g: &[T]| {
                let d: Vec<T> = {
                    let ad = a.data();
                    g.iter()
                        .zip(ad.iter())
                        .map(|(gi, ai)| {
                            if *ai > T::ZERO {
                                *gi
                            } else if *ai < T::ZERO {
                                -*gi
                            } else {
                                T::ZERO
                            }
                        })
                        .collect()
                };
                a.accumulate_grad(&d);
            }))
        } else {
            None
        };
        Tensor::from_op(out, self.shape(), vec![self.clone()], back)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let out: Vec<T> = self
            .data()
            .iter()
            .map(|x| T::ONE / (T::ONE + (-*x).exp()))
            .collect();
        let back: Option<BackFn<T>> = if self.requires_grad() {
            let a = self.clone();
            let saved = out.clone();
            Some(Box::new(move |g: &[T]| {
                let d: Vec<T> = g
                    .iter()
                    .zip(saved.iter())
                    .map(|(gi, yi)| *gi * *yi * (T::ONE - *yi))
                    .collect();
                a.accumulate_grad(&d);
            }))
        } else {
            None
        };
        Tensor::from_op(out, self.shape(), vec![self.clone()], back)
    }

    /// Elementwise max; ties send the gradient to `self`.
    pub fn maximum(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(rhs, "maximum")?;
        let out: Vec<T> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| x.max(*y)).collect()
        };
        let grads = self.requires_grad() || rhs.requires_grad();
        let back: Option<BackFn<T>> = if grads {
            let a = self.clone();
            let b = rhs.clone();
            Some(Box::new(move |g: &[T]| {
                let (da, db): (Vec<T>, Vec<T>) = {
                    let ad = a.data();
                    let bd = b.data();
                    let mut da = vec![T::ZERO; g.len()];
                    let mut db = vec![T::ZERO; g.len()];
                    for i in 0..g.len() {
                        if ad[i] >= bd[i] {
                            da[i] = g[i];
                        } else {
                            db[i] = g[i];
                        }
                    }
                    (da, db)
                };
                a.accumulate_grad(&da);
                b.accumulate_grad(&db);
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone(), rhs.clone()],
            back,
        ))
    }

    /// Clamp to [0, 1]. Gradient passes where 0 <= x <= 1 (inclusive), so
    /// values sitting exactly on the bounds stay trainable.
    pub fn clamp01(&self) -> Tensor<T> {
        let out: Vec<T> = self
            .data()
            .iter()
            .map(|x| x.max(T::ZERO).min(T::ONE))
            .collect();
        let back: Option<BackFn<T>> = if self.requires_grad() {
            let a = self.clone();
            Some(Box::new(move |g: &[T]| {
                let d: Vec<T> = {
                    let ad = a.data();
                    g.iter()
                        .zip(ad.iter())
                        .map(|(gi, ai)| {
                            if *ai >= T::ZERO && *ai <= T::ONE {
                                *gi
                            } else {
                                T::ZERO
                            }
                        })
                        .collect()
                };
                a.accumulate_grad(&d);
            }))
        } else {
            None
        };
        Tensor::from_op(out, self.shape(), vec![self.clone()], back)
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor<T> {
        let mut acc = T::ZERO;
        for v in self.data().iter() {
            acc += *v;
        }
        let back: Option<BackFn<T>> = if self.requires_grad() {
            let a = self.clone();
            let n = self.numel();
            Some(Box::new(move |g: &[T]| {
                let d = vec![g[0]; n];
                a.accumulate_grad(&d);
            }))
        } else {
            None
        };
        Tensor::from_op(vec![acc], vec![1], vec![self.clone()], back)
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel();
        self.sum_all().mul_const(1.0 / n as f64)
    }

    /// Global maximum as a 1-element tensor. Gradient flows to the first
    /// occurrence of the maximum.
    pub fn max_all(&self) -> Tensor<T> {
        let (mut best, mut best_idx) = (self.data()[0], 0usize);
        for (i, v) in self.data().iter().enumerate().skip(1) {
            if *v > best {
                best = *v;
                best_idx = i;
            }
        }
        let back: Option<BackFn<T>> = if self.requires_grad() {
            let a = self.clone();
            let n = self.numel();
            Some(Box::new(move |g: &[T]| {
                let mut d = vec![T::ZERO; n];
                d[best_idx] = g[0];
                a.accumulate_grad(&d);
            }))
        } else {
            None
        };
        Tensor::from_op(vec![best], vec![1], vec![self.clone()], back)
    }

    /// Mean over the channel axis of an NCHW tensor -> (N, 1, H, W).
    pub fn channel_mean(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::dimension("channel_mean", &s, "4-d NCHW"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let inv_c = T::from_f64(1.0 / c as f64);
        let mut out = vec![T::ZERO; n * hw];
        {
            let d = self.data();
            for ni in 0..n {
                for ci in 0..c {
                    let src = &d[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    let dst = &mut out[ni * hw..(ni + 1) * hw];
                    for (o, v) in dst.iter_mut().zip(src.iter()) {
                        *o += *v;
                    }
                }
            }
            for o in out.iter_mut() {
                *o = *o * inv_c;
            }
        }
        let back: Option<BackFn<T>> = if self.requires_grad() {
            let a = self.clone();
            Some(Box::new(move |g: &[T]| {
                let mut d = vec![T::ZERO; n * c * hw];
                for ni in 0..n {
                    for ci in 0..c {
                        let dst = &mut d[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                        let src = &g[ni * hw..(ni + 1) * hw];
                        for (o, v) in dst.iter_mut().zip(src.iter()) {
                            *o = *v * inv_c;
                        }
                    }
                }
                a.accumulate_grad(&d);
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(
            out,
            vec![n, 1, h, w],
            vec![self.clone()],
            back,
        ))
    }

    // ---- broadcast helpers ----

    /// Multiply by a 1-element tensor (scalar broadcast).
    pub fn mul_scalar_tensor(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        if s.numel() != 1 {
            return Err(Error::dimension("mul_scalar_tensor", &s.shape(), "1 element"));
        }
        let sv = s.data()[0];
        let out: Vec<T> = self.data().iter().map(|x| *x * sv).collect();
        let grads = self.requires_grad() || s.requires_grad();
        let back: Option<BackFn<T>> = if grads {
            let a = self.clone();
            let sc = s.clone();
            Some(Box::new(move |g: &[T]| {
                let sv = sc.data()[0];
                let da: Vec<T> = g.iter().map(|gi| *gi * sv).collect();
                a.accumulate_grad(&da);
                let mut ds = T::ZERO;
                {
                    let ad = a.data();
                    for (gi, ai) in g.iter().zip(ad.iter()) {
                        ds += *gi * *ai;
                    }
                }
                sc.accumulate_grad(&[ds]);
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone(), s.clone()],
            back,
        ))
    }

    /// Divide by a 1-element tensor (scalar broadcast).
    pub fn div_scalar_tensor(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        if s.numel() != 1 {
            return Err(Error::dimension("div_scalar_tensor", &s.shape(), "1 element"));
        }
        let sv = s.data()[0];
        let out: Vec<T> = self.data().iter().map(|x| *x / sv).collect();
        let grads = self.requires_grad() || s.requires_grad();
        let back: Option<BackFn<T>> = if grads {
            let a = self.clone();
            let sc = s.clone();
            Some(Box::new(move |g: &[T]| {
                let sv = sc.data()[0];
                let da: Vec<T> = g.iter().map(|gi| *gi / sv).collect();
                a.accumulate_grad(&da);
                let mut ds = T::ZERO;
                {
                    let ad = a.data();
                    for (gi, ai) in g.iter().zip(ad.iter()) {
                        ds += *gi * *ai;
                    }
                }
                ds = -ds / (sv * sv);
                sc.accumulate_grad(&[ds]);
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone(), s.clone()],
            back,
        ))
    }

    /// NCHW x (N,1,H,W) -> NCHW, broadcasting the single channel of `m`.
    pub fn mul_channel_broadcast(&self, m: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.shape();
        let ms = m.shape();
        if s.len() != 4 || ms.len() != 4 || ms[1] != 1 || ms[0] != s[0] || ms[2] != s[2] || ms[3] != s[3]
        {
            return Err(Error::dimension(
                "mul_channel_broadcast",
                &ms,
                format!("(N,1,H,W) matching {:?}", s),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let out: Vec<T> = {
            let a = self.data();
            let b = m.data();
            let mut out = vec![T::ZERO; n * c * hw];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for i in 0..hw {
                        out[base + i] = a[base + i] * b[ni * hw + i];
                    }
                }
            }
            out
        };
        let grads = self.requires_grad() || m.requires_grad();
        let back: Option<BackFn<T>> = if grads {
            let a = self.clone();
            let b = m.clone();
            Some(Box::new(move |g: &[T]| {
                let da: Vec<T> = {
                    let bd = b.data();
                    let mut da = vec![T::ZERO; n * c * hw];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                da[base + i] = g[base + i] * bd[ni * hw + i];
                            }
                        }
                    }
                    da
                };
                a.accumulate_grad(&da);
                let db: Vec<T> = {
                    let ad = a.data();
                    let mut db = vec![T::ZERO; n * hw];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                db[ni * hw + i] += g[base + i] * ad[base + i];
                            }
                        }
                    }
                    db
                };
                b.accumulate_grad(&db);
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(
            out,
            s,
            vec![self.clone(), m.clone()],
            back,
        ))
    }

    /// NCHW x (C) -> NCHW, scaling each channel by `scale[c]`.
    pub fn mul_channel_scale(&self, scale: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::dimension("mul_channel_scale", &s, "4-d NCHW"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if scale.numel() != c {
            return Err(Error::dimension(
                "mul_channel_scale",
                &scale.shape(),
                format!("{} channels", c),
            ));
        }
        let hw = h * w;
        let out: Vec<T> = {
            let a = self.data();
            let sc = scale.data();
            let mut out = vec![T::ZERO; self.numel()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for i in 0..hw {
                        out[base + i] = a[base + i] * sc[ci];
                    }
                }
            }
            out
        };
        let grads = self.requires_grad() || scale.requires_grad();
        let back: Option<BackFn<T>> = if grads {
            let a = self.clone();
            let sc = scale.clone();
            Some(Box::new(move |g: &[T]| {
                if a.requires_grad() {
                    let scd = sc.to_vec();
                    let mut da = vec![T::ZERO; g.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                da[base + i] = g[base + i] * scd[ci];
                            }
                        }
                    }
                    a.accumulate_grad(&da);
                }
                if sc.requires_grad() {
                    let ad = a.data();
                    let mut ds = vec![T::ZERO; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let mut acc = T::ZERO;
                            for i in 0..hw {
                                acc += g[base + i] * ad[base + i];
                            }
                            ds[ci] += acc;
                        }
                    }
                    sc.accumulate_grad(&ds);
                }
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(
            out,
            s,
            vec![self.clone(), scale.clone()],
            back,
        ))
    }

    // ---- shape ops ----

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::dimension(
                "reshape",
                new_shape,
                format!("product equal to {}", self.numel()),
            ));
        }
        let out = self.to_vec();
        let back: Option<BackFn<T>> = if self.requires_grad() {
            let a = self.clone();
            Some(Box::new(move |g: &[T]| a.accumulate_grad(g)))
        } else {
            None
        };
        Ok(Tensor::from_op(
            out,
            new_shape.to_vec(),
            vec![self.clone()],
            back,
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::dimension("transpose_last2", &s, "rank >= 2"));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let mut out = vec![T::ZERO; self.numel()];
        {
            let d = self.data();
            for b in 0..batch {
                let base = b * rows * cols;
                for r in 0..rows {
                    for c in 0..cols {
                        out[base + c * rows + r] = d[base + r * cols + c];
                    }
                }
            }
        }
        let mut new_shape = s.clone();
        let len = new_shape.len();
        new_shape.swap(len - 2, len - 1);
        let back: Option<BackFn<T>> = if self.requires_grad() {
            let a = self.clone();
            Some(Box::new(move |g: &[T]| {
                let mut d = vec![T::ZERO; g.len()];
                for b in 0..batch {
                    let base = b * rows * cols;
                    for r in 0..rows {
                        for c in 0..cols {
                            d[base + r * cols + c] = g[base + c * rows + r];
                        }
                    }
                }
                a.accumulate_grad(&d);
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(out, new_shape, vec![self.clone()], back))
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat_channels on empty list".into()));
        }
        let first = inputs[0].shape();
        if first.len() != 4 {
            return Err(Error::dimension("concat_channels", &first, "4-d NCHW"));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut channels = Vec::with_capacity(inputs.len());
        for t in inputs {
            let s = t.shape();
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::dimension(
                    "concat_channels",
                    &s,
                    format!("(N={},C,*,H={},W={})", n, h, w),
                ));
            }
            channels.push(s[1]);
        }
        let c_total: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = vec![T::ZERO; n * c_total * hw];
        for ni in 0..n {
            let mut c_off = 0usize;
            for (t, &ci) in inputs.iter().zip(channels.iter()) {
                let d = t.data();
                let src = &d[ni * ci * hw..(ni + 1) * ci * hw];
                let dst = &mut out[(ni * c_total + c_off) * hw..(ni * c_total + c_off + ci) * hw];
                dst.copy_from_slice(src);
                c_off += ci;
            }
        }
        let parents: Vec<Tensor<T>> = inputs.iter().map(|t| (*t).clone()).collect();
        let grads = parents.iter().any(|p| p.requires_grad());
        let back: Option<BackFn<T>> = if grads {
            let parents_cl = parents.clone();
            let channels_cl = channels.clone();
            Some(Box::new(move |g: &[T]| {
                for (idx, p) in parents_cl.iter().enumerate() {
                    let ci = channels_cl[idx];
                    let c_off: usize = channels_cl[..idx].iter().sum();
                    let mut d = vec![T::ZERO; n * ci * hw];
                    for ni in 0..n {
                        let src =
                            &g[(ni * c_total + c_off) * hw..(ni * c_total + c_off + ci) * hw];
                        d[ni * ci * hw..(ni + 1) * ci * hw].copy_from_slice(src);
                    }
                    p.accumulate_grad(&d);
                }
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(out, vec![n, c_total, h, w], parents, back))
    }

    /// (N,C,H,W) -> (N,4C,H/2,W/2). Output channel layout is c*4 + (dy*2+dx).
    pub fn space_to_depth(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::dimension("space_to_depth", &s, "NCHW with even H, W"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::ZERO; self.numel()];
        {
            let d = self.data();
            for ni in 0..n {
                for ci in 0..c {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let oc = ci * 4 + dy * 2 + dx;
                            for y in 0..oh {
                                for x in 0..ow {
                                    let src = ((ni * c + ci) * h + (2 * y + dy)) * w + 2 * x + dx;
                                    let dst = ((ni * c * 4 + oc) * oh + y) * ow + x;
                                    out[dst] = d[src];
                                }
                            }
                        }
                    }
                }
            }
        }
        let back: Option<BackFn<T>> = if self.requires_grad() {
            let a = self.clone();
            Some(Box::new(move |g: &[T]| {
                let mut d = vec![T::ZERO; g.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let oc = ci * 4 + dy * 2 + dx;
                                for y in 0..oh {
                                    for x in 0..ow {
                                        let src =
                                            ((ni * c + ci) * h + (2 * y + dy)) * w + 2 * x + dx;
                                        let dst = ((ni * c * 4 + oc) * oh + y) * ow + x;
                                        d[src] = g[dst];
                                    }
                                }
                            }
                        }
                    }
                }
                a.accumulate_grad(&d);
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(
            out,
            vec![n, c * 4, oh, ow],
            vec![self.clone()],
            back,
        ))
    }

    /// (N,C,H,W) -> (N,C/4,2H,2W); exact inverse of [`Tensor::space_to_depth`].
    pub fn depth_to_space(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 || s[1] % 4 != 0 {
            return Err(Error::dimension(
                "depth_to_space",
                &s,
                "NCHW with C divisible by 4",
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let oc = c / 4;
        let (oh, ow) = (h * 2, w * 2);
        let mut out = vec![T::ZERO; self.numel()];
        {
            let d = self.data();
            for ni in 0..n {
                for co in 0..oc {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let ci = co * 4 + dy * 2 + dx;
                            for y in 0..h {
                                for x in 0..w {
                                    let src = ((ni * c + ci) * h + y) * w + x;
                                    let dst = ((ni * oc + co) * oh + (2 * y + dy)) * ow + 2 * x + dx;
                                    out[dst] = d[src];
                                }
                            }
                        }
                    }
                }
            }
        }
        let back: Option<BackFn<T>> = if self.requires_grad() {
            let a = self.clone();
            Some(Box::new(move |g: &[T]| {
                let mut d = vec![T::ZERO; g.len()];
                for ni in 0..n {
                    for co in 0..oc {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let ci = co * 4 + dy * 2 + dx;
                                for y in 0..h {
                                    for x in 0..w {
                                        let src = ((ni * c + ci) * h + y) * w + x;
                                        let dst =
                                            ((ni * oc + co) * oh + (2 * y + dy)) * ow + 2 * x + dx;
                                        d[src] = g[dst];
                                    }
                                }
                            }
                        }
                    }
                }
                a.accumulate_grad(&d);
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(
            out,
            vec![n, oc, oh, ow],
            vec![self.clone()],
            back,
        ))
    }

    /// SimpleGate: split channels in half, multiply the halves elementwise.
    pub fn simple_gate(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 || s[1] % 2 != 0 {
            return Err(Error::dimension("simple_gate", &s, "NCHW with even C"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let half = c / 2;
        let hw = h * w;
        let mut out = vec![T::ZERO; n * half * hw];
        {
            let d = self.data();
            for ni in 0..n {
                for ci in 0..half {
                    let a = (ni * c + ci) * hw;
                    let b = (ni * c + half + ci) * hw;
                    let o = (ni * half + ci) * hw;
                    for i in 0..hw {
                        out[o + i] = d[a + i] * d[b + i];
                    }
                }
            }
        }
        let back: Option<BackFn<T>> = if self.requires_grad() {
            let t = self.clone();
            Some(Box::new(move |g: &[T]| {
                let mut d = vec![T::ZERO; n * c * hw];
                {
                    let td = t.data();
                    for ni in 0..n {
                        for ci in 0..half {
                            let a = (ni * c + ci) * hw;
                            let b = (ni * c + half + ci) * hw;
                            let o = (ni * half + ci) * hw;
                            for i in 0..hw {
                                d[a + i] = g[o + i] * td[b + i];
                                d[b + i] = g[o + i] * td[a + i];
                            }
                        }
                    }
                }
                t.accumulate_grad(&d);
            }))
        } else {
            None
        };
        Ok(Tensor::from_op(
            out,
            vec![n, half, h, w],
            vec![self.clone()],
            back,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::param(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn backward_sum_gives_ones() {
        let x = t64(&[1.0, -2.0, 3.0, 0.5], &[2, 2]);
        let loss = x.sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_square_closed_form() {
        let x = t64(&[1.0, 2.0], &[2]);
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let x = t64(&[1.0, 2.0], &[2]);
        let y = x.mul(&x).unwrap();
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_node_accumulates_both_paths() {
        // loss = x*x + x -> d/dx = 2x + 1
        let x = t64(&[3.0], &[1]);
        let loss = x.mul(&x).unwrap().add(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn grads_accumulate_across_backward_calls() {
        let x = t64(&[1.0], &[1]);
        x.sum_all().backward().unwrap();
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn simple_gate_unit_first_half() {
        // first half all ones -> output equals second half
        let mut data = vec![1.0; 8];
        data[4..].copy_from_slice(&[2.0, 3.0, 4.0, 5.0]);
        let x = t64(&data, &[1, 2, 2, 2]);
        let y = x.simple_gate().unwrap();
        assert_eq!(y.to_vec(), vec![2.0, 3.0, 4.0, 5.0]);
        assert_eq!(y.shape(), vec![1, 1, 2, 2]);
    }

    #[test]
    fn simple_gate_zero_half_annihilates() {
        let mut data = vec![0.0; 8];
        data[4..].copy_from_slice(&[2.0, 3.0, 4.0, 5.0]);
        let x = t64(&data, &[1, 2, 2, 2]);
        let y = x.simple_gate().unwrap();
        assert_eq!(y.to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn simple_gate_rejects_odd_channels() {
        let x = t64(&[1.0, 2.0, 3.0], &[1, 3, 1, 1]);
        assert!(matches!(x.simple_gate(), Err(Error::Dimension { .. })));
    }

    #[test]
    fn simple_gate_matches_direct_product() {
        let data: Vec<f64> = (0..16).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let x = t64(&data, &[1, 4, 2, 2]);
        let y = x.simple_gate().unwrap();
        for c in 0..2 {
            for i in 0..4 {
                let expect = data[c * 4 + i] * data[(c + 2) * 4 + i];
                assert!((y.to_vec()[c * 4 + i] - expect).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn space_depth_roundtrip_bit_exact() {
        let data: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let x = t64(&data, &[1, 2, 4, 4]);
        let y = x.space_to_depth().unwrap();
        assert_eq!(y.shape(), vec![1, 8, 2, 2]);
        let z = y.depth_to_space().unwrap();
        assert_eq!(z.shape(), vec![1, 2, 4, 4]);
        assert_eq!(z.to_vec(), data);
    }

    #[test]
    fn concat_then_split_grad() {
        let a = t64(&[1.0, 2.0], &[1, 2, 1, 1]);
        let b = t64(&[3.0], &[1, 1, 1, 1]);
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0]);
        let w = Tensor::constant(vec![1.0, 10.0, 100.0], &[1, 3, 1, 1]).unwrap();
        c.mul(&w).unwrap().sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 10.0]);
        assert_eq!(b.grad().unwrap(), vec![100.0]);
    }

    #[test]
    fn channel_mean_shape_and_values() {
        let x = t64(&[1.0, 3.0, 5.0, 7.0], &[1, 2, 1, 2]);
        let m = x.channel_mean().unwrap();
        assert_eq!(m.shape(), vec![1, 1, 1, 2]);
        assert_eq!(m.to_vec(), vec![3.0, 5.0]);
    }

    #[test]
    fn maximum_ties_go_left() {
        let a = t64(&[1.0, 5.0], &[2]);
        let b = t64(&[1.0, 2.0], &[2]);
        let m = a.maximum(&b).unwrap();
        m.sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![0.0, 0.0]);
    }
}
