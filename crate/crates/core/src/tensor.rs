use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DfnError, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// `(batch, channels, rows, cols)` in NCHW order. Every axis is at least 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(DfnError::invalid(
                "tensor",
                format!("all dimensions must be >= 1, got ({n},{c},{h},{w})"),
            ));
        }
        Ok(Shape4 { n, c, h, w })
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub(crate) fn expect_same(&self, other: &Shape4, context: &'static str) -> Result<()> {
        for (axis, l, r) in [
            ("n", self.n, other.n),
            ("c", self.c, other.c),
            ("h", self.h, other.h),
            ("w", self.w, other.w),
        ] {
            if l != r {
                return Err(DfnError::ShapeMismatch {
                    context,
                    axis,
                    left: l,
                    right: r,
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl TryFrom<[usize; 4]> for Shape4 {
    type Error = DfnError;

    fn try_from(d: [usize; 4]) -> Result<Self> {
        Shape4::new(d[0], d[1], d[2], d[3])
    }
}

/// Dense NCHW array with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(DfnError::invalid(
                "tensor",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor4 {
            shape,
            data,
            grad: None,
        })
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape4) -> Self {
        Self::full(shape, T::one())
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform(shape: Shape4, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::from_f64_lossy(rng.uniform(lo, hi)))
            .collect();
        Tensor4 {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, y, x)]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
            None => self.grad = Some(vec![T::zero(); self.data.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(DfnError::invalid(
                "gradient",
                format!("{} values for shape {}", g.len(), self.shape),
            ));
        }
        let buf = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); self.data.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b = *b + *v;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Copies out the channel range `[start, end)`.
    pub fn channel_slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.shape.c {
            return Err(DfnError::invalid(
                "channel_slice",
                format!("range {start}..{end} of {} channels", self.shape.c),
            ));
        }
        let s = self.shape;
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * (end - start) * plane);
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&self.data[base..base + (end - start) * plane]);
        }
        Tensor4::from_vec(Shape4::new(s.n, end - start, s.h, s.w)?, data)
    }

    /// Stacks single- or multi-item tensors of identical `c, h, w` along `n`.
    pub fn stack(items: &[&Tensor4<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| DfnError::invalid("stack", "no tensors"))?
            .shape;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            let s = t.shape;
            for (axis, l, r) in [("c", first.c, s.c), ("h", first.h, s.h), ("w", first.w, s.w)] {
                if l != r {
                    return Err(DfnError::ShapeMismatch {
                        context: "stack",
                        axis,
                        left: l,
                        right: r,
                    });
                }
            }
            data.extend_from_slice(&t.data);
            n += s.n;
        }
        Tensor4::from_vec(Shape4::new(n, first.c, first.h, first.w)?, data)
    }

    /// The `i`-th batch item as an `n = 1` tensor.
    pub fn item(&self, i: usize) -> Result<Self> {
        let s = self.shape;
        if i >= s.n {
            return Err(DfnError::invalid("item", format!("index {i} of {}", s.n)));
        }
        let len = s.c * s.plane();
        Tensor4::from_vec(
            Shape4::new(1, s.c, s.h, s.w)?,
            self.data[i * len..(i + 1) * len].to_vec(),
        )
    }
}
