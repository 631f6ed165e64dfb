//! Reverse-mode differentiation over NCHW tensors.
//!
//! A [`Tape`] records every operation as a node in creation order, so node
//! ids are already a topological order. [`Tape::backward`] walks the ids in
//! reverse once, freeing intermediate gradients as it goes, and accumulates
//! into the persistent gradient buffers of leaf nodes. Calling it twice
//! doubles leaf gradients; [`Tape::zero_grad`] resets them.

use crate::error::{DfnError, Result};
use crate::kernels::{conv_backward, conv_forward, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// How batch normalization picks its statistics.
#[derive(Clone, Debug)]
pub enum BnStats<'a, T> {
    /// Normalize with the batch's own mean and biased variance.
    Batch { eps: T },
    /// Normalize with fixed running statistics.
    Running { mean: &'a [T], var: &'a [T], eps: T },
}

/// Per-channel statistics of one train-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (divide-by-count) variance.
    pub var: Vec<T>,
    /// Elements per channel, `n·h·w`.
    pub count: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Square(Var),
    Abs(Var),
    Concat(Var, Var),
    ChannelScale(Var, Var),
    SpatialScale(Var, Var),
    PRelu(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch: bool,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    GlobalAvgPool(Var),
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn mismatch(context: &'static str, axis: &'static str, left: usize, right: usize) -> DfnError {
    DfnError::ShapeMismatch {
        context,
        axis,
        left,
        right,
    }
}

#[inline]
fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor4<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if matches!(n.op, Op::Leaf) && n.requires_grad {
                n.value.zero_grad();
            }
        }
    }

    fn push(&mut self, shape: Shape4, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor4::from_vec(shape, data).expect("op produced inconsistent data length");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, context: &'static str) -> Result<Shape4> {
        let sa = self.shape(a);
        sa.expect_same(&self.shape(b), context)?;
        Ok(sa)
    }

    fn zip_map(&mut self, a: Var, b: Var, context: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let s = self.same_shape(a, b, context)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(s, data, op, &[a, b]))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let s = self.shape(x);
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        self.push(s, data, op, &[x])
    }

    /// Cross-correlation with optional bias. `w` has shape
    /// `(c_out, c_in/groups, k, k)`, `b` has shape `(1, c_out, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.h != ws.w {
            return Err(DfnError::invalid("conv2d", format!("non-square kernel {ws}")));
        }
        if stride == 0 || groups == 0 {
            return Err(DfnError::invalid("conv2d", "stride and groups must be positive"));
        }
        if xs.c % groups != 0 || ws.n % groups != 0 {
            return Err(DfnError::invalid(
                "conv2d",
                format!("{} input / {} output channels not divisible by {groups} groups", xs.c, ws.n),
            ));
        }
        if xs.c / groups != ws.c {
            return Err(mismatch("conv2d input channels per group", "c", xs.c / groups, ws.c));
        }
        let k = ws.h;
        if xs.h + 2 * pad < k || xs.w + 2 * pad < k {
            return Err(DfnError::invalid(
                "conv2d",
                format!("non-positive output size for input {xs}, k={k}, pad={pad}"),
            ));
        }
        let ho = (xs.h + 2 * pad - k) / stride + 1;
        let wo = (xs.w + 2 * pad - k) / stride + 1;
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.numel() != ws.n {
                return Err(mismatch("conv2d bias", "c", bs.numel(), ws.n));
            }
        }
        let geom = ConvGeom {
            n: xs.n,
            c_in: xs.c,
            c_out: ws.n,
            k,
            stride,
            pad,
            groups,
            h: xs.h,
            w: xs.w,
            ho,
            wo,
        };
        let y = conv_forward(&geom, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Shape4::new(xs.n, ws.n, ho, wo)?, y, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::MulScalar(x, c), |v| v * c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    /// Channels of `a` first, then `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        for (axis, l, r) in [("n", sa.n, sb.n), ("h", sa.h, sb.h), ("w", sa.w, sb.w)] {
            if l != r {
                return Err(mismatch("concat_channels", axis, l, r));
            }
        }
        let plane = sa.plane();
        let (la, lb) = (sa.c * plane, sb.c * plane);
        let mut data = Vec::with_capacity(sa.numel() + sb.numel());
        for n in 0..sa.n {
            data.extend_from_slice(&self.data(a)[n * la..(n + 1) * la]);
            data.extend_from_slice(&self.data(b)[n * lb..(n + 1) * lb]);
        }
        let s = Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w)?;
        Ok(self.push(s, data, Op::Concat(a, b), &[a, b]))
    }

    /// `x[n,c,:,:] · s[n,c]` with `s` of shape `(n, c, 1, 1)`.
    pub fn mul_channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(x), self.shape(s));
        let want = Shape4::new(xs.n, xs.c, 1, 1)?;
        want.expect_same(&ss, "mul_channel_scale")?;
        let plane = xs.plane();
        let sd = self.data(s);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sd[i / plane])
            .collect();
        Ok(self.push(xs, data, Op::ChannelScale(x, s), &[x, s]))
    }

    /// `x[n,c,y,x] · s[n,0,y,x]` with `s` of shape `(n, 1, h, w)`.
    pub fn mul_spatial_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(x), self.shape(s));
        let want = Shape4::new(xs.n, 1, xs.h, xs.w)?;
        want.expect_same(&ss, "mul_spatial_scale")?;
        let plane = xs.plane();
        let sd = self.data(s);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sd[(i / (xs.c * plane)) * plane + i % plane])
            .collect();
        Ok(self.push(xs, data, Op::SpatialScale(x, s), &[x, s]))
    }

    /// Per-channel parametric rectifier; `alpha` has shape `(1, c, 1, 1)`.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (xs, als) = (self.shape(x), self.shape(alpha));
        if als.numel() != xs.c {
            return Err(mismatch("prelu alpha", "c", als.numel(), xs.c));
        }
        let plane = xs.plane();
        let a = self.data(alpha);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > T::zero() { v } else { a[(i / plane) % xs.c] * v })
            .collect();
        Ok(self.push(xs, data, Op::PRelu(x, alpha), &[x, alpha]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid_scalar)
    }

    /// Batch normalization with affine `gamma`, `beta` of shape `(1, c, 1, 1)`.
    /// Returns the batch statistics when normalizing with batch statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: BnStats<'_, T>) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(x);
        for (what, v) in [("batch_norm gamma", gamma), ("batch_norm beta", beta)] {
            let n = self.shape(v).numel();
            if n != xs.c {
                return Err(mismatch(what, "c", n, xs.c));
            }
        }
        let plane = xs.plane();
        let count = xs.n * plane;
        let xd = self.data(x);
        let (mean, var, eps, batch) = match stats {
            BnStats::Batch { eps } => {
                if count < 2 {
                    return Err(DfnError::invalid(
                        "batch_norm",
                        format!("train mode needs >= 2 values per channel, got {count} for {xs}"),
                    ));
                }
                let inv = T::one() / T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); xs.c];
                let mut var = vec![T::zero(); xs.c];
                for c in 0..xs.c {
                    let mut s = T::zero();
                    for n in 0..xs.n {
                        let o = (n * xs.c + c) * plane;
                        s = s + xd[o..o + plane].iter().copied().sum::<T>();
                    }
                    let m = s * inv;
                    let mut q = T::zero();
                    for n in 0..xs.n {
                        let o = (n * xs.c + c) * plane;
                        q = q + xd[o..o + plane].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                    }
                    mean[c] = m;
                    var[c] = q * inv;
                }
                (mean, var, eps, true)
            }
            BnStats::Running { mean, var, eps } => {
                if mean.len() != xs.c || var.len() != xs.c {
                    return Err(mismatch("batch_norm running stats", "c", mean.len(), xs.c));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = Vec::with_capacity(xs.numel());
        let mut y = Vec::with_capacity(xs.numel());
        for (i, &v) in xd.iter().enumerate() {
            let c = (i / plane) % xs.c;
            let h = (v - mean[c]) * inv_std[c];
            xhat.push(h);
            y.push(g[c] * h + b[c]);
        }
        let out = self.push(
            xs,
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            },
            &[x, gamma, beta],
        );
        Ok((out, batch.then_some(BatchStats { mean, var, count })))
    }

    /// 2×2 max pooling, stride 2. Ties route to the first element in
    /// row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.h % 2 != 0 || xs.w % 2 != 0 {
            return Err(DfnError::invalid("max_pool2", format!("odd spatial dims in {xs}")));
        }
        let (ho, wo) = (xs.h / 2, xs.w / 2);
        let xd = self.data(x);
        let mut data = Vec::with_capacity(xs.n * xs.c * ho * wo);
        let mut argmax = Vec::with_capacity(data.capacity());
        for nc in 0..xs.n * xs.c {
            let base = nc * xs.plane();
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * xs.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * xs.w + 2 * ox + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    data.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let s = Shape4::new(xs.n, xs.c, ho, wo)?;
        Ok(self.push(s, data, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Nearest-neighbour ×2: every pixel becomes a 2×2 block.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let (ho, wo) = (xs.h * 2, xs.w * 2);
        let xd = self.data(x);
        let mut data = Vec::with_capacity(xs.numel() * 4);
        for nc in 0..xs.n * xs.c {
            let base = nc * xs.plane();
            for oy in 0..ho {
                let row = &xd[base + (oy / 2) * xs.w..base + (oy / 2 + 1) * xs.w];
                for ox in 0..wo {
                    data.push(row[ox / 2]);
                }
            }
        }
        let s = Shape4::new(xs.n, xs.c, ho, wo)?;
        Ok(self.push(s, data, Op::Upsample2(x), &[x]))
    }

    /// `(n, c, h, w) → (n, c, 1, 1)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let plane = xs.plane();
        let inv = T::one() / T::from_usize(plane).unwrap();
        let data = self
            .data(x)
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.push(Shape4::new(xs.n, xs.c, 1, 1)?, data, Op::GlobalAvgPool(x), &[x]))
    }

    /// `(n, c, h, w) → (n, c, 1, 1)` spatial max.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let plane = xs.plane();
        let mut data = Vec::with_capacity(xs.n * xs.c);
        let mut argmax = Vec::with_capacity(xs.n * xs.c);
        for (nc, p) in self.data(x).chunks(plane).enumerate() {
            let mut best = 0;
            for (i, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = i;
                }
            }
            data.push(p[best]);
            argmax.push(nc * plane + best);
        }
        Ok(self.push(
            Shape4::new(xs.n, xs.c, 1, 1)?,
            data,
            Op::GlobalMaxPool { x, argmax },
            &[x],
        ))
    }

    /// `(n, c, h, w) → (n, 1, h, w)` mean over channels.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let plane = xs.plane();
        let inv = T::one() / T::from_usize(xs.c).unwrap();
        let xd = self.data(x);
        let mut data = vec![T::zero(); xs.n * plane];
        for n in 0..xs.n {
            let dst = &mut data[n * plane..(n + 1) * plane];
            for c in 0..xs.c {
                let o = (n * xs.c + c) * plane;
                for (d, &v) in dst.iter_mut().zip(&xd[o..o + plane]) {
                    *d = *d + v;
                }
            }
            dst.iter_mut().for_each(|d| *d = *d * inv);
        }
        Ok(self.push(Shape4::new(xs.n, 1, xs.h, xs.w)?, data, Op::ChannelMean(x), &[x]))
    }

    /// `(n, c, h, w) → (n, 1, h, w)` max over channels.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let plane = xs.plane();
        let xd = self.data(x);
        let mut data = Vec::with_capacity(xs.n * plane);
        let mut argmax = Vec::with_capacity(xs.n * plane);
        for n in 0..xs.n {
            for p in 0..plane {
                let mut best = n * xs.c * plane + p;
                for c in 1..xs.c {
                    let i = (n * xs.c + c) * plane + p;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                data.push(xd[best]);
                argmax.push(best);
            }
        }
        Ok(self.push(
            Shape4::new(xs.n, 1, xs.h, xs.w)?,
            data,
            Op::ChannelMax { x, argmax },
            &[x],
        ))
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        self.push(Shape4 { n: 1, c: 1, h: 1, w: 1 }, vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s: T = d.iter().copied().sum::<T>() / T::from_usize(d.len()).unwrap();
        self.push(Shape4 { n: 1, c: 1, h: 1, w: 1 }, vec![s], Op::Mean(x), &[x])
    }

    /// Accumulates `d(output)/d(leaf)` into every leaf that requires grad.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let n = self.shape(output).numel();
        if n != 1 {
            return Err(DfnError::NonScalarOutput(n));
        }
        if !self.requires_grad(output) {
            return Err(DfnError::DetachedGraph);
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(vec![T::one()]);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &mut self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                node.value.accumulate_grad(&g)?;
                continue;
            }
            let nodes = &self.nodes;
            backprop(nodes, id, &g, &mut grads);
        }
        Ok(())
    }
}

/// Buffer for `v`'s gradient if `v` needs one.
fn slot<'g, T: Scalar>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let val = |v: Var| nodes[v.0].value.data();
    let shape = |v: Var| nodes[v.0].value.shape();
    match &node.op {
        Op::Leaf => unreachable!(),
        Op::Conv2d { x, w, b, geom } => {
            let dx = slot(nodes, grads, *x).map(std::mem::take);
            let dw = slot(nodes, grads, *w).map(std::mem::take);
            let db = b.and_then(|b| slot(nodes, grads, b).map(std::mem::take));
            let (mut dx, mut dw, mut db) = (dx, dw, db);
            conv_backward(
                geom,
                val(*x),
                val(*w),
                g,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            if let Some(d) = dx {
                grads[x.0] = Some(d);
            }
            if let Some(d) = dw {
                grads[w.0] = Some(d);
            }
            if let (Some(b), Some(d)) = (b, db) {
                grads[b.0] = Some(d);
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &u)| *d = *d + u);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(d, &u)| *d = *d + sign * u);
            }
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] * bd[i];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] = gb[i] + g[i] * ad[i];
                }
            }
        }
        Op::Div(a, b) => {
            let (ad, bd) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] / bd[i];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] = gb[i] - g[i] * ad[i] / (bd[i] * bd[i]);
                }
            }
        }
        Op::AddScalar(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &u)| *d = *d + u);
            }
        }
        Op::MulScalar(x, c) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &u)| *d = *d + *c * u);
            }
        }
        Op::Square(x) => {
            let xd = val(*x);
            let two = T::one() + T::one();
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] = gx[i] + two * xd[i] * g[i];
                }
            }
        }
        Op::Abs(x) => {
            let xd = val(*x);
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    let s = if xd[i] > T::zero() {
                        T::one()
                    } else if xd[i] < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    gx[i] = gx[i] + s * g[i];
                }
            }
        }
        Op::Concat(a, b) => {
            let (sa, sb) = (shape(*a), shape(*b));
            let plane = sa.plane();
            let (la, lb) = (sa.c * plane, sb.c * plane);
            if let Some(ga) = slot(nodes, grads, *a) {
                for n in 0..sa.n {
                    let src = &g[n * (la + lb)..n * (la + lb) + la];
                    ga[n * la..(n + 1) * la]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &u)| *d = *d + u);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for n in 0..sa.n {
                    let src = &g[n * (la + lb) + la..(n + 1) * (la + lb)];
                    gb[n * lb..(n + 1) * lb]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &u)| *d = *d + u);
                }
            }
        }
        Op::ChannelScale(x, s) => {
            let plane = shape(*x).plane();
            let (xd, sd) = (val(*x), val(*s));
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] * sd[i / plane];
                }
            }
            if let Some(gs) = slot(nodes, grads, *s) {
                for (j, acc) in gs.iter_mut().enumerate() {
                    let r = j * plane..(j + 1) * plane;
                    *acc = *acc + g[r.clone()].iter().zip(&xd[r]).map(|(&u, &v)| u * v).sum::<T>();
                }
            }
        }
        Op::SpatialScale(x, s) => {
            let xs = shape(*x);
            let plane = xs.plane();
            let (xd, sd) = (val(*x), val(*s));
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] * sd[(i / (xs.c * plane)) * plane + i % plane];
                }
            }
            if let Some(gs) = slot(nodes, grads, *s) {
                for i in 0..g.len() {
                    let j = (i / (xs.c * plane)) * plane + i % plane;
                    gs[j] = gs[j] + g[i] * xd[i];
                }
            }
        }
        Op::PRelu(x, alpha) => {
            let xs = shape(*x);
            let plane = xs.plane();
            let (xd, ad) = (val(*x), val(*alpha));
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    let d = if xd[i] > T::zero() { T::one() } else { ad[(i / plane) % xs.c] };
                    gx[i] = gx[i] + d * g[i];
                }
            }
            if let Some(ga) = slot(nodes, grads, *alpha) {
                for i in 0..g.len() {
                    if xd[i] <= T::zero() {
                        let c = (i / plane) % xs.c;
                        ga[c] = ga[c] + xd[i] * g[i];
                    }
                }
            }
        }
        Op::Relu(x) => {
            let xd = val(*x);
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    if xd[i] > T::zero() {
                        gx[i] = gx[i] + g[i];
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            let yd = node.value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] * yd[i] * (T::one() - yd[i]);
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch,
        } => {
            let xs = shape(*x);
            let plane = xs.plane();
            let gam = val(*gamma);
            let chan = |i: usize| (i / plane) % xs.c;
            let mut sum_dy = vec![T::zero(); xs.c];
            let mut sum_dy_xhat = vec![T::zero(); xs.c];
            for i in 0..g.len() {
                let c = chan(i);
                sum_dy[c] = sum_dy[c] + g[i];
                sum_dy_xhat[c] = sum_dy_xhat[c] + g[i] * xhat[i];
            }
            if let Some(gg) = slot(nodes, grads, *gamma) {
                gg.iter_mut().zip(&sum_dy_xhat).for_each(|(d, &u)| *d = *d + u);
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                gb.iter_mut().zip(&sum_dy).for_each(|(d, &u)| *d = *d + u);
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                if *batch {
                    let m = T::from_usize(xs.n * plane).unwrap();
                    for i in 0..g.len() {
                        let c = chan(i);
                        // d xhat = dy·gamma, so both sums carry a gamma factor.
                        let t = m * g[i] - sum_dy[c] - xhat[i] * sum_dy_xhat[c];
                        gx[i] = gx[i] + gam[c] * inv_std[c] / m * t;
                    }
                } else {
                    for i in 0..g.len() {
                        let c = chan(i);
                        gx[i] = gx[i] + g[i] * gam[c] * inv_std[c];
                    }
                }
            }
        }
        Op::MaxPool2 { x, argmax } | Op::GlobalMaxPool { x, argmax } | Op::ChannelMax { x, argmax } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (&src, &u) in argmax.iter().zip(g) {
                    gx[src] = gx[src] + u;
                }
            }
        }
        Op::Upsample2(x) => {
            let xs = shape(*x);
            let wo = xs.w * 2;
            if let Some(gx) = slot(nodes, grads, *x) {
                for nc in 0..xs.n * xs.c {
                    let ob = nc * xs.plane() * 4;
                    let ib = nc * xs.plane();
                    for y in 0..xs.h {
                        for xx in 0..xs.w {
                            let o = ob + 2 * y * wo + 2 * xx;
                            let s = g[o] + g[o + 1] + g[o + wo] + g[o + wo + 1];
                            gx[ib + y * xs.w + xx] = gx[ib + y * xs.w + xx] + s;
                        }
                    }
                }
            }
        }
        Op::GlobalAvgPool(x) => {
            let plane = shape(*x).plane();
            let inv = T::one() / T::from_usize(plane).unwrap();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (i, d) in gx.iter_mut().enumerate() {
                    *d = *d + g[i / plane] * inv;
                }
            }
        }
        Op::ChannelMean(x) => {
            let xs = shape(*x);
            let plane = xs.plane();
            let inv = T::one() / T::from_usize(xs.c).unwrap();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (i, d) in gx.iter_mut().enumerate() {
                    *d = *d + g[(i / (xs.c * plane)) * plane + i % plane] * inv;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::Mean(x) => {
            let inv = T::one() / T::from_usize(shape(*x).numel()).unwrap();
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d = *d + g[0] * inv);
            }
        }
    }
}
