//! Dynamically recorded computation graph with reverse-mode differentiation.
//!
//! Every primitive appends one node; node order is therefore a valid topological
//! order and `backward` walks it once in reverse. Gradients reaching a node from
//! several consumers are summed, which is also how tied parameters end up with
//! the total gradient over every place they are used.

use std::cell::RefCell;
use std::collections::HashMap;
use std::str::FromStr;
use std::sync::Arc;

use super::conv::{self, ConvShapes};
use super::float::{gemm, Float};
use super::kernels;
use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Gelu,
    Tanh,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            "leaky_relu" => Ok(Activation::LeakyRelu(0.2)),
            other => Err(Error::config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Over the trailing (embedding) axis.
    Layer,
    /// Over spatial axes, per sample and channel of an `[N, C, H, W]` map.
    Instance,
}

enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Arc<Vec<T>>),
    Scale(Var, T),
    AddScalar(Var),
    AddBias(Var, Var),
    Abs(Var),
    Square(Var),
    Act(Activation, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        sizes: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        pairs: Vec<(usize, usize)>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Norm {
        x: Var,
        gain: Option<Var>,
        shift: Option<Var>,
        xhat: Vec<T>,
        inv: Vec<T>,
        len: usize,
        param_of: ParamIndex,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        shapes: ConvShapes,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        shapes: ConvShapes,
    },
    Bilinear {
        x: Var,
        planes: usize,
        from: (usize, usize),
        to: (usize, usize),
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
}

/// Maps a flat element index to the index of its affine gain/shift entry.
#[derive(Clone, Copy)]
enum ParamIndex {
    Trailing(usize),
    Channel { plane: usize, channels: usize },
}

impl ParamIndex {
    fn of(self, i: usize) -> usize {
        match self {
            ParamIndex::Trailing(d) => i % d,
            ParamIndex::Channel { plane, channels } => (i / plane) % channels,
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward pass worth of recorded operations.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn zip_map<T: Float>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Leaf that never receives gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_arc(&self, t: Arc<Tensor<T>>) -> Var {
        self.push_arc(t, Op::Leaf, false)
    }

    /// Leaf that accumulates gradient (inputs under gradient checking).
    pub fn variable(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Trainable leaf; normally created through a [`Scope`].
    pub fn param(&self, value: Arc<Tensor<T>>) -> Var {
        self.push_arc(value, Op::Param, true)
    }

    /// Cuts the graph: same value, no gradient flows back through the result.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant_arc(value)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va.shape(), vb.shape())?;
        let out = Tensor::new(va.shape(), zip_map(va.data(), vb.data(), |x, y| x + y))?;
        Ok(self.push(out, Op::Add(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va.shape(), vb.shape())?;
        let out = Tensor::new(va.shape(), zip_map(va.data(), vb.data(), |x, y| x - y))?;
        Ok(self.push(out, Op::Sub(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va.shape(), vb.shape())?;
        let out = Tensor::new(va.shape(), zip_map(va.data(), vb.data(), |x, y| x * y))?;
        Ok(self.push(out, Op::Mul(a, b), self.rg(a) || self.rg(b)))
    }

    /// Elementwise product with a constant factor tensor (masks, dropout).
    pub fn mul_const(&self, a: Var, factor: Arc<Vec<T>>) -> Result<Var> {
        let va = self.value(a);
        if factor.len() != va.len() {
            return Err(Error::dim(format!(
                "mul_const: factor has {} elements, input {:?}",
                factor.len(),
                va.shape()
            )));
        }
        let out = Tensor::new(va.shape(), zip_map(va.data(), &factor, |x, y| x * y))?;
        Ok(self.push(out, Op::MulConst(a, factor), self.rg(a)))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), self.rg(a))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), self.rg(a))
    }

    /// `x + b` where `b`'s shape equals the trailing dims of `x`.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let (xs, bs) = (vx.shape(), vb.shape());
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::dim(format!(
                "add_bias: bias {bs:?} is not a trailing shape of {xs:?}"
            )));
        }
        let bl = vb.len();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % bl])
            .collect();
        let out = Tensor::new(xs, data)?;
        Ok(self.push(out, Op::AddBias(x, b), self.rg(x) || self.rg(b)))
    }

    pub fn abs(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, Op::Abs(a), self.rg(a))
    }

    pub fn square(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), self.rg(a))
    }

    pub fn activation(&self, kind: Activation, a: Var) -> Var {
        let out = match kind {
            Activation::Relu => self.value(a).map(|x| x.max(T::zero())),
            Activation::LeakyRelu(s) => {
                let s = T::of(s);
                self.value(a)
                    .map(|x| if x > T::zero() { x } else { x * s })
            }
            Activation::Gelu => self.value(a).map(kernels::gelu),
            Activation::Tanh => self.value(a).map(|x| x.tanh()),
        };
        self.push(out, Op::Act(kind, a), self.rg(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.activation(Activation::Relu, a)
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), self.rg(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / T::of(v.len() as f64));
        self.push(out, Op::Mean(a), self.rg(a))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), self.rg(a)))
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..v.ndim()).collect::<Vec<_>>() {
            return Err(Error::dim(format!(
                "permute: axes {axes:?} invalid for rank {}",
                v.ndim()
            )));
        }
        let src = kernels::permute_indices(v.shape(), axes);
        let data = src.iter().map(|&i| v.data()[i]).collect();
        let shape: Vec<usize> = axes.iter().map(|&ax| v.shape()[ax]).collect();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), self.rg(a)))
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::contract("concat of nothing"))?);
        if axis >= first.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range")));
        }
        let outer: usize = first[..axis].iter().product();
        let mut sizes = Vec::new();
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        let values: Vec<_> = inputs.iter().map(|&v| self.value(v)).collect();
        for v in &values {
            let s = v.shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::dim(format!(
                    "concat: {s:?} incompatible with {first:?} along axis {axis}"
                )));
            }
            out_shape[axis] += s[axis];
            sizes.push(v.len() / outer.max(1));
        }
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for (v, &sz) in values.iter().zip(&sizes) {
                data.extend_from_slice(&v.data()[o * sz..(o + 1) * sz]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                sizes,
            },
            rg,
        ))
    }

    /// `x @ w (+ b)` over the trailing axis of `x`; `w` is `[K, N]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let xs = vx.shape();
        let ws = vw.shape();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(Error::dim(format!(
                "linear: input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let (k, n) = (ws[0], ws[1]);
        let rows = vx.len() / k;
        let mut data = vec![T::zero(); rows * n];
        gemm(false, false, rows, k, n, vx.data(), vw.data(), &mut data, false);
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [n] {
                return Err(Error::dim(format!(
                    "linear: bias {:?}, expected [{n}]",
                    vb.shape()
                )));
            }
            for row in data.chunks_mut(n) {
                for (d, &bv) in row.iter_mut().zip(vb.data()) {
                    *d = *d + bv;
                }
            }
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Linear { x, w, b }, rg))
    }

    /// Batched matrix product `[..., M, K] @ [..., K, N]` with broadcast leading dims.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::dim(format!(
                "matmul: inner extents of {sa:?} and {sb:?} do not match"
            )));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (batch, pairs) = broadcast_batches(&sa[..sa.len() - 2], &sb[..sb.len() - 2])?;
        let mut data = vec![T::zero(); pairs.len() * m * n];
        for (bi, &(ia, ib)) in pairs.iter().enumerate() {
            gemm(
                false,
                false,
                m,
                k,
                n,
                &va.data()[ia * m * k..(ia + 1) * m * k],
                &vb.data()[ib * k * n..(ib + 1) * k * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Matmul {
                a,
                b,
                m,
                k,
                n,
                pairs,
            },
            rg,
        ))
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if axis >= s.len() {
            return Err(Error::dim(format!("softmax axis {axis} out of range for {s:?}")));
        }
        if v.data().iter().any(|x| x.is_nan()) {
            return Err(Error::numeric("softmax input contains NaN"));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let data = if inner == 1 {
            kernels::softmax_rows(v.data(), len)
        } else {
            strided_rows(v.data(), outer, len, inner, |row| kernels::softmax_rows(row, len))
        };
        let out = Tensor::new(s, data)?;
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            self.rg(x),
        ))
    }

    /// Layer or instance normalization with optional affine gain/shift.
    pub fn normalize(
        &self,
        x: Var,
        kind: NormKind,
        gain: Option<Var>,
        shift: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        let (len, param_of, pshape) = match kind {
            NormKind::Layer => {
                let d = *s.last().ok_or_else(|| Error::dim("layer norm of a scalar"))?;
                (d, ParamIndex::Trailing(d), vec![d])
            }
            NormKind::Instance => {
                if s.len() != 4 {
                    return Err(Error::dim(format!("instance norm expects [N,C,H,W], got {s:?}")));
                }
                (
                    s[2] * s[3],
                    ParamIndex::Channel {
                        plane: s[2] * s[3],
                        channels: s[1],
                    },
                    vec![s[1]],
                )
            }
        };
        for p in [gain, shift].into_iter().flatten() {
            if self.shape(p) != pshape {
                return Err(Error::dim(format!(
                    "normalize: affine shape {:?}, expected {pshape:?}",
                    self.shape(p)
                )));
            }
        }
        let (xhat, inv) = kernels::normalize_groups(v.data(), len, eps);
        let mut data = xhat.clone();
        if let Some(g) = gain {
            let g = self.value(g);
            for (i, d) in data.iter_mut().enumerate() {
                *d = *d * g.data()[param_of.of(i)];
            }
        }
        if let Some(b) = shift {
            let b = self.value(b);
            for (i, d) in data.iter_mut().enumerate() {
                *d = *d + b.data()[param_of.of(i)];
            }
        }
        let rg = self.rg(x) || [gain, shift].into_iter().flatten().any(|p| self.rg(p));
        let out = Tensor::new(s, data)?;
        Ok(self.push(
            out,
            Op::Norm {
                x,
                gain,
                shift,
                xhat,
                inv,
                len,
                param_of,
            },
            rg,
        ))
    }

    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let vb = b.map(|b| self.value(b));
        let shapes = conv::conv2d_shapes(
            vx.shape(),
            vw.shape(),
            vb.as_ref().map(|b| b.shape()),
            stride,
            padding,
        )?;
        let data = conv::conv2d_forward(&shapes, vx.data(), vw.data(), vb.as_ref().map(|b| b.data()));
        let shape = [shapes.n, shapes.f, shapes.geom.hs, shapes.geom.ws];
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Conv2d { x, w, b, shapes }, rg))
    }

    /// Transposed convolution; weight layout `[C_in, F_out, k, k]`.
    pub fn conv_transpose2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let vb = b.map(|b| self.value(b));
        let shapes = conv::conv_transpose2d_shapes(
            vx.shape(),
            vw.shape(),
            vb.as_ref().map(|b| b.shape()),
            stride,
            padding,
            output_padding,
        )?;
        let data = conv::conv_transpose2d_forward(
            &shapes,
            vx.data(),
            vw.data(),
            vb.as_ref().map(|b| b.data()),
        );
        let shape = [shapes.n, shapes.f, shapes.geom.hb, shapes.geom.wb];
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::ConvTranspose2d { x, w, b, shapes },
            rg,
        ))
    }

    /// Bilinear resize of the two trailing axes (half-pixel centers).
    pub fn bilinear(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(Error::dim(format!("bilinear: invalid resize of {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = v.len() / (h * w);
        let data = kernels::bilinear_forward(v.data(), planes, (h, w), (out_h, out_w));
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Bilinear {
                x,
                planes,
                from: (h, w),
                to: (out_h, out_w),
            },
            self.rg(x),
        ))
    }

    /// Non-overlapping `k x k` max pooling over the two trailing axes.
    pub fn maxpool(&self, x: Var, k: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() < 2 || k == 0 || !s[s.len() - 2].is_multiple_of(k) || !s[s.len() - 1].is_multiple_of(k) {
            return Err(Error::dim(format!("maxpool: {s:?} not divisible by {k}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = v.len() / (h * w);
        let (data, arg) = kernels::maxpool_forward(v.data(), planes, (h, w), k);
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] = h / k;
        shape[r - 1] = w / k;
        Ok(self.push(Tensor::new(&shape, data)?, Op::MaxPool { x, arg }, self.rg(x)))
    }

    /// Reverse sweep from a scalar sink.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = |v: Var, d: Vec<T>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (e, x) in existing.iter_mut().zip(d) {
                            *e = *e + x;
                        }
                    }
                    slot => *slot = Some(d),
                }
            };
            let val = |v: Var| nodes[v.0].value.clone();
            let rg = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf | Op::Param => unreachable!(),
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.iter().map(|&x| -x).collect());
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, zip_map(&g, vb.data(), |x, y| x * y));
                    acc(*b, zip_map(&g, va.data(), |x, y| x * y));
                }
                Op::MulConst(a, f) => acc(*a, zip_map(&g, f, |x, y| x * y)),
                Op::Scale(a, s) => acc(*a, g.iter().map(|&x| x * *s).collect()),
                Op::AddScalar(a) => acc(*a, g),
                Op::AddBias(x, b) => {
                    if rg(*b) {
                        let bl = val(*b).len();
                        let mut db = vec![T::zero(); bl];
                        for (j, &x) in g.iter().enumerate() {
                            db[j % bl] = db[j % bl] + x;
                        }
                        acc(*b, db);
                    }
                    acc(*x, g);
                }
                Op::Abs(a) => {
                    let va = val(*a);
                    acc(*a, zip_map(&g, va.data(), |x, y| x * y.signum_or_zero()));
                }
                Op::Square(a) => {
                    let va = val(*a);
                    acc(*a, zip_map(&g, va.data(), |x, y| x * (y + y)));
                }
                Op::Act(kind, a) => {
                    let va = val(*a);
                    let d = match kind {
                        Activation::Relu => zip_map(&g, va.data(), |x, y| {
                            if y > T::zero() {
                                x
                            } else {
                                T::zero()
                            }
                        }),
                        Activation::LeakyRelu(s) => {
                            let s = T::of(*s);
                            zip_map(&g, va.data(), |x, y| if y > T::zero() { x } else { x * s })
                        }
                        Activation::Gelu => {
                            zip_map(&g, va.data(), |x, y| x * kernels::gelu_grad(y))
                        }
                        Activation::Tanh => zip_map(&g, node.value.data(), |x, y| {
                            x * (T::one() - y * y)
                        }),
                    };
                    acc(*a, d);
                }
                Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
                Op::Mean(a) => {
                    let n = val(*a).len();
                    acc(*a, vec![g[0] / T::of(n as f64); n]);
                }
                Op::Reshape(a) => acc(*a, g),
                Op::Permute(a, axes) => {
                    let src = kernels::permute_indices(val(*a).shape(), axes);
                    let mut d = vec![T::zero(); g.len()];
                    for (o, &s) in src.iter().enumerate() {
                        d[s] = g[o];
                    }
                    acc(*a, d);
                }
                Op::Concat {
                    inputs,
                    outer,
                    sizes,
                } => {
                    let total: usize = sizes.iter().sum();
                    let mut offset = 0;
                    for (v, &sz) in inputs.iter().zip(sizes) {
                        if rg(*v) {
                            let mut d = Vec::with_capacity(outer * sz);
                            for o in 0..*outer {
                                let base = o * total + offset;
                                d.extend_from_slice(&g[base..base + sz]);
                            }
                            acc(*v, d);
                        }
                        offset += sz;
                    }
                }
                Op::Linear { x, w, b } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let (k, n) = (vw.shape()[0], vw.shape()[1]);
                    let rows = vx.len() / k;
                    if let Some(b) = b {
                        if rg(*b) {
                            let mut db = vec![T::zero(); n];
                            for row in g.chunks(n) {
                                for (d, &x) in db.iter_mut().zip(row) {
                                    *d = *d + x;
                                }
                            }
                            acc(*b, db);
                        }
                    }
                    if rg(*w) {
                        let mut dw = vec![T::zero(); k * n];
                        gemm(true, false, k, rows, n, vx.data(), &g, &mut dw, false);
                        acc(*w, dw);
                    }
                    if rg(*x) {
                        let mut dx = vec![T::zero(); rows * k];
                        gemm(false, true, rows, n, k, &g, vw.data(), &mut dx, false);
                        acc(*x, dx);
                    }
                }
                Op::Matmul {
                    a,
                    b,
                    m,
                    k,
                    n,
                    pairs,
                } => {
                    let (va, vb) = (val(*a), val(*b));
                    let (m, k, n) = (*m, *k, *n);
                    if rg(*a) {
                        let mut da = vec![T::zero(); va.len()];
                        for (bi, &(ia, ib)) in pairs.iter().enumerate() {
                            gemm(
                                false,
                                true,
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                &vb.data()[ib * k * n..(ib + 1) * k * n],
                                &mut da[ia * m * k..(ia + 1) * m * k],
                                true,
                            );
                        }
                        acc(*a, da);
                    }
                    if rg(*b) {
                        let mut db = vec![T::zero(); vb.len()];
                        for (bi, &(ia, ib)) in pairs.iter().enumerate() {
                            gemm(
                                true,
                                false,
                                k,
                                m,
                                n,
                                &va.data()[ia * m * k..(ia + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut db[ib * k * n..(ib + 1) * k * n],
                                true,
                            );
                        }
                        acc(*b, db);
                    }
                }
                Op::Softmax {
                    x,
                    outer,
                    len,
                    inner,
                } => {
                    let y = node.value.data();
                    let d = if *inner == 1 {
                        kernels::softmax_rows_backward(y, &g, *len)
                    } else {
                        let yt = gather_rows(y, *outer, *len, *inner);
                        let gt = gather_rows(&g, *outer, *len, *inner);
                        let dt = kernels::softmax_rows_backward(&yt, &gt, *len);
                        scatter_rows(&dt, *outer, *len, *inner)
                    };
                    acc(*x, d);
                }
                Op::Norm {
                    x,
                    gain,
                    shift,
                    xhat,
                    inv,
                    len,
                    param_of,
                } => {
                    if let Some(b) = shift {
                        if rg(*b) {
                            let mut db = vec![T::zero(); val(*b).len()];
                            for (j, &x) in g.iter().enumerate() {
                                let p = param_of.of(j);
                                db[p] = db[p] + x;
                            }
                            acc(*b, db);
                        }
                    }
                    let dxhat = match gain {
                        Some(gv) => {
                            let gval = val(*gv);
                            if rg(*gv) {
                                let mut dg = vec![T::zero(); gval.len()];
                                for (j, (&x, &h)) in g.iter().zip(xhat).enumerate() {
                                    let p = param_of.of(j);
                                    dg[p] = dg[p] + x * h;
                                }
                                acc(*gv, dg);
                            }
                            g.iter()
                                .enumerate()
                                .map(|(j, &x)| x * gval.data()[param_of.of(j)])
                                .collect()
                        }
                        None => g,
                    };
                    if rg(*x) {
                        acc(*x, kernels::normalize_groups_backward(xhat, inv, &dxhat, *len));
                    }
                }
                Op::Conv2d { x, w, b, shapes } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let (dx, dw, db) =
                        conv::conv2d_backward(shapes, vx.data(), vw.data(), &g, rg(*x), rg(*w));
                    if let Some(b) = b {
                        acc(*b, db);
                    }
                    if let Some(dw) = dw {
                        acc(*w, dw);
                    }
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                }
                Op::ConvTranspose2d { x, w, b, shapes } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let (dx, dw, db) = conv::conv_transpose2d_backward(
                        shapes,
                        vx.data(),
                        vw.data(),
                        &g,
                        rg(*x),
                        rg(*w),
                    );
                    if let Some(b) = b {
                        acc(*b, db);
                    }
                    if let Some(dw) = dw {
                        acc(*w, dw);
                    }
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                }
                Op::Bilinear {
                    x,
                    planes,
                    from,
                    to,
                } => acc(*x, kernels::bilinear_backward(&g, *planes, *from, *to)),
                Op::MaxPool { x, arg } => {
                    let mut d = vec![T::zero(); val(*x).len()];
                    for (&a, &x) in arg.iter().zip(&g) {
                        d[a] = d[a] + x;
                    }
                    acc(*x, d);
                }
            }
        }
        let leaves = nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match n.op {
                Op::Leaf | Op::Param => g,
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> Self;
}

impl<T: Float> SignumOrZero for T {
    fn signum_or_zero(self) -> Self {
        if self > T::zero() {
            T::one()
        } else if self < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    }
}

fn gather_rows<T: Float>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for o in 0..outer {
        for i in 0..inner {
            for l in 0..len {
                out.push(x[(o * len + l) * inner + i]);
            }
        }
    }
    out
}

fn scatter_rows<T: Float>(rows: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows.len()];
    let mut it = rows.iter();
    for o in 0..outer {
        for i in 0..inner {
            for l in 0..len {
                out[(o * len + l) * inner + i] = *it.next().unwrap();
            }
        }
    }
    out
}

fn strided_rows<T: Float>(
    x: &[T],
    outer: usize,
    len: usize,
    inner: usize,
    f: impl Fn(&[T]) -> Vec<T>,
) -> Vec<T> {
    let rows = gather_rows(x, outer, len, inner);
    let out: Vec<T> = rows.chunks(len).flat_map(&f).collect();
    scatter_rows(&out, outer, len, inner)
}

/// Broadcast leading batch dims (numpy rules); returns output batch shape and,
/// per output batch item, the flat batch index into each operand.
fn broadcast_batches(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Vec<(usize, usize)>)> {
    let r = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; r - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(r);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x != y && x != 1 && y != 1 {
            return Err(Error::dim(format!(
                "matmul: batch dims {a:?} and {b:?} are not broadcastable"
            )));
        }
        out.push(x.max(y));
    }
    let sa = kernels::strides(&pa);
    let sb = kernels::strides(&pb);
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; r];
    let mut pairs = Vec::with_capacity(total);
    for _ in 0..total {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..r {
            if pa[d] != 1 {
                ia += idx[d] * sa[d];
            }
            if pb[d] != 1 {
                ib += idx[d] * sb[d];
            }
        }
        pairs.push((ia, ib));
        for d in (0..r).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out, pairs))
}

/// Gradients of the leaves of one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a leaf; `None` when it received none (e.g. constants).
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every bound parameter leaf into its store entry.
    pub fn accumulate_into(&self, scope: &Scope<'_, T>, store: &mut ParamStore<T>) {
        for (id, var) in scope.bindings() {
            if let Some(g) = self.get(var) {
                store.accumulate_grad(id, g);
            }
        }
    }
}

/// Binds parameters of one store into a graph. Each parameter becomes a single
/// leaf no matter how many modules read it; a frozen scope binds them as constants.
pub struct Scope<'a, T> {
    pub graph: &'a Graph<T>,
    store: &'a ParamStore<T>,
    frozen: bool,
    bound: RefCell<HashMap<ParamId, Var>>,
}

impl<'a, T: Float> Scope<'a, T> {
    pub fn new(graph: &'a Graph<T>, store: &'a ParamStore<T>) -> Self {
        Self {
            graph,
            store,
            frozen: false,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn frozen(graph: &'a Graph<T>, store: &'a ParamStore<T>) -> Self {
        Self {
            frozen: true,
            ..Self::new(graph, store)
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&id) {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = if self.frozen {
            self.graph.constant_arc(value)
        } else {
            self.graph.param(value)
        };
        self.bound.borrow_mut().insert(id, v);
        v
    }

    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        let mut b: Vec<_> = self.bound.borrow().iter().map(|(&k, &v)| (k, v)).collect();
        b.sort_by_key(|(id, _)| *id);
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_broadcasts_batch() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::ones(&[3, 5, 4]));
        let b = g.constant(Tensor::ones(&[4, 2]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), vec![3, 5, 2]);
        assert!(g.value(c).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn softmax_cases() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[0.0, 2f64.ln(), 5.0, 5.0]));
        let y = g.value(g.softmax(x, 1).unwrap());
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(&y.data()[2..], &[0.5, 0.5]);

        let nan = g.constant(t(&[2], &[0.0, f64::NAN]));
        assert!(matches!(g.softmax(nan, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_inner_axis() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[0.0, 1.0, 2f64.ln(), 1.0]));
        let y = g.value(g.softmax(x, 0).unwrap());
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((y.data()[2] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(y.data()[1], 0.5);
    }

    #[test]
    fn layer_norm_hand_values() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.value(g.normalize(x, NormKind::Layer, None, None, 1e-12).unwrap());
        let r = (1.5f64).sqrt();
        for (a, b) in y.data().iter().zip([-r, 0.0, r]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 2, 3, 3], 4.0));
        let y = g.value(g.normalize(x, NormKind::Instance, None, None, 1e-5).unwrap());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn activations() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        assert_eq!(g.value(g.relu(x)).data(), &[0.0, 2.0]);
        let z = g.constant(t(&[1], &[0.0]));
        assert_eq!(g.value(g.activation(Activation::Tanh, z)).data(), &[0.0]);
        assert_eq!(g.value(g.activation(Activation::Gelu, z)).data(), &[0.0]);
        assert!("swish".parse::<Activation>().is_err());
    }

    #[test]
    fn fan_out_gradients_add() {
        // f(x) = g(x) + g(x) must have the gradient of 2 g(x)
        let g = Graph::<f64>::new();
        let x = g.variable(t(&[3], &[0.3, -1.2, 2.0]));
        let sq = g.square(x);
        let twice = g.add(sq, sq).unwrap();
        let loss = g.sum(twice);
        let grads = g.backward(loss).unwrap();
        let g2 = Graph::<f64>::new();
        let x2 = g2.variable(t(&[3], &[0.3, -1.2, 2.0]));
        let loss2 = g2.sum(g2.scale(g2.square(x2), 2.0));
        let grads2 = g2.backward(loss2).unwrap();
        assert_eq!(grads.get(x).unwrap(), grads2.get(x2).unwrap());
    }

    #[test]
    fn detached_values_receive_no_gradient() {
        let g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let d = g.detach(x);
        let loss = g.sum(g.mul(x, d).unwrap());
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 2.0]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn concat_along_channels() {
        let g = Graph::<f64>::new();
        let a = g.constant(t(&[1, 1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[1, 2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), vec![1, 3, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
