use std::sync::Arc;

use crate::conv::{col2im, im2col, transpose, ConvGeom};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::real::Real;
use crate::resample::Resampler;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Upsample2x(Var),
    ConcatChannels(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    ConcatBatch(Vec<Var>),
    SliceBatch { x: Var, start: usize },
    Reshape(Var),
    Clamp { x: Var, lo: T, hi: T },
    Resample { x: Var, plan: Arc<Resampler> },
    BlendMask { a: Var, b: Var, mask: Arc<Vec<T>> },
    SoftmaxChannels(Var),
    MulBroadcast { x: Var, m: Var },
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    SoftmaxRows(Var),
    Mse { x: Var, target: Arc<Tensor<T>> },
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended as operations execute; a call to
/// [`Graph::backward`] walks them in reverse.
pub struct Graph<'p, T: Real> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self { store, nodes: Vec::new(), param_vars: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Inserts a value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a new constant node, cutting
    /// the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, cin, h, wd] = self.shape(x);
        let [cout, wcin, k, k2] = self.shape(w);
        if wcin != cin || k != k2 {
            return Err(shape_err("conv2d", format!("input {:?} vs kernel {:?}", self.shape(x), self.shape(w))));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(shape_err("conv2d", format!("bias length {} for {cout} outputs", self.value(b).len())));
            }
        }
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {k} does not fit {h}x{wd}")))?;
        let (rows, ncols) = (geom.rows(), geom.cols());
        let mut out = Tensor::zeros([n, cout, geom.ho, geom.wo]);
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * ncols] };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bias = b.map(|b| self.value(b).data().to_vec());
            let od = out.data_mut();
            for img in 0..n {
                let xs = &xv[img * cin * h * wd..(img + 1) * cin * h * wd];
                let os = &mut od[img * cout * ncols..(img + 1) * cout * ncols];
                if let Some(bias) = &bias {
                    for (c, chunk) in os.chunks_exact_mut(ncols).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = bias[c]);
                    }
                }
                let beta = if bias.is_some() { T::one() } else { T::zero() };
                let colm: &[T] = if geom.is_pointwise() {
                    xs
                } else {
                    im2col(&geom, xs, &mut cols);
                    &cols
                };
                T::gemm(false, false, cout, ncols, rows, T::one(), wv, colm, beta, os);
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for (sp, dp) in src.chunks_exact(h * w).zip(dst.chunks_exact_mut(4 * h * w)) {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dp[y * 2 * w + xx] = sp[(y / 2) * w + xx / 2];
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Upsample2x(x), rg)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| shape_err("concat_channels", "no inputs".into()))?;
        let [n, _, h, w] = self.shape(first);
        let mut ctot = 0;
        for &v in xs {
            let [vn, vc, vh, vw] = self.shape(v);
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_err("concat_channels", format!("{:?} vs {:?}", self.shape(first), self.shape(v))));
            }
            ctot += vc;
        }
        let plane = h * w;
        let mut out = Tensor::zeros([n, ctot, h, w]);
        {
            let dst = out.data_mut();
            for img in 0..n {
                let mut off = img * ctot * plane;
                for &v in xs {
                    let c = self.shape(v)[1];
                    let src = &self.value(v).data()[img * c * plane..(img + 1) * c * plane];
                    dst[off..off + c * plane].copy_from_slice(src);
                    off += c * plane;
                }
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(out, Op::ConcatChannels(xs.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if start + len > c || len == 0 {
            return Err(shape_err("slice_channels", format!("[{start}, {}) of {c}", start + len)));
        }
        let plane = h * w;
        let mut out = Tensor::zeros([n, len, h, w]);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for img in 0..n {
                let s = (img * c + start) * plane;
                dst[img * len * plane..(img + 1) * len * plane].copy_from_slice(&src[s..s + len * plane]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceChannels { x, start }, rg))
    }

    pub fn concat_batch(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| shape_err("concat_batch", "no inputs".into()))?;
        let [_, c, h, w] = self.shape(first);
        let mut data = Vec::new();
        let mut n = 0;
        for &v in xs {
            let [vn, vc, vh, vw] = self.shape(v);
            if (vc, vh, vw) != (c, h, w) {
                return Err(shape_err("concat_batch", format!("{:?} vs {:?}", self.shape(first), self.shape(v))));
            }
            n += vn;
            data.extend_from_slice(self.value(v).data());
        }
        let out = Tensor::from_vec([n, c, h, w], data)?;
        let rg = self.rg(xs);
        Ok(self.push(out, Op::ConcatBatch(xs.to_vec()), rg))
    }

    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if start + len > n || len == 0 {
            return Err(shape_err("slice_batch", format!("[{start}, {}) of {n}", start + len)));
        }
        let per = c * h * w;
        let data = self.value(x).data()[start * per..(start + len) * per].to_vec();
        let out = Tensor::from_vec([len, c, h, w], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceBatch { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: [usize; 4]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Clamps to `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(&[x]);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    /// Applies a fixed resampling map to every plane of `x`.
    pub fn resample(&mut self, x: Var, plan: Arc<Resampler>) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if (h, w) != (plan.in_h, plan.in_w) {
            return Err(shape_err("resample", format!("plane {h}x{w} vs plan {}x{}", plan.in_h, plan.in_w)));
        }
        let mut out = Tensor::zeros([n, c, plan.out_h, plan.out_w]);
        plan.apply(self.value(x).data(), out.data_mut());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Resample { x, plan }, rg))
    }

    /// `a * (1 - mask) + b * mask`, with a per-pixel mask shared across
    /// channels and batch.
    pub fn blend_mask(&mut self, a: Var, b: Var, mask: Arc<Vec<T>>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("blend_mask", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let plane = self.value(a).plane();
        if mask.len() != plane {
            return Err(shape_err("blend_mask", format!("mask of {} for plane {plane}", mask.len())));
        }
        let mut out = Tensor::zeros(self.shape(a));
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for ((o, a), b) in out
                .data_mut()
                .chunks_exact_mut(plane)
                .zip(av.chunks_exact(plane))
                .zip(bv.chunks_exact(plane))
            {
                for i in 0..plane {
                    let m = mask[i];
                    o[i] = a[i] * (T::one() - m) + b[i] * m;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::BlendMask { a, b, mask }, rg))
    }

    /// Softmax across the channel axis at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let plane = h * w;
        let mut out = self.value(x).clone();
        for img in out.data_mut().chunks_exact_mut(c * plane) {
            for p in 0..plane {
                let mut mx = T::neg_infinity();
                for ch in 0..c {
                    mx = mx.max(img[ch * plane + p]);
                }
                let mut s = T::zero();
                for ch in 0..c {
                    let e = (img[ch * plane + p] - mx).exp();
                    img[ch * plane + p] = e;
                    s = s + e;
                }
                for ch in 0..c {
                    img[ch * plane + p] = img[ch * plane + p] / s;
                }
            }
        }
        let _ = n;
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxChannels(x), rg)
    }

    /// `x * m` where `m` has a single channel broadcast across the channels of `x`.
    pub fn mul_broadcast(&mut self, x: Var, m: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if self.shape(m) != [n, 1, h, w] {
            return Err(shape_err("mul_broadcast", format!("{:?} vs {:?}", self.shape(x), self.shape(m))));
        }
        let plane = h * w;
        let mut out = self.value(x).clone();
        {
            let mv = self.value(m).data();
            for (img, chunk) in out.data_mut().chunks_exact_mut(c * plane).enumerate() {
                let ms = &mv[img * plane..(img + 1) * plane];
                for ch in chunk.chunks_exact_mut(plane) {
                    for (v, &mm) in ch.iter_mut().zip(ms) {
                        *v = *v * mm;
                    }
                }
            }
        }
        let rg = self.rg(&[x, m]);
        Ok(self.push(out, Op::MulBroadcast { x, m }, rg))
    }

    fn mat_dims(&self, v: Var, trans: bool) -> Result<(usize, usize)> {
        let [n, c, r, k] = self.shape(v);
        if n != 1 || c != 1 {
            return Err(shape_err("matmul", format!("expected [1, 1, r, c], got {:?}", self.shape(v))));
        }
        Ok(if trans { (k, r) } else { (r, k) })
    }

    /// Matrix product of `[1, 1, r, c]` tensors with optional transposes.
    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (m, ka) = self.mat_dims(a, ta)?;
        let (kb, n) = self.mat_dims(b, tb)?;
        if ka != kb {
            return Err(shape_err("matmul", format!("inner dims {ka} vs {kb}")));
        }
        let mut out = Tensor::zeros([1, 1, m, n]);
        T::gemm(ta, tb, m, n, ka, T::one(), self.value(a).data(), self.value(b).data(), T::zero(), out.data_mut());
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, ta, b, tb }, rg))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let cols = self.shape(x)[3];
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(cols) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Mean squared error against a constant target, as a scalar node.
    pub fn mse(&mut self, x: Var, target: Arc<Tensor<T>>) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", self.shape(x), target.shape())));
        }
        let n = T::from_f64(target.len() as f64);
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { x, target }, rg))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let mut s = T::zero();
        for &v in xs {
            if self.shape(v) != [1, 1, 1, 1] {
                return Err(shape_err("sum", format!("non-scalar {:?}", self.shape(v))));
            }
            s = s + self.value(v).data()[0];
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::scalar(s), Op::Sum(xs.to_vec()), rg))
    }

    /// Reverse pass from a scalar node; returns gradients for every
    /// parameter that was used.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_seeded(loss, T::one())
    }

    /// Like [`Graph::backward`] with the output gradient set to `seed`.
    pub fn backward_seeded(&self, loss: Var, seed: T) -> Result<Gradients<T>> {
        if self.shape(loss) != [1, 1, 1, 1] {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut params = Gradients::for_store(self.store);
        if !self.requires_grad(loss) {
            return Ok(params);
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(seed));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, &mut params);
        }
        Ok(params)
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut Tensor<T>)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let t = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(t);
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        params: &mut Gradients<T>,
    ) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.accumulate(*id, &g),
            Op::Conv2d { x, w, b, stride, pad } => self.conv_backward(*x, *w, *b, *stride, *pad, &g, grads),
            Op::Relu(x) => {
                let out = &node.value;
                let mut gx = g;
                for (gv, &o) in gx.data_mut().iter_mut().zip(out.data()) {
                    if o <= T::zero() {
                        *gv = T::zero();
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Add(a, b) => {
                self.acc(grads, *b, g.clone());
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, g.map(|v| -v));
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = Tensor::from_vec(g.shape(), g.data().iter().zip(bv.data()).map(|(&g, &b)| g * b).collect())
                    .expect("same shape");
                let gb = Tensor::from_vec(g.shape(), g.data().iter().zip(av.data()).map(|(&g, &a)| g * a).collect())
                    .expect("same shape");
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(grads, *x, g.map(|v| v * c));
            }
            Op::Upsample2x(x) => {
                let [_, _, h, w] = self.shape(*x);
                self.acc_with(grads, *x, |gx| {
                    for (dp, sp) in gx.data_mut().chunks_exact_mut(h * w).zip(g.data().chunks_exact(4 * h * w)) {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let d = &mut dp[(y / 2) * w + xx / 2];
                                *d = *d + sp[y * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::ConcatChannels(xs) => {
                let [n, ctot, h, w] = g.shape();
                let plane = h * w;
                let mut off = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    let mut part = Tensor::zeros([n, c, h, w]);
                    for img in 0..n {
                        let s = (img * ctot + off) * plane;
                        part.data_mut()[img * c * plane..(img + 1) * c * plane]
                            .copy_from_slice(&g.data()[s..s + c * plane]);
                    }
                    off += c;
                    self.acc(grads, v, part);
                }
            }
            Op::SliceChannels { x, start } => {
                let [n, c, h, w] = self.shape(*x);
                let len = g.shape()[1];
                let plane = h * w;
                self.acc_with(grads, *x, |gx| {
                    for img in 0..n {
                        let dst = &mut gx.data_mut()[(img * c + start) * plane..(img * c + start + len) * plane];
                        let src = &g.data()[img * len * plane..(img + 1) * len * plane];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                });
            }
            Op::ConcatBatch(xs) => {
                let mut off = 0;
                for &v in xs {
                    let sz = self.value(v).len();
                    let part = Tensor::from_vec(self.shape(v), g.data()[off..off + sz].to_vec()).expect("sized");
                    off += sz;
                    self.acc(grads, v, part);
                }
            }
            Op::SliceBatch { x, start } => {
                let per: usize = g.shape()[1..].iter().product();
                self.acc_with(grads, *x, |gx| {
                    let dst = &mut gx.data_mut()[start * per..start * per + g.len()];
                    for (d, &s) in dst.iter_mut().zip(g.data()) {
                        *d = *d + s;
                    }
                });
            }
            Op::Reshape(x) => {
                let gx = g.reshape(self.shape(*x)).expect("same numel");
                self.acc(grads, *x, gx);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let mut gx = g;
                for (gv, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                    if v < *lo || v > *hi {
                        *gv = T::zero();
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Resample { x, plan } => {
                self.acc_with(grads, *x, |gx| plan.apply_adjoint(g.data(), gx.data_mut()));
            }
            Op::BlendMask { a, b, mask } => {
                let plane = mask.len();
                let mut ga = g.clone();
                let mut gb = g;
                for (ca, cb) in ga.data_mut().chunks_exact_mut(plane).zip(gb.data_mut().chunks_exact_mut(plane)) {
                    for i in 0..plane {
                        ca[i] = ca[i] * (T::one() - mask[i]);
                        cb[i] = cb[i] * mask[i];
                    }
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::SoftmaxChannels(x) => {
                let [_, c, h, w] = node.value.shape();
                let plane = h * w;
                let y = node.value.data();
                let mut gx = g;
                for (gi, yi) in gx.data_mut().chunks_exact_mut(c * plane).zip(y.chunks_exact(c * plane)) {
                    for p in 0..plane {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            dot = dot + gi[ch * plane + p] * yi[ch * plane + p];
                        }
                        for ch in 0..c {
                            let k = ch * plane + p;
                            gi[k] = yi[k] * (gi[k] - dot);
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::MulBroadcast { x, m } => {
                let [n, c, h, w] = self.shape(*x);
                let plane = h * w;
                let (xv, mv) = (self.value(*x).data(), self.value(*m).data());
                if self.requires_grad(*x) {
                    let mut gx = g.clone();
                    for (img, chunk) in gx.data_mut().chunks_exact_mut(c * plane).enumerate() {
                        let ms = &mv[img * plane..(img + 1) * plane];
                        for ch in chunk.chunks_exact_mut(plane) {
                            for (v, &mm) in ch.iter_mut().zip(ms) {
                                *v = *v * mm;
                            }
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                if self.requires_grad(*m) {
                    let mut gm = Tensor::zeros([n, 1, h, w]);
                    for img in 0..n {
                        let dst = &mut gm.data_mut()[img * plane..(img + 1) * plane];
                        for ch in 0..c {
                            let off = (img * c + ch) * plane;
                            for p in 0..plane {
                                dst[p] = dst[p] + g.data()[off + p] * xv[off + p];
                            }
                        }
                    }
                    self.acc(grads, *m, gm);
                }
            }
            Op::MatMul { a, ta, b, tb } => {
                let (m, k) = self.mat_dims(*a, *ta).expect("checked in forward");
                let n = self.mat_dims(*b, *tb).expect("checked in forward").1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // C = op(A) op(B); dop(A) = G op(B)^T, dop(B) = op(A)^T G.
                if self.requires_grad(*a) {
                    let mut ga = Tensor::zeros(self.shape(*a));
                    if *ta {
                        // A stored k x m: dA = op(B) G^T  (k x m)
                        T::gemm(*tb, true, k, m, n, T::one(), bv, g.data(), T::zero(), ga.data_mut());
                    } else {
                        T::gemm(false, !*tb, m, k, n, T::one(), g.data(), bv, T::zero(), ga.data_mut());
                    }
                    self.acc(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = Tensor::zeros(self.shape(*b));
                    if *tb {
                        // B stored n x k: dB = G^T op(A)  (n x k)
                        T::gemm(true, *ta, n, k, m, T::one(), g.data(), av, T::zero(), gb.data_mut());
                    } else {
                        T::gemm(!*ta, false, k, n, m, T::one(), av, g.data(), T::zero(), gb.data_mut());
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::SoftmaxRows(x) => {
                let cols = node.value.shape()[3];
                let mut gx = g;
                for (gr, yr) in gx.data_mut().chunks_exact_mut(cols).zip(node.value.data().chunks_exact(cols)) {
                    let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&g, &y)| a + g * y);
                    for (gv, &y) in gr.iter_mut().zip(yr) {
                        *gv = y * (*gv - dot);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Mse { x, target } => {
                let s = g.data()[0] * T::from_f64(2.0 / target.len() as f64);
                let xv = self.value(*x);
                let gx = Tensor::from_vec(
                    xv.shape(),
                    xv.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * s).collect(),
                )
                .expect("same shape");
                self.acc(grads, *x, gx);
            }
            Op::Sum(xs) => {
                for &v in xs {
                    self.acc(grads, v, g.clone());
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let [n, cin, h, wd] = self.shape(x);
        let [cout, _, k, _] = self.shape(w);
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad).expect("validated in forward");
        let (rows, ncols) = (geom.rows(), geom.cols());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gd = g.data();

        if let Some(b) = b {
            if self.requires_grad(b) {
                let mut gb = Tensor::zeros(self.shape(b));
                for img in 0..n {
                    for c in 0..cout {
                        let s = gd[(img * cout + c) * ncols..(img * cout + c + 1) * ncols]
                            .iter()
                            .fold(T::zero(), |a, &v| a + v);
                        gb.data_mut()[c] = gb.data_mut()[c] + s;
                    }
                }
                self.acc(grads, b, gb);
            }
        }

        let need_w = self.requires_grad(w);
        let need_x = self.requires_grad(x);
        let mut cols = if geom.is_pointwise() || !need_w { Vec::new() } else { vec![T::zero(); rows * ncols] };
        let mut cols_t = if need_w { vec![T::zero(); rows * ncols] } else { Vec::new() };
        let mut dcols = if geom.is_pointwise() || !need_x { Vec::new() } else { vec![T::zero(); rows * ncols] };
        let mut gw = if need_w { Some(Tensor::zeros(self.shape(w))) } else { None };
        let mut gx = if need_x { Some(Tensor::zeros(self.shape(x))) } else { None };

        for img in 0..n {
            let xs = &xv[img * cin * h * wd..(img + 1) * cin * h * wd];
            let gs = &gd[img * cout * ncols..(img + 1) * cout * ncols];
            if let Some(gw) = gw.as_mut() {
                // dW (cout x rows) += G (cout x ncols) * cols^T, with cols^T
                // materialised so the product avoids a transposed operand.
                if geom.is_pointwise() {
                    transpose(xs, rows, ncols, &mut cols_t);
                } else {
                    im2col(&geom, xs, &mut cols);
                    transpose(&cols, rows, ncols, &mut cols_t);
                }
                T::gemm(false, false, cout, rows, ncols, T::one(), gs, &cols_t, T::one(), gw.data_mut());
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx.data_mut()[img * cin * h * wd..(img + 1) * cin * h * wd];
                if geom.is_pointwise() {
                    T::gemm(true, false, rows, ncols, cout, T::one(), wv, gs, T::one(), dst);
                } else {
                    T::gemm(true, false, rows, ncols, cout, T::one(), wv, gs, T::zero(), &mut dcols);
                    col2im(&geom, &dcols, dst);
                }
            }
        }
        if let Some(gw) = gw {
            self.acc(grads, w, gw);
        }
        if let Some(gx) = gx {
            self.acc(grads, x, gx);
        }
    }
}
