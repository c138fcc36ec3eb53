//! A small reverse-mode automatic differentiation tape.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates input gradients. Nodes that do
//! not depend on a gradient-requiring leaf are never visited.

mod direct;
pub mod kernels;

use crate::tensor::{check_same, gemm, MatRef, Real, Tensor, TensorError};
use kernels::ConvGeom;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvT2 { x: Var, w: Var, b: Option<Var> },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    AvgPool { x: Var, k: usize },
    Upsample { x: Var, k: usize },
    Relu(Var),
    Lincomb { a: Var, ca: T, b: Var, cb: T },
    Scale { a: Var, c: T },
    Concat { a: Var, b: Var },
    Reshape(Var),
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    SoftmaxLast(Var),
    SoftmaxChannels(Var),
    SelectChannel { x: Var, c: usize },
    Bce { p: Var, target: Tensor<T>, eps: T },
    Mse { a: Var, b: Var },
    SqNormHalf(Var),
    Dot { a: Var, w: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn t(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Stride-1 convolution with symmetric zero padding.
    /// Weight `[cout, cin, kh, kw]`, bias `[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let [batch, cin, h, wd] = self.t(x).dims4("conv2d")?;
        let [cout, wcin, kh, kw] = self.t(w).dims4("conv2d weight")?;
        if wcin != cin {
            return Err(TensorError::ShapeMismatch { op: "conv2d", expected: vec![cin], got: vec![wcin] });
        }
        if let Some(b) = b {
            check_same("conv2d bias", &[cout], self.t(b).shape())?;
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::Invalid(format!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")));
        }
        let geom = ConvGeom { cin, h, w: wd, cout, kh, kw, pad };
        let out = kernels::conv2d_forward(
            self.t(x).data(),
            batch,
            &geom,
            self.t(w).data(),
            b.map(|b| self.t(b).data()),
        );
        let value = Tensor::from_vec(&[batch, cout, geom.out_h(), geom.out_w()], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// 2x2 stride-2 transposed convolution. Weight `[cin, cout, 2, 2]`.
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [batch, cin, h, wd] = self.t(x).dims4("conv_transpose2")?;
        let [wcin, cout, kh, kw] = self.t(w).dims4("conv_transpose2 weight")?;
        if wcin != cin || kh != 2 || kw != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2",
                expected: vec![cin, cout, 2, 2],
                got: self.t(w).shape().to_vec(),
            });
        }
        if let Some(b) = b {
            check_same("conv_transpose2 bias", &[cout], self.t(b).shape())?;
        }
        let out = kernels::conv_t2_forward(
            self.t(x).data(),
            batch,
            cin,
            h,
            wd,
            cout,
            self.t(w).data(),
            b.map(|b| self.t(b).data()),
        );
        let value = Tensor::from_vec(&[batch, cout, 2 * h, 2 * wd], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::ConvT2 { x, w, b }, &inputs))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.t(x).dims4("max_pool2")?;
        let (out, argmax) = kernels::max_pool2_forward(self.t(x).data(), b * c, h, w);
        let value = Tensor::from_vec(&[b, c, h / 2, w / 2], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, &[x]))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let [b, c, h, w] = self.t(x).dims4("avg_pool")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::Invalid(format!("avg_pool: {h}x{w} not divisible by {k}")));
        }
        let out = kernels::avg_pool_forward(self.t(x).data(), b * c, h, w, k);
        let value = Tensor::from_vec(&[b, c, h / k, w / k], out)?;
        Ok(self.push(value, Op::AvgPool { x, k }, &[x]))
    }

    pub fn upsample(&mut self, x: Var, k: usize) -> Result<Var> {
        let [b, c, h, w] = self.t(x).dims4("upsample")?;
        let out = kernels::upsample_forward(self.t(x).data(), b * c, h, w, k);
        let value = Tensor::from_vec(&[b, c, h * k, w * k], out)?;
        Ok(self.push(value, Op::Upsample { x, k }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.t(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x), &[x])
    }

    /// `ca * a + cb * b`.
    pub fn lincomb(&mut self, a: Var, ca: T, b: Var, cb: T) -> Result<Var> {
        check_same("lincomb", self.t(a).shape(), self.t(b).shape())?;
        let (ta, tb) = (self.t(a), self.t(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| ca * x + cb * y).collect();
        let value = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push(value, Op::Lincomb { a, ca, b, cb }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lincomb(a, T::one(), b, T::one())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lincomb(a, T::one(), b, -T::one())
    }

    /// Sums a non-empty list of same-shaped values.
    pub fn add_all(&mut self, items: &[Var]) -> Result<Var> {
        let (first, rest) = items
            .split_first()
            .ok_or_else(|| TensorError::Invalid("add_all: empty input".into()))?;
        let mut acc = *first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.t(a).map(|v| v * c);
        self.push(value, Op::Scale { a, c }, &[a])
    }

    /// Concatenates two rank-4 values along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = self.t(a).dims4("concat")?;
        let [bb, cb, hb, wb] = self.t(b).dims4("concat")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                expected: self.t(a).shape().to_vec(),
                got: self.t(b).shape().to_vec(),
            });
        }
        let hw = ha * wa;
        let mut data = Vec::with_capacity(ba * (ca + cb) * hw);
        for n in 0..ba {
            data.extend_from_slice(&self.t(a).data()[n * ca * hw..(n + 1) * ca * hw]);
            data.extend_from_slice(&self.t(b).data()[n * cb * hw..(n + 1) * cb * hw]);
        }
        let value = Tensor::from_vec(&[ba, ca + cb, ha, wa], data)?;
        Ok(self.push(value, Op::Concat { a, b }, &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.t(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Batched matrix product `op(a) * op(b)` over rank-3 values, where
    /// `op` transposes the trailing two axes when the flag is set.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let [na, ra, ca] = self.t(a).dims3("bmm")?;
        let [nb, rb, cb] = self.t(b).dims3("bmm")?;
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if na != nb || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                expected: self.t(a).shape().to_vec(),
                got: self.t(b).shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); na * m * n];
        for s in 0..na {
            let am = mat(&self.t(a).data()[s * ra * ca..(s + 1) * ra * ca], ra, ca, ta);
            let bm = mat(&self.t(b).data()[s * rb * cb..(s + 1) * rb * cb], rb, cb, tb);
            gemm(am, bm, T::zero(), &mut out[s * m * n..(s + 1) * m * n]);
        }
        let value = Tensor::from_vec(&[na, m, n], out)?;
        Ok(self.push(value, Op::Bmm { a, b, ta, tb }, &[a, b]))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let ta = self.t(a);
        let len = *ta.shape().last().ok_or_else(|| TensorError::Invalid("softmax of scalar".into()))?;
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(len) {
            softmax_in_place(row);
        }
        let value = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push(value, Op::SoftmaxLast(a), &[a]))
    }

    /// Softmax over the channel axis of a rank-4 value.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let [b, c, h, w] = self.t(a).dims4("softmax_channels")?;
        let hw = h * w;
        let src = self.t(a).data();
        let mut data = vec![T::zero(); src.len()];
        let mut buf = vec![T::zero(); c];
        for n in 0..b {
            for p in 0..hw {
                for (ch, slot) in buf.iter_mut().enumerate() {
                    *slot = src[(n * c + ch) * hw + p];
                }
                softmax_in_place(&mut buf);
                for (ch, &v) in buf.iter().enumerate() {
                    data[(n * c + ch) * hw + p] = v;
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, h, w], data)?;
        Ok(self.push(value, Op::SoftmaxChannels(a), &[a]))
    }

    /// Extracts channel `c` of a rank-4 value as `[batch, height, width]`.
    pub fn select_channel(&mut self, x: Var, c: usize) -> Result<Var> {
        let [b, ch, h, w] = self.t(x).dims4("select_channel")?;
        if c >= ch {
            return Err(TensorError::Invalid(format!("select_channel: channel {c} of {ch}")));
        }
        let hw = h * w;
        let src = self.t(x).data();
        let mut data = Vec::with_capacity(b * hw);
        for n in 0..b {
            data.extend_from_slice(&src[(n * ch + c) * hw..(n * ch + c + 1) * hw]);
        }
        let value = Tensor::from_vec(&[b, h, w], data)?;
        Ok(self.push(value, Op::SelectChannel { x, c }, &[x]))
    }

    /// Mean binary cross-entropy of probabilities `p` (clamped to
    /// `[eps, 1 - eps]`) against binary targets.
    pub fn bce(&mut self, p: Var, target: Tensor<T>, eps: T) -> Result<Var> {
        check_same("bce", self.t(p).shape(), target.shape())?;
        let n = T::of(target.numel().max(1) as f64);
        let one = T::one();
        let mut s = T::zero();
        for (&pv, &y) in self.t(p).data().iter().zip(target.data()) {
            let pc = pv.max(eps).min(one - eps);
            s += -(y * pc.ln() + (one - y) * (one - pc).ln());
        }
        let value = Tensor::scalar(s / n);
        Ok(self.push(value, Op::Bce { p, target, eps }, &[p]))
    }

    /// Mean squared difference of two same-shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mse", self.t(a).shape(), self.t(b).shape())?;
        let n = T::of(self.t(a).numel().max(1) as f64);
        let s: T = self.t(a).data().iter().zip(self.t(b).data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { a, b }, &[a, b]))
    }

    /// `sum(a^2) / 2`.
    pub fn sq_norm_half(&mut self, a: Var) -> Var {
        let s: T = self.t(a).data().iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(s * T::of(0.5)), Op::SqNormHalf(a), &[a])
    }

    /// `sum(a * w)` for a constant weight tensor.
    pub fn dot(&mut self, a: Var, w: Tensor<T>) -> Result<Var> {
        check_same("dot", self.t(a).shape(), w.shape())?;
        let s: T = self.t(a).data().iter().zip(w.data()).map(|(&x, &y)| x * y).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { a, w }, &[a]))
    }

    /// Reverse pass from a scalar root. Gradients are retained only for leaves.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Grads { grads };
        }
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g, &mut grads);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let batch = self.t(*x).shape()[0];
                let mut dw = self.wants(*w).then(|| vec![T::zero(); self.t(*w).numel()]);
                let mut db = b.filter(|b| self.wants(*b)).map(|_| vec![T::zero(); geom.cout]);
                let dx = kernels::conv2d_backward(
                    self.t(*x).data(),
                    batch,
                    geom,
                    self.t(*w).data(),
                    g.data(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                    self.wants(*x),
                );
                if let Some(dx) = dx {
                    accum(grads, *x, self.t(*x).shape(), dx);
                }
                if let Some(dw) = dw {
                    accum(grads, *w, self.t(*w).shape(), dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    accum(grads, *b, &[geom.cout], db);
                }
            }
            Op::ConvT2 { x, w, b } => {
                let [batch, cin, h, wd] = self.t(*x).dims4("convt").unwrap();
                let cout = self.t(*w).shape()[1];
                let mut dw = self.wants(*w).then(|| vec![T::zero(); self.t(*w).numel()]);
                let mut db = b.filter(|b| self.wants(*b)).map(|_| vec![T::zero(); cout]);
                let dx = kernels::conv_t2_backward(
                    self.t(*x).data(),
                    batch,
                    cin,
                    h,
                    wd,
                    cout,
                    self.t(*w).data(),
                    g.data(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                    self.wants(*x),
                );
                if let Some(dx) = dx {
                    accum(grads, *x, self.t(*x).shape(), dx);
                }
                if let Some(dw) = dw {
                    accum(grads, *w, self.t(*w).shape(), dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    accum(grads, *b, &[cout], db);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); self.t(*x).numel()];
                for (&gi, &ai) in g.data().iter().zip(argmax) {
                    dx[ai as usize] += gi;
                }
                accum(grads, *x, self.t(*x).shape(), dx);
            }
            Op::AvgPool { x, k } => {
                let [b, c, h, w] = self.t(*x).dims4("avg_pool").unwrap();
                let dx = kernels::avg_pool_backward(g.data(), b * c, h, w, *k);
                accum(grads, *x, self.t(*x).shape(), dx);
            }
            Op::Upsample { x, k } => {
                let [b, c, h, w] = self.t(*x).dims4("upsample").unwrap();
                let dx = kernels::upsample_backward(g.data(), b * c, h, w, *k);
                accum(grads, *x, self.t(*x).shape(), dx);
            }
            Op::Relu(x) => {
                let dx = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gi, &y)| if y > T::zero() { gi } else { T::zero() })
                    .collect();
                accum(grads, *x, self.t(*x).shape(), dx);
            }
            Op::Lincomb { a, ca, b, cb } => {
                if self.wants(*a) {
                    accum(grads, *a, g.shape(), g.data().iter().map(|&v| v * *ca).collect());
                }
                if self.wants(*b) {
                    accum(grads, *b, g.shape(), g.data().iter().map(|&v| v * *cb).collect());
                }
            }
            Op::Scale { a, c } => {
                accum(grads, *a, g.shape(), g.data().iter().map(|&v| v * *c).collect());
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.t(*a).dims4("concat").unwrap();
                let cb = self.t(*b).shape()[1];
                let hw = h * w;
                let gd = g.data();
                if self.wants(*a) {
                    let mut da = Vec::with_capacity(n * ca * hw);
                    for s in 0..n {
                        da.extend_from_slice(&gd[s * (ca + cb) * hw..(s * (ca + cb) + ca) * hw]);
                    }
                    accum(grads, *a, self.t(*a).shape(), da);
                }
                if self.wants(*b) {
                    let mut db = Vec::with_capacity(n * cb * hw);
                    for s in 0..n {
                        db.extend_from_slice(&gd[(s * (ca + cb) + ca) * hw..(s + 1) * (ca + cb) * hw]);
                    }
                    accum(grads, *b, self.t(*b).shape(), db);
                }
            }
            Op::Reshape(a) => {
                accum(grads, *a, self.t(*a).shape(), g.into_data());
            }
            Op::Bmm { a, b, ta, tb } => {
                let [n, ra, ca] = self.t(*a).dims3("bmm").unwrap();
                let [_, rb, cb] = self.t(*b).dims3("bmm").unwrap();
                let m = if *ta { ca } else { ra };
                let nn = if *tb { rb } else { cb };
                let gd = g.data();
                if self.wants(*a) {
                    let mut da = vec![T::zero(); n * ra * ca];
                    for s in 0..n {
                        let gm = MatRef::rm(&gd[s * m * nn..(s + 1) * m * nn], m, nn);
                        let bs = &self.t(*b).data()[s * rb * cb..(s + 1) * rb * cb];
                        let out = &mut da[s * ra * ca..(s + 1) * ra * ca];
                        if *ta {
                            // stored a is k x m: da = op(b) * g^T
                            gemm(mat(bs, rb, cb, *tb), gm.t(), T::zero(), out);
                        } else {
                            // da = g * op(b)^T
                            gemm(gm, mat(bs, rb, cb, !*tb), T::zero(), out);
                        }
                    }
                    accum(grads, *a, self.t(*a).shape(), da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); n * rb * cb];
                    for s in 0..n {
                        let gm = MatRef::rm(&gd[s * m * nn..(s + 1) * m * nn], m, nn);
                        let asl = &self.t(*a).data()[s * ra * ca..(s + 1) * ra * ca];
                        let out = &mut db[s * rb * cb..(s + 1) * rb * cb];
                        if *tb {
                            // stored b is n x k: db = g^T * op(a)
                            gemm(gm.t(), mat(asl, ra, ca, *ta), T::zero(), out);
                        } else {
                            // db = op(a)^T * g
                            gemm(mat(asl, ra, ca, !*ta), gm, T::zero(), out);
                        }
                    }
                    accum(grads, *b, self.t(*b).shape(), db);
                }
            }
            Op::SoftmaxLast(a) => {
                let len = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); g.numel()];
                for ((dr, gr), yr) in dx.chunks_mut(len).zip(g.data().chunks(len)).zip(node.value.data().chunks(len)) {
                    let dotp: T = gr.iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum();
                    for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - dotp);
                    }
                }
                accum(grads, *a, self.t(*a).shape(), dx);
            }
            Op::SoftmaxChannels(a) => {
                let [b, c, h, w] = node.value.dims4("softmax_channels").unwrap();
                let hw = h * w;
                let (y, gd) = (node.value.data(), g.data());
                let mut dx = vec![T::zero(); y.len()];
                for n in 0..b {
                    for p in 0..hw {
                        let mut dotp = T::zero();
                        for ch in 0..c {
                            let i = (n * c + ch) * hw + p;
                            dotp += gd[i] * y[i];
                        }
                        for ch in 0..c {
                            let i = (n * c + ch) * hw + p;
                            dx[i] = y[i] * (gd[i] - dotp);
                        }
                    }
                }
                accum(grads, *a, self.t(*a).shape(), dx);
            }
            Op::SelectChannel { x, c } => {
                let [b, ch, h, w] = self.t(*x).dims4("select_channel").unwrap();
                let hw = h * w;
                let mut dx = vec![T::zero(); b * ch * hw];
                for n in 0..b {
                    dx[(n * ch + c) * hw..(n * ch + c + 1) * hw].copy_from_slice(&g.data()[n * hw..(n + 1) * hw]);
                }
                accum(grads, *x, self.t(*x).shape(), dx);
            }
            Op::Bce { p, target, eps } => {
                let scale = g.item() / T::of(target.numel().max(1) as f64);
                let one = T::one();
                let dx = self
                    .t(*p)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&pv, &y)| {
                        if pv < *eps || pv > one - *eps {
                            T::zero()
                        } else {
                            scale * (-y / pv + (one - y) / (one - pv))
                        }
                    })
                    .collect();
                accum(grads, *p, self.t(*p).shape(), dx);
            }
            Op::Mse { a, b } => {
                let scale = g.item() * T::of(2.0) / T::of(self.t(*a).numel().max(1) as f64);
                let diff: Vec<T> =
                    self.t(*a).data().iter().zip(self.t(*b).data()).map(|(&x, &y)| (x - y) * scale).collect();
                if self.wants(*b) {
                    accum(grads, *b, self.t(*b).shape(), diff.iter().map(|&d| -d).collect());
                }
                if self.wants(*a) {
                    accum(grads, *a, self.t(*a).shape(), diff);
                }
            }
            Op::SqNormHalf(a) => {
                let gi = g.item();
                accum(grads, *a, self.t(*a).shape(), self.t(*a).data().iter().map(|&v| v * gi).collect());
            }
            Op::Dot { a, w } => {
                let gi = g.item();
                accum(grads, *a, w.shape(), w.data().iter().map(|&v| v * gi).collect());
            }
        }
    }
}

fn mat<T>(data: &[T], rows: usize, cols: usize, transpose: bool) -> MatRef<'_, T> {
    let m = MatRef::rm(data, rows, cols);
    if transpose {
        m.t()
    } else {
        m
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

fn accum<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], data: Vec<T>) {
    let t = Tensor::from_vec(shape, data).expect("gradient shape");
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_then_dot_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        let b = tape.leaf(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap(), true);
        let s = tape.lincomb(a, 2.0, b, -1.0).unwrap();
        let l = tape.dot(s, Tensor::from_vec(&[2], vec![1.0, 10.0]).unwrap()).unwrap();
        assert_eq!(tape.value(l).item(), 2.0 * 1.0 - 3.0 + 10.0 * (4.0 - 4.0));
        let g = tape.backward(l);
        assert_eq!(g.get(a).unwrap().data(), &[2.0, 20.0]);
        assert_eq!(g.get(b).unwrap().data(), &[-1.0, -10.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.leaf(Tensor::full(&[3], 2.0), true);
        let m = tape.mse(a, b).unwrap();
        let g = tape.backward(m);
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 5], |i| (i as f64 * 0.37).sin() * 4.0));
        let y = tape.softmax_last(x).unwrap();
        for row in tape.value(y).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
