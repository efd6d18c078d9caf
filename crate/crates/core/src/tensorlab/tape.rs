//! Reverse-mode differentiation over a recorded operation list.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! nodes in reverse and accumulates adjoints into the parents that require
//! gradients. Discrete choices (ranks, argmax indices, indicator masks) enter
//! the graph only as constants, so no gradient flows through them.

use super::kernels::{self, ConvGeom, NORM_EPS};
use super::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Sigmoid(Var),
    Ln(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    L2Normalize(Var, usize),
    PointwiseConv { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ChannelsLast(Var),
    ChannelsFirst(Var),
    GatherRows(Var, Vec<usize>),
    MulSpatial(Var, Var),
    MulChannel(Var, Var),
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    SumPerSample(Var),
    SumAll(Var),
    CosineStyle(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable input: its gradient is reported by `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A fixed input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Var, Var) -> Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Clip into `[lo, hi]`; the gradient passes only where the input was inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        let rg = self.rg(&[a]);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Natural logarithm.
    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(out, Op::Ln(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = kernels::transpose(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = kernels::softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Var {
        let out = kernels::l2_normalize(self.value(a), axis);
        let rg = self.rg(&[a]);
        self.push(out, Op::L2Normalize(a, axis), rg)
    }

    /// Channel-axis normalization (axis 1 of `[N,C,H,W]`, otherwise the last axis).
    pub fn l2_normalize_channels(&mut self, a: Var) -> Var {
        let axis = kernels::channel_axis(self.shape(a));
        self.l2_normalize(a, axis)
    }

    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let out = kernels::pointwise_conv(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::PointwiseConv { x, w, b }, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var, TensorError> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn channels_last(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = kernels::channels_last(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ChannelsLast(x), rg))
    }

    pub fn channels_first(&mut self, x: Var, h: usize, w: usize) -> Result<Var, TensorError> {
        let out = kernels::channels_first(self.value(x), h, w)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ChannelsFirst(x), rg))
    }

    /// Rows `indices` of a `[R,C]` matrix as `[len,C]`. Indices are constants.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x);
        let [r, c] = *t.shape() else {
            return Err(TensorError::shape("gather_rows", format!("expected [R,C], got {:?}", t.shape())));
        };
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(TensorError::shape("gather_rows", format!("row {i} out of {r}")));
            }
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(&[indices.len(), c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GatherRows(x, indices.to_vec()), rg))
    }

    /// `x[n,c,h,w] · m[n,0,h,w]`: a spatial map broadcast over channels.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Result<Var, TensorError> {
        let (tx, tm) = (self.value(x), self.value(m));
        let [n, c, h, w] = *tx.shape() else {
            return Err(TensorError::shape("mul_spatial", format!("x must be [N,C,H,W], got {:?}", tx.shape())));
        };
        if tm.shape() != [n, 1, h, w] {
            return Err(TensorError::shape(
                "mul_spatial",
                format!("map {:?} does not broadcast over {:?}", tm.shape(), tx.shape()),
            ));
        }
        let hw = h * w;
        let mut data = tx.data().to_vec();
        for ni in 0..n {
            let mp = &tm.data()[ni * hw..(ni + 1) * hw];
            for ci in 0..c {
                let plane = &mut data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                for (v, &s) in plane.iter_mut().zip(mp) {
                    *v *= s;
                }
            }
        }
        let out = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x, m]);
        Ok(self.push(out, Op::MulSpatial(x, m), rg))
    }

    /// `x[n,c,h,w] · p[0,c]`: a channel gate broadcast over images and positions.
    pub fn mul_channel(&mut self, x: Var, p: Var) -> Result<Var, TensorError> {
        let (tx, tp) = (self.value(x), self.value(p));
        let [n, c, h, w] = *tx.shape() else {
            return Err(TensorError::shape("mul_channel", format!("x must be [N,C,H,W], got {:?}", tx.shape())));
        };
        if tp.shape() != [1, c] {
            return Err(TensorError::shape(
                "mul_channel",
                format!("gate {:?} does not match {c} channels", tp.shape()),
            ));
        }
        let hw = h * w;
        let mut data = tx.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let s = tp.data()[ci];
                for v in &mut data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                    *v *= s;
                }
            }
        }
        let out = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x, p]);
        Ok(self.push(out, Op::MulChannel(x, p), rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = kernels::upsample2x(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Upsample2x(x), rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = kernels::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatChannels(a, b), rg))
    }

    /// Sum everything except the leading axis: `[N,...]` to `[N]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.dim(0);
        let inner = t.numel() / n;
        let data = t.data().chunks(inner).map(|c| c.iter().sum()).collect();
        let out = Tensor::new(&[n], data).expect("length matches");
        let rg = self.rg(&[x]);
        self.push(out, Op::SumPerSample(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `(1 + p·q / max(‖p‖‖q‖, NORM_EPS)) / 2` for two equally shaped vectors.
    pub fn cosine_style(&mut self, p: Var, q: Var) -> Result<Var, TensorError> {
        let (tp, tq) = (self.value(p), self.value(q));
        same_shape("cosine_style", tp, tq)?;
        let (dot, _, _, denom) = cos_parts(tp.data(), tq.data());
        let out = Tensor::scalar((1.0 + dot / denom.max(NORM_EPS)) * 0.5);
        let rg = self.rg(&[p, q]);
        Ok(self.push(out, Op::CosineStyle(p, q), rg))
    }

    /// Reverse pass from a single-element output.
    ///
    /// Every trainable leaf receives a gradient; leaves the output does not
    /// depend on get zeros.
    pub fn backward(&self, out: Var) -> Result<Grads, TensorError> {
        let shape = self.shape(out);
        if self.value(out).numel() != 1 {
            return Err(TensorError::NotScalar { shape: shape.to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::ones(shape));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &self.nodes[idx].value;
        let zip = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            Tensor::new(g.shape(), g.data().iter().zip(a.data()).map(|(&gv, &av)| f(gv, av)).collect())
                .expect("same shape")
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip(tb, &|gv, bv| gv * bv));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip(ta, &|gv, av| gv * av));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip(tb, &|gv, bv| gv / bv));
                }
                if self.wants(*b) {
                    let data = g
                        .data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape(), data).expect("same shape"));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, zip(x, &|gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let (lo, hi) = (*lo, *hi);
                self.accumulate(grads, *a, zip(x, &|gv, xv| if (lo..=hi).contains(&xv) { gv } else { 0.0 }));
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, zip(y, &|gv, yv| gv * yv * (1.0 - yv))),
            Op::Ln(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, zip(x, &|gv, xv| gv / xv));
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let bt = kernels::transpose(tb).expect("rank checked");
                    self.accumulate(grads, *a, kernels::matmul(g, &bt).expect("shapes from forward"));
                }
                if self.wants(*b) {
                    let at = kernels::transpose(ta).expect("rank checked");
                    self.accumulate(grads, *b, kernels::matmul(&at, g).expect("shapes from forward"));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, kernels::transpose(g).expect("rank checked")),
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.reshaped(&shape).expect("same numel"));
            }
            Op::SoftmaxRows(a) => {
                let s = *y.shape().last().expect("rank >= 1");
                let mut dx = g.clone();
                for (row_dx, row_y) in dx.data_mut().chunks_mut(s).zip(y.data().chunks(s)) {
                    let dot: f64 = row_dx.iter().zip(row_y).map(|(d, y)| d * y).sum();
                    for (d, &yv) in row_dx.iter_mut().zip(row_y) {
                        *d = yv * (*d - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::L2Normalize(a, axis) => {
                let x = self.value(*a);
                let (outer, len, inner) = kernels::axis_layout(x.shape(), *axis);
                let mut dx = Tensor::zeros(x.shape());
                let dxd = dx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let at = |c: usize| base + c * inner;
                        let norm = (0..len).map(|c| x.data()[at(c)].powi(2)).sum::<f64>().sqrt();
                        if norm > NORM_EPS {
                            let ydg: f64 = (0..len).map(|c| y.data()[at(c)] * g.data()[at(c)]).sum();
                            for c in 0..len {
                                dxd[at(c)] = (g.data()[at(c)] - y.data()[at(c)] * ydg) / norm;
                            }
                        } else {
                            for c in 0..len {
                                dxd[at(c)] = g.data()[at(c)] / NORM_EPS;
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::PointwiseConv { x, w, b } => self.pointwise_conv_backward(g, *x, *w, *b, grads),
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(g, *x, *w, *b, *geom, grads),
            Op::ChannelsLast(a) => {
                let s = self.shape(*a);
                let (h, w) = (s[2], s[3]);
                self.accumulate(grads, *a, kernels::channels_first(g, h, w).expect("layout"));
            }
            Op::ChannelsFirst(a) => self.accumulate(grads, *a, kernels::channels_last(g).expect("layout")),
            Op::GatherRows(a, indices) => {
                let mut dx = Tensor::zeros(self.shape(*a));
                let c = g.dim(1);
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        dx.data_mut()[i * c + j] += g.data()[k * c + j];
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::MulSpatial(x, m) => {
                let (tx, tm) = (self.value(*x), self.value(*m));
                let [n, c, h, w] = *tx.shape() else { unreachable!() };
                let hw = h * w;
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for ni in 0..n {
                        for ci in 0..c {
                            let plane = &mut dx.data_mut()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                            for (d, &s) in plane.iter_mut().zip(&tm.data()[ni * hw..(ni + 1) * hw]) {
                                *d *= s;
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*m) {
                    let mut dm = Tensor::zeros(tm.shape());
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * hw;
                            for p in 0..hw {
                                dm.data_mut()[ni * hw + p] += g.data()[off + p] * tx.data()[off + p];
                            }
                        }
                    }
                    self.accumulate(grads, *m, dm);
                }
            }
            Op::MulChannel(x, p) => {
                let (tx, tp) = (self.value(*x), self.value(*p));
                let [n, c, h, w] = *tx.shape() else { unreachable!() };
                let hw = h * w;
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for ni in 0..n {
                        for ci in 0..c {
                            let s = tp.data()[ci];
                            for d in &mut dx.data_mut()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                                *d *= s;
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*p) {
                    let mut dp = Tensor::zeros(tp.shape());
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * hw;
                            let s: f64 = (0..hw).map(|q| g.data()[off + q] * tx.data()[off + q]).sum();
                            dp.data_mut()[ci] += s;
                        }
                    }
                    self.accumulate(grads, *p, dp);
                }
            }
            Op::Upsample2x(a) => {
                let s = self.shape(*a);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut dx = Tensor::zeros(s);
                for pl in 0..planes {
                    let src = &g.data()[pl * 4 * h * w..(pl + 1) * 4 * h * w];
                    let dst = &mut dx.data_mut()[pl * h * w..(pl + 1) * h * w];
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let n = sa[0];
                let (pa, pb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
                let mut da = Vec::with_capacity(n * pa);
                let mut db = Vec::with_capacity(n * pb);
                for chunk in g.data().chunks(pa + pb) {
                    da.extend_from_slice(&chunk[..pa]);
                    db.extend_from_slice(&chunk[pa..]);
                }
                self.accumulate(grads, *a, Tensor::new(&sa, da).expect("split"));
                self.accumulate(grads, *b, Tensor::new(&sb, db).expect("split"));
            }
            Op::SumPerSample(a) => {
                let s = self.shape(*a);
                let inner = s.iter().skip(1).product::<usize>();
                let dx = Tensor::from_fn(s, |i| g.data()[i / inner]);
                self.accumulate(grads, *a, dx);
            }
            Op::SumAll(a) => {
                let s = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(s, g.item()));
            }
            Op::CosineStyle(p, q) => {
                let (tp, tq) = (self.value(*p), self.value(*q));
                let (dot, np, nq, denom) = cos_parts(tp.data(), tq.data());
                let half = 0.5 * g.item();
                let grad_for = |own: &Tensor, other: &Tensor, own_norm: f64| {
                    let data = own
                        .data()
                        .iter()
                        .zip(other.data())
                        .map(|(&o, &t)| {
                            if denom > NORM_EPS {
                                half * (t / denom - dot * o / (own_norm * own_norm * denom))
                            } else {
                                half * t / NORM_EPS
                            }
                        })
                        .collect();
                    Tensor::new(own.shape(), data).expect("same shape")
                };
                if self.wants(*p) {
                    self.accumulate(grads, *p, grad_for(tp, tq, np));
                }
                if self.wants(*q) {
                    self.accumulate(grads, *q, grad_for(tq, tp, nq));
                }
            }
        }
    }

    fn pointwise_conv_backward(&self, g: &Tensor, x: Var, w: Var, b: Option<Var>, grads: &mut [Option<Tensor>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let [n, cin, h, wd] = *tx.shape() else { unreachable!() };
        let cout = tw.dim(0);
        let hw = h * wd;
        if self.wants(w) {
            let mut dw = Tensor::zeros(tw.shape());
            for ni in 0..n {
                let go = &g.data()[ni * cout * hw..(ni + 1) * cout * hw];
                let xi = &tx.data()[ni * cin * hw..(ni + 1) * cin * hw];
                kernels::gemm(cout, hw, cin, go, false, xi, true, 1.0, dw.data_mut());
            }
            self.accumulate(grads, w, dw);
        }
        if let Some(b) = b.filter(|&b| self.wants(b)) {
            self.accumulate(grads, b, channel_sums(g, n, cout, hw));
        }
        if self.wants(x) {
            let mut dx = Tensor::zeros(tx.shape());
            for ni in 0..n {
                let go = &g.data()[ni * cout * hw..(ni + 1) * cout * hw];
                let dst = &mut dx.data_mut()[ni * cin * hw..(ni + 1) * cin * hw];
                kernels::gemm(cin, cout, hw, tw.data(), true, go, false, 0.0, dst);
            }
            self.accumulate(grads, x, dx);
        }
    }

    fn conv2d_backward(
        &self,
        g: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        grads: &mut [Option<Tensor>],
    ) {
        let (tx, tw) = (self.value(x), self.value(w));
        let [n, cin, h, wd] = *tx.shape() else { unreachable!() };
        let cout = tw.dim(0);
        let (ho, wo) = (geom.out_extent(h), geom.out_extent(wd));
        let ckk = cin * geom.kernel * geom.kernel;
        let ohw = ho * wo;
        let mut cols = vec![0.0; ckk * ohw];
        let want_w = self.wants(w);
        let want_x = self.wants(x);
        let mut dw = want_w.then(|| Tensor::zeros(tw.shape()));
        let mut dx = want_x.then(|| Tensor::zeros(tx.shape()));
        for ni in 0..n {
            let go = &g.data()[ni * cout * ohw..(ni + 1) * cout * ohw];
            if let Some(dw) = dw.as_mut() {
                let img = &tx.data()[ni * cin * h * wd..(ni + 1) * cin * h * wd];
                kernels::im2col(img, cin, h, wd, geom, &mut cols);
                kernels::gemm(cout, ohw, ckk, go, false, &cols, true, 1.0, dw.data_mut());
            }
            if let Some(dx) = dx.as_mut() {
                kernels::gemm(ckk, cout, ohw, tw.data(), true, go, false, 0.0, &mut cols);
                let dst = &mut dx.data_mut()[ni * cin * h * wd..(ni + 1) * cin * h * wd];
                kernels::col2im(&cols, cin, h, wd, geom, dst);
            }
        }
        if let Some(dw) = dw {
            self.accumulate(grads, w, dw);
        }
        if let Some(b) = b.filter(|&b| self.wants(b)) {
            self.accumulate(grads, b, channel_sums(g, n, cout, ohw));
        }
        if let Some(dx) = dx {
            self.accumulate(grads, x, dx);
        }
    }
}

fn channel_sums(g: &Tensor, n: usize, c: usize, hw: usize) -> Tensor {
    let mut db = Tensor::zeros(&[c]);
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            db.data_mut()[ci] += g.data()[off..off + hw].iter().sum::<f64>();
        }
    }
    db
}

/// Dot product, both norms, and `‖p‖·‖q‖` taken as `√(p·p · q·q)` so that
/// identical vectors give a cosine of exactly 1.
fn cos_parts(p: &[f64], q: &[f64]) -> (f64, f64, f64, f64) {
    let dot = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let pp = p.iter().map(|a| a * a).sum::<f64>();
    let qq = q.iter().map(|a| a * a).sum::<f64>();
    (dot, pp.sqrt(), qq.sqrt(), (pp * qq).sqrt())
}
