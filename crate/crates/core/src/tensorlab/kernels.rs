//! Value-level kernels. The tape records these for the forward pass and
//! uses the adjoint kernels below for the backward pass.

use super::{Tensor, TensorError};

/// Leading batch count and the trailing two extents of a rank-2 or rank-3 tensor.
fn batch_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
    match *t.shape() {
        [r, c] => Ok((1, r, c)),
        [b, r, c] => Ok((b, r, c)),
        ref s => Err(TensorError::shape(op, format!("expected rank 2 or 3, got {s:?}"))),
    }
}

/// `c[i,j] = Σ_k a[i,k]·b[k,j]`, accumulated in ascending `k` for every entry.
/// Rank-3 inputs are treated as a batch of independent products.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (ba, r, k) = batch_dims(a, "matmul")?;
    let (bb, k2, s) = batch_dims(b, "matmul")?;
    if k != k2 || ba != bb || a.rank() != b.rank() {
        return Err(TensorError::shape(
            "matmul",
            format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; ba * r * s];
    for bi in 0..ba {
        let ad = &a.data()[bi * r * k..(bi + 1) * r * k];
        let bd = &b.data()[bi * k * s..(bi + 1) * k * s];
        let od = &mut out[bi * r * s..(bi + 1) * r * s];
        matmul_into(ad, bd, od, r, k, s);
    }
    let shape: Vec<usize> = if a.rank() == 2 { vec![r, s] } else { vec![ba, r, s] };
    Tensor::new(&shape, out)
}

/// i-k-j loop: each output entry still sums over `k` in ascending order.
fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], r: usize, k: usize, s: usize) {
    for i in 0..r {
        let crow = &mut c[i * s..(i + 1) * s];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * s..(kk + 1) * s];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Swap the last two axes.
pub fn transpose(a: &Tensor) -> Result<Tensor, TensorError> {
    let (bn, r, c) = batch_dims(a, "transpose")?;
    let mut out = vec![0.0; a.numel()];
    for b in 0..bn {
        let src = &a.data()[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let shape: Vec<usize> = if a.rank() == 2 { vec![c, r] } else { vec![bn, c, r] };
    Tensor::new(&shape, out)
}

/// Dense GEMM `c = alpha·op(a)·op(b) + beta·c` over raw row-major slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe in-bounds layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn nchw(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize), TensorError> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(TensorError::shape(op, format!("expected [N,C,H,W], got {s:?}"))),
    }
}

/// Per-pixel affine map over channels: `y[n,o,p] = Σ_i w[o,i]·x[n,i,p] + b[o]`.
pub fn pointwise_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor, TensorError> {
    let (n, cin, h, wd) = nchw(x, "pointwise_conv")?;
    let [cout, wcin] = *w.shape() else {
        return Err(TensorError::shape(
            "pointwise_conv",
            format!("weights must be [Cout,Cin], got {:?}", w.shape()),
        ));
    };
    if wcin != cin {
        return Err(TensorError::shape(
            "pointwise_conv",
            format!("weights expect {wcin} input channels, input has {cin}"),
        ));
    }
    check_bias(b, cout, "pointwise_conv")?;
    let hw = h * wd;
    let mut out = vec![0.0; n * cout * hw];
    for ni in 0..n {
        let dst = &mut out[ni * cout * hw..(ni + 1) * cout * hw];
        if let Some(b) = b {
            for (o, chunk) in dst.chunks_mut(hw).enumerate() {
                chunk.fill(b.data()[o]);
            }
        }
        let src = &x.data()[ni * cin * hw..(ni + 1) * cin * hw];
        // exact loops: starting from the bias, input channels are added in order
        for (o, row) in dst.chunks_mut(hw).enumerate() {
            for (ci, plane) in src.chunks(hw).enumerate() {
                let wv = w.data()[o * cin + ci];
                for (d, &v) in row.iter_mut().zip(plane) {
                    *d += wv * v;
                }
            }
        }
    }
    Tensor::new(&[n, cout, h, wd], out)
}

fn check_bias(b: Option<&Tensor>, cout: usize, op: &'static str) -> Result<(), TensorError> {
    match b {
        Some(b) if b.numel() != cout => Err(TensorError::shape(
            op,
            format!("bias has {} entries for {cout} output channels", b.numel()),
        )),
        _ => Ok(()),
    }
}

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_extent(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Unfold one image `[C,H,W]` into columns `[C·k·k, Ho·Wo]`.
pub(crate) fn im2col(src: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = (g.out_extent(h), g.out_extent(w));
    let k = g.kernel;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            src[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, dst: &mut [f64]) {
    let (ho, wo) = (g.out_extent(h), g.out_extent(w));
    let k = g.kernel;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution with weights `[Cout,Cin,k,k]` and optional bias.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: ConvGeom) -> Result<Tensor, TensorError> {
    let (n, cin, h, wd) = nchw(x, "conv2d")?;
    let [cout, wcin, k1, k2] = *w.shape() else {
        return Err(TensorError::shape("conv2d", format!("weights must be rank 4, got {:?}", w.shape())));
    };
    if wcin != cin || k1 != g.kernel || k2 != g.kernel {
        return Err(TensorError::shape(
            "conv2d",
            format!("weights {:?} incompatible with input {:?} / kernel {}", w.shape(), x.shape(), g.kernel),
        ));
    }
    if h + 2 * g.pad < g.kernel || wd + 2 * g.pad < g.kernel {
        return Err(TensorError::shape("conv2d", format!("input {h}x{wd} smaller than kernel")));
    }
    check_bias(b, cout, "conv2d")?;
    let (ho, wo) = (g.out_extent(h), g.out_extent(wd));
    let ckk = cin * g.kernel * g.kernel;
    let mut cols = vec![0.0; ckk * ho * wo];
    let mut out = vec![0.0; n * cout * ho * wo];
    for ni in 0..n {
        im2col(&x.data()[ni * cin * h * wd..(ni + 1) * cin * h * wd], cin, h, wd, g, &mut cols);
        let dst = &mut out[ni * cout * ho * wo..(ni + 1) * cout * ho * wo];
        if let Some(b) = b {
            for (o, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                chunk.fill(b.data()[o]);
            }
        }
        gemm(cout, ckk, ho * wo, w.data(), false, &cols, false, 1.0, dst);
    }
    Tensor::new(&[n, cout, ho, wo], out)
}

/// Row-wise softmax over the last axis, max-subtracted.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    let s = *a.shape().last().expect("non-empty shape");
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(s) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Lower bound applied to vector norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

/// Strides describing the vectors along `axis`: (outer count, axis length, inner stride).
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Divide every vector along `axis` by `max(‖v‖₂, NORM_EPS)`.
pub fn l2_normalize(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_layout(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let norm = (0..len).map(|c| d[base + c * inner].powi(2)).sum::<f64>().sqrt();
            let denom = norm.max(NORM_EPS);
            for c in 0..len {
                d[base + c * inner] /= denom;
            }
        }
    }
    out
}

/// The channel axis: 1 for `[N,C,H,W]`, otherwise the last axis.
pub fn channel_axis(shape: &[usize]) -> usize {
    if shape.len() == 4 {
        1
    } else {
        shape.len() - 1
    }
}

pub fn l2_normalize_channels(x: &Tensor) -> Tensor {
    l2_normalize(x, channel_axis(x.shape()))
}

/// Per-row descending rank over the last axis: the largest entry gets 0.
/// Ties keep column order (stable sort).
pub fn descending_rank(a: &Tensor) -> Vec<usize> {
    let s = *a.shape().last().expect("non-empty shape");
    let mut ranks = vec![0usize; a.numel()];
    let mut order: Vec<usize> = Vec::with_capacity(s);
    for (row, out) in a.data().chunks(s).zip(ranks.chunks_mut(s)) {
        order.clear();
        order.extend(0..s);
        order.sort_by(|&i, &j| row[j].partial_cmp(&row[i]).unwrap_or(std::cmp::Ordering::Equal));
        for (rank, &col) in order.iter().enumerate() {
            out[col] = rank;
        }
    }
    ranks
}

/// `[N,C,H,W]` to `[N,H·W,C]`.
pub fn channels_last(x: &Tensor) -> Result<Tensor, TensorError> {
    let (n, c, h, w) = nchw(x, "channels_last")?;
    let hw = h * w;
    let mut out = vec![0.0; x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            for p in 0..hw {
                out[(ni * hw + p) * c + ci] = x.data()[(ni * c + ci) * hw + p];
            }
        }
    }
    Tensor::new(&[n, hw, c], out)
}

/// `[N,H·W,C]` back to `[N,C,H,W]`.
pub fn channels_first(x: &Tensor, h: usize, w: usize) -> Result<Tensor, TensorError> {
    let [n, hw, c] = *x.shape() else {
        return Err(TensorError::shape("channels_first", format!("expected [N,HW,C], got {:?}", x.shape())));
    };
    if hw != h * w {
        return Err(TensorError::shape("channels_first", format!("{hw} positions cannot form {h}x{w}")));
    }
    let mut out = vec![0.0; x.numel()];
    for ni in 0..n {
        for p in 0..hw {
            for ci in 0..c {
                out[(ni * c + ci) * hw + p] = x.data()[(ni * hw + p) * c + ci];
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Nearest-neighbour 2x upsampling of `[N,C,H,W]`.
pub fn upsample2x(x: &Tensor) -> Result<Tensor, TensorError> {
    let (n, c, h, w) = nchw(x, "upsample2x")?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * h2 * w2];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(&[n, c, h2, w2], out)
}

/// Concatenate two `[N,·,H,W]` tensors along channels.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (n, ca, h, w) = nchw(a, "concat_channels")?;
    let (n2, cb, h2, w2) = nchw(b, "concat_channels")?;
    if (n, h, w) != (n2, h2, w2) {
        return Err(TensorError::shape(
            "concat_channels",
            format!("{:?} and {:?} disagree outside the channel axis", a.shape(), b.shape()),
        ));
    }
    let (pa, pb) = (ca * h * w, cb * h * w);
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for ni in 0..n {
        out.extend_from_slice(&a.data()[ni * pa..(ni + 1) * pa]);
        out.extend_from_slice(&b.data()[ni * pb..(ni + 1) * pb]);
    }
    Tensor::new(&[n, ca + cb, h, w], out)
}
