//! Pure tensor kernels.
//!
//! Every function here is side-effect free and reentrant. The tape in
//! [`crate::tape`] records calls to these kernels and uses the matching
//! `*_backward` helpers to propagate gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Options for [`conv2d`]. Padding is always `k / 2` with zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub depthwise: bool,
}

impl ConvOpts {
    pub const fn new(stride: usize) -> Self {
        Self {
            stride,
            depthwise: false,
        }
    }

    pub const fn depthwise() -> Self {
        Self {
            stride: 1,
            depthwise: true,
        }
    }
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self::new(1)
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents disagree: {:?} × {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new([m, n], out)?.ensure_finite("matmul")
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new([n, m], out)
}

/// Softmax over the last axis, shifted by the per-slice maximum.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let n = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
    if n == 0 {
        return Err(Error::shape("softmax", "empty last dimension"));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let mut out = x.data().to_vec();
    for slice in out.chunks_mut(n) {
        let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in slice.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in slice.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Gradient of softmax given its output `y` and upstream `g`.
pub fn softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let n = *y.shape().last().unwrap();
    let mut out = vec![0.0; y.numel()];
    for ((o, ys), gs) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
        for ((ov, &yv), &gv) in o.iter_mut().zip(ys).zip(gs) {
            *ov = yv * (gv - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), out).unwrap()
}

fn conv_dims(x: &Tensor, w: &Tensor, b: &Tensor, opts: ConvOpts) -> Result<ConvGeom> {
    let (c_in, h, wd) = x.dims3()?;
    let [c_out, w_in, k, k2] = w.shape()[..] else {
        return Err(Error::shape(
            "conv2d",
            format!("weight must be C_out×C_in×k×k, got {:?}", w.shape()),
        ));
    };
    if k != k2 || !(k == 1 || k == 3) {
        return Err(Error::shape("conv2d", format!("unsupported kernel size {k}×{k2}")));
    }
    if !(opts.stride == 1 || opts.stride == 2) {
        return Err(Error::InvalidArgument(format!("unsupported stride {}", opts.stride)));
    }
    if opts.depthwise {
        if c_out != c_in || w_in != 1 {
            return Err(Error::shape(
                "conv2d",
                format!("depthwise needs weight {c_in}×1×k×k, got {:?}", w.shape()),
            ));
        }
    } else if w_in != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("channel mismatch: input {:?}, weight {:?}", x.shape(), w.shape()),
        ));
    }
    if b.shape() != [c_out] {
        return Err(Error::shape(
            "conv2d",
            format!("bias must have {} entries, got {:?}", c_out, b.shape()),
        ));
    }
    let pad = k / 2;
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(Error::shape("conv2d", "input smaller than kernel"));
    }
    let out_h = (h + 2 * pad - k) / opts.stride + 1;
    let out_w = (wd + 2 * pad - k) / opts.stride + 1;
    Ok(ConvGeom {
        c_in,
        h,
        w: wd,
        c_out,
        k,
        pad,
        stride: opts.stride,
        depthwise: opts.depthwise,
        out_h,
        out_w,
    })
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    pad: usize,
    stride: usize,
    depthwise: bool,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    /// Input channels feeding output channel `co`, with their weight slot.
    fn inputs_of(&self, co: usize) -> impl Iterator<Item = (usize, usize)> {
        let (start, count) = if self.depthwise { (co, 1) } else { (0, self.c_in) };
        (0..count).map(move |j| (start + j, j))
    }

    fn w_in(&self) -> usize {
        if self.depthwise {
            1
        } else {
            self.c_in
        }
    }

    /// Valid output range along one axis for kernel tap `t`.
    fn tap_range(&self, t: usize, input: usize, out: usize) -> (usize, usize) {
        // input index = o * stride + t - pad must lie in [0, input)
        let lo = if t >= self.pad {
            0
        } else {
            (self.pad - t).div_ceil(self.stride)
        };
        let hi = if input + self.pad > t {
            ((input + self.pad - t - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// 2-D convolution (cross-correlation) over a `C×H×W` input.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, opts: ConvOpts) -> Result<Tensor> {
    let g = conv_dims(x, w, b, opts)?;
    let (xd, wdat) = (x.data(), w.data());
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.c_out * plane];
    for co in 0..g.c_out {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.fill(b.data()[co]);
        for (ci, slot) in g.inputs_of(co) {
            let xin = &xd[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (oy0, oy1) = g.tap_range(ky, g.h, g.out_h);
                for kx in 0..g.k {
                    let wv = wdat[((co * g.w_in() + slot) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = g.tap_range(kx, g.w, g.out_w);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let xrow = &xin[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut o[oy * g.out_w..(oy + 1) * g.out_w];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    Tensor::new([g.c_out, g.out_h, g.out_w], out)?.ensure_finite("conv2d")
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    opts: ConvOpts,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = conv_dims(x, w, b, opts)?;
    let (xd, wdat, god) = (x.data(), w.data(), grad_out.data());
    let plane = g.out_h * g.out_w;
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; w.numel()];
    let mut db = vec![0.0; g.c_out];
    for co in 0..g.c_out {
        let go = &god[co * plane..(co + 1) * plane];
        db[co] = go.iter().sum();
        for (ci, slot) in g.inputs_of(co) {
            let base = ci * g.h * g.w;
            for ky in 0..g.k {
                let (oy0, oy1) = g.tap_range(ky, g.h, g.out_h);
                for kx in 0..g.k {
                    let widx = ((co * g.w_in() + slot) * g.k + ky) * g.k + kx;
                    let wv = wdat[widx];
                    let (ox0, ox1) = g.tap_range(kx, g.w, g.out_w);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        for ox in ox0..ox1 {
                            let ix = ox * g.stride + kx - g.pad;
                            let gv = go[oy * g.out_w + ox];
                            acc += gv * xd[base + iy * g.w + ix];
                            dx[base + iy * g.w + ix] += gv * wv;
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new([g.c_out], db)?,
    ))
}

/// Source taps for one output coordinate under the half-pixel convention.
fn bilinear_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be at least 1×1".into()));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let ys: Vec<_> = (0..out_h).map(|d| bilinear_taps(d, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|d| bilinear_taps(d, w, out_w)).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let src = &xd[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

pub fn bilinear_resize_backward(in_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [c, h, w] = in_shape[..] else {
        return Err(Error::shape("resize", "expected C×H×W"));
    };
    let (_, out_h, out_w) = grad_out.dims3()?;
    if (out_h, out_w) == (h, w) {
        return Ok(grad_out.clone());
    }
    let ys: Vec<_> = (0..out_h).map(|d| bilinear_taps(d, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|d| bilinear_taps(d, w, out_w)).collect();
    let god = grad_out.data();
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        let g = &god[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let gv = g[oy * out_w + ox];
                dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                dst[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// How the operands of a binary op line up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    /// `a` is `1×H×W`, `b` is `C×H×W`.
    Lhs,
    /// `b` is `1×H×W`, `a` is `C×H×W`.
    Rhs,
}

pub fn broadcast_kind(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    match (a, b) {
        ([1, h, w], [_, h2, w2]) if h == h2 && w == w2 => Ok(Broadcast::Lhs),
        ([_, h, w], [1, h2, w2]) if h == h2 && w == w2 => Ok(Broadcast::Rhs),
        _ => Err(Error::shape(
            "elementwise",
            format!("incompatible broadcast {a:?} vs {b:?}"),
        )),
    }
}

pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let kind = broadcast_kind(a.shape(), b.shape())?;
    let f = |x: f64, y: f64| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
    };
    let (shape, data): (Vec<usize>, Vec<f64>) = match kind {
        Broadcast::Same => (
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Broadcast::Rhs => {
            let plane = b.numel();
            (
                a.shape().to_vec(),
                a.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, b.data()[i % plane]))
                    .collect(),
            )
        }
        Broadcast::Lhs => {
            let plane = a.numel();
            (
                b.shape().to_vec(),
                b.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| f(a.data()[i % plane], y))
                    .collect(),
            )
        }
    };
    Tensor::new(shape, data)?.ensure_finite("elementwise")
}

/// Sums a `C×H×W` gradient down to a `1×H×W` broadcast operand.
pub fn reduce_channels(g: &Tensor) -> Result<Tensor> {
    let (c, h, w) = g.dims3()?;
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&g.data()[ch * plane..(ch + 1) * plane]) {
            *o += v;
        }
    }
    Tensor::new([1, h, w], out)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Concatenates along the leading axis; trailing extents must agree.
pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let tail = &first.shape()[1..];
    let mut lead = 0;
    let mut data = Vec::new();
    for p in parts {
        if p.shape().len() != first.shape().len() || &p.shape()[1..] != tail {
            return Err(Error::shape(
                "concat",
                format!("trailing extents differ: {:?} vs {:?}", first.shape(), p.shape()),
            ));
        }
        lead += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![lead];
    shape.extend_from_slice(tail);
    Tensor::new(shape, data)
}

/// Slice `[start, start + len)` along the leading axis.
pub fn narrow(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let lead = x.shape()[0];
    if start + len > lead {
        return Err(Error::shape(
            "narrow",
            format!("range {start}..{} exceeds extent {lead}", start + len),
        ));
    }
    let inner: usize = x.shape()[1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = len;
    Tensor::new(shape, x.data()[start * inner..(start + len) * inner].to_vec())
}
