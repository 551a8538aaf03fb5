//! Forward kernels and vector-Jacobian products for every node kind.
//!
//! Layout conventions: 1-D convolutions take `[channels, time]`, 2-D
//! convolutions take `[channels, height, width]`, matrices are `[rows, cols]`.

use std::f64::consts::PI;

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Conv1dSpec {
    /// Stride 1, dilation 1, zero padding that preserves length for odd kernels.
    pub fn same(kernel: usize) -> Self {
        let total = kernel - 1;
        Self { stride: 1, dilation: 1, pad_left: total / 2, pad_right: total - total / 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvTranspose1dSpec {
    pub stride: usize,
    /// Samples dropped from the start of the full transposed output.
    pub crop_left: usize,
    pub out_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    /// (top, bottom, left, right)
    pub pad: (usize, usize, usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input(String),
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Abs,
    Square,
    Sqrt,
    Relu,
    LeakyRelu(f64),
    Elu,
    Sigmoid,
    Tanh,
    LogSigmoid,
    MatMul,
    Transpose,
    /// `[r, c] + [c]`
    AddRowBroadcast,
    /// `[r, c] + [r]`
    AddColBroadcast,
    Sum,
    Mean,
    SoftmaxRows,
    /// Row-wise cosine of two `[t, d]` matrices, denominator `max(|a||b|, eps)`.
    RowCosine(f64),
    Reshape(Vec<usize>),
    Concat(usize),
    Slice { axis: usize, start: usize, end: usize },
    PadLast { left: usize, right: usize },
    AvgPoolLast(usize),
    Conv1d(Conv1dSpec),
    ConvTranspose1d(ConvTranspose1dSpec),
    Conv2d(Conv2dSpec),
    /// Hann-windowed direct DFT over frames; output `[2, frames, window/2 + 1]`.
    Dft { window: usize, hop: usize },
    /// `[2, ...] -> [...]`, `sqrt(re^2 + im^2 + eps)`.
    ComplexMagnitude(f64),
    /// `quantized + (latent - anchor)`, where `anchor` is the latent value
    /// when the node was built. At the anchor this is exactly `quantized`;
    /// around it the node moves one-for-one with the latent, so its true
    /// derivative is the identity that the backward pass routes to `latent`.
    StraightThrough(Tensor),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Elu => "elu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::LogSigmoid => "log_sigmoid",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::AddRowBroadcast => "add_row_broadcast",
            Op::AddColBroadcast => "add_col_broadcast",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SoftmaxRows => "softmax",
            Op::RowCosine(_) => "cosine",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::PadLast { .. } => "pad",
            Op::AvgPoolLast(_) => "avg_pool",
            Op::Conv1d(_) => "conv1d",
            Op::ConvTranspose1d(_) => "conv_transpose1d",
            Op::Conv2d(_) => "conv2d",
            Op::Dft { .. } => "dft",
            Op::ComplexMagnitude(_) => "complex_magnitude",
            Op::StraightThrough(_) => "straight_through",
        }
    }
}

type KResult = Result<Tensor, String>;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(), String> {
    if a.shape() != b.shape() {
        return Err(format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn want_rank(t: &Tensor, rank: usize, what: &str) -> Result<(), String> {
    if t.rank() != rank {
        return Err(format!("{what} must have rank {rank}, got shape {:?}", t.shape()));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Hann window (periodic) plus cosine/sine tables indexed by `(k * n) mod window`.
/// Hann window plus the full `[bins, window]` cosine and sine bases.
pub(crate) struct DftTables {
    pub window: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl DftTables {
    pub fn new(n: usize) -> Self {
        let window = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
        let bins = n / 2 + 1;
        let base_cos: Vec<f64> = (0..n).map(|m| (2.0 * PI * m as f64 / n as f64).cos()).collect();
        let base_sin: Vec<f64> = (0..n).map(|m| (2.0 * PI * m as f64 / n as f64).sin()).collect();
        let mut cos = Vec::with_capacity(bins * n);
        let mut sin = Vec::with_capacity(bins * n);
        for k in 0..bins {
            for j in 0..n {
                let m = (j * k) % n;
                cos.push(base_cos[m]);
                sin.push(base_sin[m]);
            }
        }
        Self { window, cos, sin }
    }

    pub fn cos_row(&self, k: usize) -> &[f64] {
        let n = self.window.len();
        &self.cos[k * n..(k + 1) * n]
    }

    pub fn sin_row(&self, k: usize) -> &[f64] {
        let n = self.window.len();
        &self.sin[k * n..(k + 1) * n]
    }

    /// Real and imaginary part of bin `k` of an already windowed segment.
    pub fn bin(&self, seg: &[f64], k: usize) -> (f64, f64) {
        (dot(seg, self.cos_row(k)), -dot(seg, self.sin_row(k)))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// `dst[j] += a * src[j * stride]`
#[inline]
fn axpy_gather(dst: &mut [f64], a: f64, src: &[f64], stride: usize) {
    if stride == 1 {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += a * s;
        }
    } else {
        for (d, s) in dst.iter_mut().zip(src.iter().step_by(stride)) {
            *d += a * s;
        }
    }
}

/// `dst[j * stride] += a * src[j]`
#[inline]
fn axpy_scatter(dst: &mut [f64], a: f64, src: &[f64], stride: usize) {
    if stride == 1 {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += a * s;
        }
    } else {
        for (d, s) in dst.iter_mut().step_by(stride).zip(src) {
            *d += a * s;
        }
    }
}

/// `sum_j a[j] * b[j * stride]`
#[inline]
fn dot_strided(a: &[f64], b: &[f64], stride: usize) -> f64 {
    if stride == 1 {
        dot(a, b)
    } else {
        a.iter().zip(b.iter().step_by(stride)).fold(0.0, |acc, (x, y)| acc + x * y)
    }
}

pub(crate) fn dft_frames(len: usize, window: usize, hop: usize) -> Option<usize> {
    if window == 0 || hop == 0 || len < window {
        return None;
    }
    Some((len - window) / hop + 1)
}

fn conv1d_out_len(t: usize, k: usize, s: &Conv1dSpec) -> Option<usize> {
    let padded = t + s.pad_left + s.pad_right;
    let span = s.dilation * (k - 1) + 1;
    if s.stride == 0 || padded < span {
        return None;
    }
    Some((padded - span) / s.stride + 1)
}

/// Range of output positions `t` for which `t * stride + offset - pad` lies in `[0, len)`.
fn valid_range(out_len: usize, stride: usize, offset: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = if pad > offset { (pad - offset).div_ceil(stride) } else { 0 };
    let hi_excl = if len + pad > offset { (len + pad - offset).div_ceil(stride) } else { 0 };
    (lo, hi_excl.min(out_len))
}

pub(crate) fn eval(op: &Op, xs: &[&Tensor]) -> KResult {
    match op {
        Op::Input(_) | Op::Constant => unreachable!("leaf nodes are not evaluated"),
        Op::Add => {
            same_shape(xs[0], xs[1])?;
            Ok(xs[0].zip_map(xs[1], |a, b| a + b))
        }
        Op::Sub => {
            same_shape(xs[0], xs[1])?;
            Ok(xs[0].zip_map(xs[1], |a, b| a - b))
        }
        Op::Mul => {
            same_shape(xs[0], xs[1])?;
            Ok(xs[0].zip_map(xs[1], |a, b| a * b))
        }
        Op::Div => {
            same_shape(xs[0], xs[1])?;
            Ok(xs[0].zip_map(xs[1], |a, b| a / b))
        }
        Op::Neg => Ok(xs[0].map(|v| -v)),
        Op::Scale(c) => Ok(xs[0].map(|v| v * c)),
        Op::AddScalar(c) => Ok(xs[0].map(|v| v + c)),
        Op::Abs => Ok(xs[0].map(f64::abs)),
        Op::Square => Ok(xs[0].map(|v| v * v)),
        Op::Sqrt => Ok(xs[0].map(f64::sqrt)),
        Op::Relu => Ok(xs[0].map(|v| v.max(0.0))),
        Op::LeakyRelu(a) => Ok(xs[0].map(|v| if v > 0.0 { v } else { a * v })),
        Op::Elu => Ok(xs[0].map(|v| if v > 0.0 { v } else { v.exp_m1() })),
        Op::Sigmoid => Ok(xs[0].map(sigmoid)),
        Op::Tanh => Ok(xs[0].map(f64::tanh)),
        Op::LogSigmoid => Ok(xs[0].map(log_sigmoid)),
        Op::MatMul => matmul(xs[0], xs[1]),
        Op::Transpose => {
            want_rank(xs[0], 2, "transpose input")?;
            Ok(transpose(xs[0]))
        }
        Op::AddRowBroadcast => {
            want_rank(xs[0], 2, "broadcast target")?;
            if xs[1].len() != xs[0].cols() {
                return Err(format!("row vector of {} against {:?}", xs[1].len(), xs[0].shape()));
            }
            let mut out = xs[0].clone();
            let c = out.cols();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += xs[1].data()[i % c];
            }
            Ok(out)
        }
        Op::AddColBroadcast => {
            want_rank(xs[0], 2, "broadcast target")?;
            if xs[1].len() != xs[0].rows() {
                return Err(format!("column vector of {} against {:?}", xs[1].len(), xs[0].shape()));
            }
            let mut out = xs[0].clone();
            let c = out.cols();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += xs[1].data()[i / c];
            }
            Ok(out)
        }
        Op::Sum => Ok(Tensor::scalar(xs[0].sum())),
        Op::Mean => {
            if xs[0].is_empty() {
                return Err("mean of an empty tensor".into());
            }
            Ok(Tensor::scalar(xs[0].sum() / xs[0].len() as f64))
        }
        Op::SoftmaxRows => {
            want_rank(xs[0], 2, "softmax input")?;
            let mut out = xs[0].clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            Ok(out)
        }
        Op::RowCosine(eps) => {
            same_shape(xs[0], xs[1])?;
            want_rank(xs[0], 2, "cosine operand")?;
            let (a, b) = (xs[0], xs[1]);
            let out = (0..a.rows())
                .map(|r| {
                    let (ra, rb) = (a.row(r), b.row(r));
                    let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                    let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
                    dot / (na * nb).max(*eps)
                })
                .collect();
            Ok(Tensor::vector(out))
        }
        Op::Reshape(shape) => {
            if shape.iter().product::<usize>() != xs[0].len() {
                return Err(format!("cannot reshape {:?} into {:?}", xs[0].shape(), shape));
            }
            Ok(xs[0].clone().reshaped(shape))
        }
        Op::Concat(axis) => concat(xs, *axis),
        Op::Slice { axis, start, end } => {
            let x = xs[0];
            if *axis >= x.rank() || start > end || *end > x.shape()[*axis] {
                return Err(format!("slice {start}..{end} on axis {axis} of {:?}", x.shape()));
            }
            let (outer, n, inner) = outer_inner(x.shape(), *axis);
            let w = end - start;
            let mut data = Vec::with_capacity(outer * w * inner);
            for o in 0..outer {
                let base = o * n * inner;
                data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = w;
            Ok(Tensor::new(&shape, data))
        }
        Op::PadLast { left, right } => {
            let x = xs[0];
            let t = x.cols();
            let outer = x.len() / t.max(1);
            let nt = t + left + right;
            let mut data = vec![0.0; outer * nt];
            for o in 0..outer {
                data[o * nt + left..o * nt + left + t].copy_from_slice(&x.data()[o * t..(o + 1) * t]);
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = nt;
            Ok(Tensor::new(&shape, data))
        }
        Op::AvgPoolLast(f) => {
            let x = xs[0];
            let t = x.cols();
            let nt = t / f;
            if *f == 0 || nt == 0 {
                return Err(format!("pool factor {f} on length {t}"));
            }
            let outer = x.len() / t;
            let mut data = vec![0.0; outer * nt];
            for o in 0..outer {
                for j in 0..nt {
                    let s: f64 = x.data()[o * t + j * f..o * t + (j + 1) * f].iter().sum();
                    data[o * nt + j] = s / *f as f64;
                }
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = nt;
            Ok(Tensor::new(&shape, data))
        }
        Op::Conv1d(spec) => conv1d(xs[0], xs[1], xs[2], spec),
        Op::ConvTranspose1d(spec) => conv_transpose1d(xs[0], xs[1], xs[2], spec),
        Op::Conv2d(spec) => conv2d(xs[0], xs[1], xs[2], spec),
        Op::Dft { window, hop } => dft(xs[0], *window, *hop),
        Op::ComplexMagnitude(eps) => {
            let x = xs[0];
            if x.rank() < 2 || x.shape()[0] != 2 {
                return Err(format!("complex input must be [2, ...], got {:?}", x.shape()));
            }
            let half = x.len() / 2;
            let (re, im) = x.data().split_at(half);
            let data = re.iter().zip(im).map(|(a, b)| (a * a + b * b + eps).sqrt()).collect();
            Ok(Tensor::new(&x.shape()[1..], data))
        }
        Op::StraightThrough(anchor) => {
            same_shape(xs[0], xs[1])?;
            same_shape(xs[0], anchor)?;
            let mut out = xs[1].clone();
            for ((o, z), a) in out.data_mut().iter_mut().zip(xs[0].data()).zip(anchor.data()) {
                *o += z - a;
            }
            Ok(out)
        }
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> KResult {
    want_rank(a, 2, "matmul lhs")?;
    want_rank(b, 2, "matmul rhs")?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(format!("matmul {:?} x {:?}", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::new(&[m, n], out))
}

fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::new(&[c, r], out)
}

fn concat(xs: &[&Tensor], axis: usize) -> KResult {
    let first = xs.first().ok_or("concat of zero tensors")?;
    if axis >= first.rank() {
        return Err(format!("concat axis {axis} on {:?}", first.shape()));
    }
    for x in xs {
        let ok = x.rank() == first.rank()
            && x.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(format!("concat of {:?} with {:?} along axis {axis}", first.shape(), x.shape()));
        }
    }
    let (outer, _, inner) = outer_inner(first.shape(), axis);
    let total: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let n = x.shape()[axis] * inner;
            data.extend_from_slice(&x.data()[o * n..(o + 1) * n]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::new(&shape, data))
}

fn conv1d(x: &Tensor, w: &Tensor, b: &Tensor, s: &Conv1dSpec) -> KResult {
    want_rank(x, 2, "conv1d input")?;
    want_rank(w, 3, "conv1d weight")?;
    let (cin, t) = (x.shape()[0], x.shape()[1]);
    let (cout, wcin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if wcin != cin || b.len() != cout {
        return Err(format!("conv1d input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()));
    }
    let l = conv1d_out_len(t, k, s).ok_or_else(|| format!("conv1d input length {t} too short for kernel {k}"))?;
    let mut out = vec![0.0; cout * l];
    for o in 0..cout {
        let orow = &mut out[o * l..(o + 1) * l];
        orow.fill(b.data()[o]);
        for i in 0..cin {
            let xrow = &x.data()[i * t..(i + 1) * t];
            for kk in 0..k {
                let wv = w.data()[(o * cin + i) * k + kk];
                let off = kk * s.dilation;
                let (lo, hi) = valid_range(l, s.stride, off, s.pad_left, t);
                if lo < hi {
                    axpy_gather(&mut orow[lo..hi], wv, &xrow[lo * s.stride + off - s.pad_left..], s.stride);
                }
            }
        }
    }
    Ok(Tensor::new(&[cout, l], out))
}

fn conv1d_vjp(x: &Tensor, w: &Tensor, g: &Tensor, s: &Conv1dSpec, needs: &[bool]) -> Vec<Option<Tensor>> {
    let (cin, t) = (x.shape()[0], x.shape()[1]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let l = g.shape()[1];
    let mut gx = needs[0].then(|| vec![0.0; cin * t]);
    let mut gw = needs[1].then(|| vec![0.0; cout * cin * k]);
    for o in 0..cout {
        let grow = &g.data()[o * l..(o + 1) * l];
        for i in 0..cin {
            let xrow = &x.data()[i * t..(i + 1) * t];
            for kk in 0..k {
                let widx = (o * cin + i) * k + kk;
                let off = kk * s.dilation;
                let (lo, hi) = valid_range(l, s.stride, off, s.pad_left, t);
                if lo >= hi {
                    continue;
                }
                let start = lo * s.stride + off - s.pad_left;
                if let Some(gx) = gx.as_mut() {
                    let wv = w.data()[widx];
                    let gxrow = &mut gx[i * t..(i + 1) * t];
                    axpy_scatter(&mut gxrow[start..], wv, &grow[lo..hi], s.stride);
                }
                if let Some(gw) = gw.as_mut() {
                    gw[widx] += dot_strided(&grow[lo..hi], &xrow[start..], s.stride);
                }
            }
        }
    }
    let gb = needs[2].then(|| Tensor::vector((0..cout).map(|o| g.data()[o * l..(o + 1) * l].iter().sum()).collect()));
    vec![
        gx.map(|d| Tensor::new(x.shape(), d)),
        gw.map(|d| Tensor::new(w.shape(), d)),
        gb,
    ]
}

fn conv_transpose1d(x: &Tensor, w: &Tensor, b: &Tensor, s: &ConvTranspose1dSpec) -> KResult {
    want_rank(x, 2, "conv_transpose1d input")?;
    want_rank(w, 3, "conv_transpose1d weight")?;
    let (cin, t) = (x.shape()[0], x.shape()[1]);
    let (wcin, cout, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if wcin != cin || b.len() != cout || s.stride == 0 || t == 0 {
        return Err(format!(
            "conv_transpose1d input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    let full = (t - 1) * s.stride + k;
    if s.crop_left + s.out_len > full {
        return Err(format!("crop {}+{} exceeds full length {full}", s.crop_left, s.out_len));
    }
    let l = s.out_len;
    let mut out = vec![0.0; cout * l];
    for o in 0..cout {
        out[o * l..(o + 1) * l].fill(b.data()[o]);
    }
    for i in 0..cin {
        let xrow = &x.data()[i * t..(i + 1) * t];
        for o in 0..cout {
            let orow = &mut out[o * l..(o + 1) * l];
            for kk in 0..k {
                let wv = w.data()[(i * cout + o) * k + kk];
                let (lo, hi) = tconv_range(t, s, kk);
                if lo < hi {
                    axpy_scatter(&mut orow[lo * s.stride + kk - s.crop_left..], wv, &xrow[lo..hi], s.stride);
                }
            }
        }
    }
    Ok(Tensor::new(&[cout, l], out))
}

/// Input positions whose tap `kk` lands inside the cropped output.
fn tconv_range(t: usize, s: &ConvTranspose1dSpec, kk: usize) -> (usize, usize) {
    let lo = if s.crop_left > kk { (s.crop_left - kk).div_ceil(s.stride) } else { 0 };
    let lim = s.out_len + s.crop_left;
    let hi = if lim > kk { (lim - kk).div_ceil(s.stride) } else { 0 };
    (lo, hi.min(t))
}

fn conv_transpose1d_vjp(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    s: &ConvTranspose1dSpec,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let (cin, t) = (x.shape()[0], x.shape()[1]);
    let (cout, k) = (w.shape()[1], w.shape()[2]);
    let l = s.out_len;
    let mut gx = needs[0].then(|| vec![0.0; cin * t]);
    let mut gw = needs[1].then(|| vec![0.0; cin * cout * k]);
    for i in 0..cin {
        let xrow = &x.data()[i * t..(i + 1) * t];
        for o in 0..cout {
            let grow = &g.data()[o * l..(o + 1) * l];
            for kk in 0..k {
                let widx = (i * cout + o) * k + kk;
                let (lo, hi) = tconv_range(t, s, kk);
                if lo >= hi {
                    continue;
                }
                let start = lo * s.stride + kk - s.crop_left;
                if let Some(gx) = gx.as_mut() {
                    let wv = w.data()[widx];
                    axpy_gather(&mut gx[i * t + lo..i * t + hi], wv, &grow[start..], s.stride);
                }
                if let Some(gw) = gw.as_mut() {
                    gw[widx] += dot_strided(&xrow[lo..hi], &grow[start..], s.stride);
                }
            }
        }
    }
    let gb = needs[2].then(|| Tensor::vector((0..cout).map(|o| g.data()[o * l..(o + 1) * l].iter().sum()).collect()));
    vec![
        gx.map(|d| Tensor::new(x.shape(), d)),
        gw.map(|d| Tensor::new(w.shape(), d)),
        gb,
    ]
}

struct Conv2dGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv2d_geom(x: &Tensor, wt: &Tensor, b: &Tensor, s: &Conv2dSpec) -> Result<Conv2dGeom, String> {
    want_rank(x, 3, "conv2d input")?;
    want_rank(wt, 4, "conv2d weight")?;
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, wcin, kh, kw) = (wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]);
    if wcin != cin || b.len() != cout {
        return Err(format!("conv2d input {:?}, weight {:?}, bias {:?}", x.shape(), wt.shape(), b.shape()));
    }
    let hs = Conv1dSpec { stride: s.stride.0, dilation: s.dilation.0, pad_left: s.pad.0, pad_right: s.pad.1 };
    let ws = Conv1dSpec { stride: s.stride.1, dilation: s.dilation.1, pad_left: s.pad.2, pad_right: s.pad.3 };
    let oh = conv1d_out_len(h, kh, &hs).ok_or_else(|| format!("conv2d height {h} too small for kernel {kh}"))?;
    let ow = conv1d_out_len(w, kw, &ws).ok_or_else(|| format!("conv2d width {w} too small for kernel {kw}"))?;
    Ok(Conv2dGeom { cin, h, w, cout, kh, kw, oh, ow })
}

fn conv2d(x: &Tensor, wt: &Tensor, b: &Tensor, s: &Conv2dSpec) -> KResult {
    let gm = conv2d_geom(x, wt, b, s)?;
    let plane = gm.oh * gm.ow;
    let mut out = vec![0.0; gm.cout * plane];
    for o in 0..gm.cout {
        out[o * plane..(o + 1) * plane].fill(b.data()[o]);
        for i in 0..gm.cin {
            let xp = &x.data()[i * gm.h * gm.w..(i + 1) * gm.h * gm.w];
            for a in 0..gm.kh {
                let (ylo, yhi) = valid_range(gm.oh, s.stride.0, a * s.dilation.0, s.pad.0, gm.h);
                for c in 0..gm.kw {
                    let wv = wt.data()[((o * gm.cin + i) * gm.kh + a) * gm.kw + c];
                    let coff = c * s.dilation.1;
                    let (xlo, xhi) = valid_range(gm.ow, s.stride.1, coff, s.pad.2, gm.w);
                    if xlo >= xhi {
                        continue;
                    }
                    let start = xlo * s.stride.1 + coff - s.pad.2;
                    for y in ylo..yhi {
                        let sr = y * s.stride.0 + a * s.dilation.0 - s.pad.0;
                        let src = &xp[sr * gm.w + start..(sr + 1) * gm.w];
                        let dst = &mut out[o * plane + y * gm.ow + xlo..o * plane + y * gm.ow + xhi];
                        axpy_gather(dst, wv, src, s.stride.1);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[gm.cout, gm.oh, gm.ow], out))
}

fn conv2d_vjp(x: &Tensor, wt: &Tensor, b: &Tensor, g: &Tensor, s: &Conv2dSpec, needs: &[bool]) -> Vec<Option<Tensor>> {
    let gm = conv2d_geom(x, wt, b, s).expect("geometry validated in forward");
    let plane = gm.oh * gm.ow;
    let mut gx = needs[0].then(|| vec![0.0; x.len()]);
    let mut gw = needs[1].then(|| vec![0.0; wt.len()]);
    for o in 0..gm.cout {
        for i in 0..gm.cin {
            let xoff = i * gm.h * gm.w;
            for a in 0..gm.kh {
                let (ylo, yhi) = valid_range(gm.oh, s.stride.0, a * s.dilation.0, s.pad.0, gm.h);
                for c in 0..gm.kw {
                    let widx = ((o * gm.cin + i) * gm.kh + a) * gm.kw + c;
                    let wv = wt.data()[widx];
                    let coff = c * s.dilation.1;
                    let (xlo, xhi) = valid_range(gm.ow, s.stride.1, coff, s.pad.2, gm.w);
                    if xlo >= xhi {
                        continue;
                    }
                    let start = xlo * s.stride.1 + coff - s.pad.2;
                    let mut acc = 0.0;
                    for y in ylo..yhi {
                        let sr = y * s.stride.0 + a * s.dilation.0 - s.pad.0;
                        let grow = &g.data()[o * plane + y * gm.ow + xlo..o * plane + y * gm.ow + xhi];
                        let base = xoff + sr * gm.w;
                        if let Some(gx) = gx.as_mut() {
                            axpy_scatter(&mut gx[base + start..base + gm.w], wv, grow, s.stride.1);
                        }
                        if gw.is_some() {
                            acc += dot_strided(grow, &x.data()[base + start..base + gm.w], s.stride.1);
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    let gb = needs[2].then(|| {
        Tensor::vector((0..gm.cout).map(|o| g.data()[o * plane..(o + 1) * plane].iter().sum()).collect())
    });
    vec![
        gx.map(|d| Tensor::new(x.shape(), d)),
        gw.map(|d| Tensor::new(wt.shape(), d)),
        gb,
    ]
}

fn dft(x: &Tensor, window: usize, hop: usize) -> KResult {
    let n = x.len();
    let frames = dft_frames(n, window, hop)
        .ok_or_else(|| format!("signal of {n} samples shorter than window {window} (hop {hop})"))?;
    let bins = window / 2 + 1;
    let tab = DftTables::new(window);
    let mut out = vec![0.0; 2 * frames * bins];
    let mut seg = vec![0.0; window];
    for f in 0..frames {
        for (j, v) in seg.iter_mut().enumerate() {
            *v = tab.window[j] * x.data()[f * hop + j];
        }
        for k in 0..bins {
            let (re, im) = tab.bin(&seg, k);
            out[f * bins + k] = re;
            out[frames * bins + f * bins + k] = im;
        }
    }
    Ok(Tensor::new(&[2, frames, bins], out))
}

fn dft_vjp(x: &Tensor, g: &Tensor, window: usize, hop: usize) -> Tensor {
    let frames = g.shape()[1];
    let bins = g.shape()[2];
    let tab = DftTables::new(window);
    let mut gx = vec![0.0; x.len()];
    let mut acc = vec![0.0; window];
    for f in 0..frames {
        let gre = &g.data()[f * bins..(f + 1) * bins];
        let gim = &g.data()[frames * bins + f * bins..frames * bins + (f + 1) * bins];
        acc.fill(0.0);
        for k in 0..bins {
            let (c, sn) = (tab.cos_row(k), tab.sin_row(k));
            for ((a, cv), sv) in acc.iter_mut().zip(c).zip(sn) {
                *a += gre[k] * cv - gim[k] * sv;
            }
        }
        for (j, a) in acc.iter().enumerate() {
            gx[f * hop + j] += tab.window[j] * a;
        }
    }
    Tensor::new(x.shape(), gx)
}

/// Gradients for each input given the upstream gradient `g` of the output.
/// Entries whose `needs` flag is false may be `None`.
pub(crate) fn vjp(op: &Op, xs: &[&Tensor], out: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
    let unary = |f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<Option<Tensor>> {
        let d = xs[0].data().iter().zip(out.data()).zip(g.data()).map(|((&x, &y), &gv)| f(x, y, gv)).collect();
        vec![Some(Tensor::new(xs[0].shape(), d))]
    };
    match op {
        Op::Input(_) | Op::Constant => vec![],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), needs[1].then(|| g.map(|v| -v))],
        Op::Mul => vec![
            needs[0].then(|| g.zip_map(xs[1], |a, b| a * b)),
            needs[1].then(|| g.zip_map(xs[0], |a, b| a * b)),
        ],
        Op::Div => vec![
            needs[0].then(|| g.zip_map(xs[1], |a, b| a / b)),
            needs[1].then(|| {
                let d = g.data().iter().zip(xs[0].data()).zip(xs[1].data()).map(|((gv, a), b)| -gv * a / (b * b));
                Tensor::new(g.shape(), d.collect())
            }),
        ],
        Op::Neg => vec![Some(g.map(|v| -v))],
        Op::Scale(c) => vec![Some(g.map(|v| v * c))],
        Op::AddScalar(_) => vec![Some(g.clone())],
        Op::Abs => unary(&|x, _, gv| if x > 0.0 { gv } else if x < 0.0 { -gv } else { 0.0 }),
        Op::Square => unary(&|x, _, gv| 2.0 * x * gv),
        Op::Sqrt => unary(&|_, y, gv| gv * 0.5 / y),
        Op::Relu => unary(&|x, _, gv| if x > 0.0 { gv } else { 0.0 }),
        Op::LeakyRelu(a) => unary(&|x, _, gv| if x > 0.0 { gv } else { a * gv }),
        Op::Elu => unary(&|x, y, gv| if x > 0.0 { gv } else { gv * (y + 1.0) }),
        Op::Sigmoid => unary(&|_, y, gv| gv * y * (1.0 - y)),
        Op::Tanh => unary(&|_, y, gv| gv * (1.0 - y * y)),
        Op::LogSigmoid => unary(&|x, _, gv| gv * sigmoid(-x)),
        Op::MatMul => {
            let (a, b) = (xs[0], xs[1]);
            vec![
                needs[0].then(|| matmul(g, &transpose(b)).expect("shapes validated in forward")),
                needs[1].then(|| matmul(&transpose(a), g).expect("shapes validated in forward")),
            ]
        }
        Op::Transpose => vec![Some(transpose(g))],
        Op::AddRowBroadcast => {
            let c = g.cols();
            let mut gb = vec![0.0; c];
            for (i, v) in g.data().iter().enumerate() {
                gb[i % c] += v;
            }
            vec![Some(g.clone()), Some(Tensor::new(xs[1].shape(), gb))]
        }
        Op::AddColBroadcast => {
            let c = g.cols();
            let gb = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
            let _ = c;
            vec![Some(g.clone()), Some(Tensor::new(xs[1].shape(), gb))]
        }
        Op::Sum => vec![Some(Tensor::full(xs[0].shape(), g.item()))],
        Op::Mean => vec![Some(Tensor::full(xs[0].shape(), g.item() / xs[0].len() as f64))],
        Op::SoftmaxRows => {
            let mut gx = g.clone();
            for r in 0..out.rows() {
                let y = out.row(r);
                let gr = g.row(r);
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for (j, v) in gx.row_mut(r).iter_mut().enumerate() {
                    *v = y[j] * (gr[j] - dot);
                }
            }
            vec![Some(gx)]
        }
        Op::RowCosine(eps) => {
            let (a, b) = (xs[0], xs[1]);
            let mut ga = Tensor::zeros(a.shape());
            let mut gb = Tensor::zeros(b.shape());
            for r in 0..a.rows() {
                let (ra, rb) = (a.row(r), b.row(r));
                let na2: f64 = ra.iter().map(|x| x * x).sum();
                let nb2: f64 = rb.iter().map(|x| x * x).sum();
                let denom = (na2.sqrt() * nb2.sqrt()).max(*eps);
                let c = out.data()[r];
                let gv = g.data()[r];
                let guarded = na2.sqrt() * nb2.sqrt() <= *eps;
                for j in 0..ra.len() {
                    let (da, db) = if guarded {
                        (rb[j] / denom, ra[j] / denom)
                    } else {
                        (rb[j] / denom - c * ra[j] / na2, ra[j] / denom - c * rb[j] / nb2)
                    };
                    ga.row_mut(r)[j] = gv * da;
                    gb.row_mut(r)[j] = gv * db;
                }
            }
            vec![needs[0].then_some(ga), needs[1].then_some(gb)]
        }
        Op::Reshape(_) => vec![Some(g.clone().reshaped(xs[0].shape()))],
        Op::Concat(axis) => {
            let (outer, total, inner) = outer_inner(g.shape(), *axis);
            let mut offset = 0;
            xs.iter()
                .zip(needs)
                .map(|(x, &need)| {
                    let n = x.shape()[*axis];
                    let res = need.then(|| {
                        let mut d = Vec::with_capacity(x.len());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + n * inner]);
                        }
                        Tensor::new(x.shape(), d)
                    });
                    offset += n;
                    res
                })
                .collect()
        }
        Op::Slice { axis, start, end } => {
            let x = xs[0];
            let (outer, n, inner) = outer_inner(x.shape(), *axis);
            let w = end - start;
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                let dst = o * n * inner + start * inner;
                gx[dst..dst + w * inner].copy_from_slice(&g.data()[o * w * inner..(o + 1) * w * inner]);
            }
            vec![Some(Tensor::new(x.shape(), gx))]
        }
        Op::PadLast { left, .. } => {
            let x = xs[0];
            let t = x.cols();
            let nt = g.cols();
            let outer = x.len() / t.max(1);
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                gx[o * t..(o + 1) * t].copy_from_slice(&g.data()[o * nt + left..o * nt + left + t]);
            }
            vec![Some(Tensor::new(x.shape(), gx))]
        }
        Op::AvgPoolLast(f) => {
            let x = xs[0];
            let t = x.cols();
            let nt = g.cols();
            let outer = x.len() / t;
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                for j in 0..nt {
                    let v = g.data()[o * nt + j] / *f as f64;
                    gx[o * t + j * f..o * t + (j + 1) * f].fill(v);
                }
            }
            vec![Some(Tensor::new(x.shape(), gx))]
        }
        Op::Conv1d(spec) => conv1d_vjp(xs[0], xs[1], g, spec, needs),
        Op::ConvTranspose1d(spec) => conv_transpose1d_vjp(xs[0], xs[1], g, spec, needs),
        Op::Conv2d(spec) => conv2d_vjp(xs[0], xs[1], xs[2], g, spec, needs),
        Op::Dft { window, hop } => vec![Some(dft_vjp(xs[0], g, *window, *hop))],
        Op::ComplexMagnitude(_) => {
            let half = xs[0].len() / 2;
            let (re, im) = xs[0].data().split_at(half);
            let mut gx = vec![0.0; xs[0].len()];
            for j in 0..half {
                let m = out.data()[j];
                gx[j] = g.data()[j] * re[j] / m;
                gx[half + j] = g.data()[j] * im[j] / m;
            }
            vec![Some(Tensor::new(xs[0].shape(), gx))]
        }
        Op::StraightThrough(_) => vec![Some(g.clone()), None],
    }
}
