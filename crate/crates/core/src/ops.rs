//! Forward kernels and their reverse-mode counterparts.
//!
//! Everything here is a pure function on [`Tensor`]s. The tape in
//! [`crate::autograd`] strings these together and calls the `*_backward`
//! helpers.

use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, Tensor};

/// Probabilities are clamped to `[CE_CLAMP, 1]` before taking the log.
pub const CE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    /// `(vertical, horizontal)` dilation.
    pub dilation: (usize, usize),
    /// `(vertical, horizontal)` zero padding.
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        ConvGeometry {
            stride,
            dilation: (dilation, dilation),
            padding: (padding, padding),
        }
    }

    /// Stride-1 geometry that keeps the spatial size of an odd `k`x`k` kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeometry::new(1, dilation, (kernel - 1) / 2 * dilation)
    }

    pub fn output_dims(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.dilation.0 == 0 || self.dilation.1 == 0 {
            return Err(Error::shape("stride and dilation must be positive"));
        }
        let ext_h = (kh - 1) * self.dilation.0 + 1;
        let ext_w = (kw - 1) * self.dilation.1 + 1;
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if ph < ext_h || pw < ext_w {
            return Err(Error::shape(format!(
                "kernel extent {ext_h}x{ext_w} exceeds padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - ext_h) / self.stride + 1, (pw - ext_w) / self.stride + 1))
    }
}

/// Weights and geometry of a 2-D convolution.
#[derive(Debug, Clone)]
pub struct Conv2dParams {
    /// `[out_ch, in_ch, kh, kw]`
    pub weight: Tensor,
    /// `[out_ch]`
    pub bias: Option<Tensor>,
    pub geometry: ConvGeometry,
}

fn weight_dims(weight: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match weight.shape()[..] {
        [o, i, kh, kw] => Ok((o, i, kh, kw)),
        _ => Err(Error::shape(format!(
            "conv weight must be [out,in,kh,kw], got {:?}",
            weight.shape()
        ))),
    }
}

/// `c[m,n] = a[m,k] * b[k,n] + beta * c`, with arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers covering the strided extents; c is m x n row-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvLayout {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeometry,
}

impl ConvLayout {
    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.geom.stride == 1
            && self.geom.padding == (0, 0)
    }

    /// Visits every `(col_row, col_col, input_index)` triple with a non-padding source.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let n = self.oh * self.ow;
        let (s, (dh, dw), (ph, pw)) = (self.geom.stride, self.geom.dilation, self.geom.padding);
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let base = row * n;
                    for oy in 0..self.oh {
                        let iy = (oy * s + ki * dh) as isize - ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let in_row = (ci * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * s + kj * dw) as isize - pw as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(base + oy * self.ow + ox, in_row + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        if self.is_pointwise() {
            return input.to_vec();
        }
        let mut cols = vec![0.0; self.c * self.kh * self.kw * self.oh * self.ow];
        self.for_each_tap(|col, src| cols[col] = input[src]);
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        if self.is_pointwise() {
            return cols.to_vec();
        }
        let mut out = vec![0.0; self.c * self.h * self.w];
        self.for_each_tap(|col, dst| out[dst] += cols[col]);
        out
    }
}

fn conv_layout(input: &Tensor, weight: &Tensor, geom: ConvGeometry) -> Result<(ConvLayout, usize)> {
    let (c, h, w) = input.chw()?;
    let (o, i, kh, kw) = weight_dims(weight)?;
    if i != c {
        return Err(Error::shape(format!(
            "conv expects {i} input channels, got {c}"
        )));
    }
    let (oh, ow) = geom.output_dims(h, w, kh, kw)?;
    Ok((
        ConvLayout {
            c,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            geom,
        },
        o,
    ))
}

/// Convolution forward pass; also returns the im2col buffer for reuse in backward.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeometry,
) -> Result<(Tensor, Vec<f64>)> {
    let (layout, out_ch) = conv_layout(input, weight, geom)?;
    if let Some(b) = bias {
        if b.len() != out_ch {
            return Err(Error::shape(format!(
                "bias has {} entries for {out_ch} output channels",
                b.len()
            )));
        }
    }
    let k = layout.c * layout.kh * layout.kw;
    let n = layout.oh * layout.ow;
    let cols = layout.im2col(input.data());
    let mut out = vec![0.0; out_ch * n];
    if let Some(b) = bias {
        for (o, &bv) in b.data().iter().enumerate() {
            out[o * n..(o + 1) * n].fill(bv);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    gemm(out_ch, k, n, weight.data(), (k, 1), &cols, (n, 1), beta, &mut out);
    Ok((Tensor::new(&[out_ch, layout.oh, layout.ow], out)?, cols))
}

pub fn conv2d(input: &Tensor, params: &Conv2dParams) -> Result<Tensor> {
    conv2d_forward(input, &params.weight, params.bias.as_ref(), params.geometry).map(|(t, _)| t)
}

pub struct ConvGrads {
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients of a convolution given the upstream gradient and the saved im2col buffer.
pub fn conv2d_backward(
    grad_out: &[f64],
    input: &Tensor,
    weight: &Tensor,
    cols: &[f64],
    geom: ConvGeometry,
    need_input: bool,
) -> Result<ConvGrads> {
    let (layout, out_ch) = conv_layout(input, weight, geom)?;
    let k = layout.c * layout.kh * layout.kw;
    let n = layout.oh * layout.ow;

    let mut gw = vec![0.0; out_ch * k];
    // dW = dOut * cols^T
    gemm(out_ch, n, k, grad_out, (n, 1), cols, (1, n), 0.0, &mut gw);

    let gb = (0..out_ch)
        .map(|o| grad_out[o * n..(o + 1) * n].iter().sum())
        .collect();

    let gi = if need_input {
        // dCols = W^T * dOut
        let mut gcols = vec![0.0; k * n];
        gemm(k, out_ch, n, weight.data(), (1, k), grad_out, (n, 1), 0.0, &mut gcols);
        layout.col2im(&gcols)
    } else {
        Vec::new()
    };
    Ok(ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    })
}

/// Max pooling without padding. Returns the output and the flat argmax index of every cell.
pub fn max_pool2d_forward(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.chw()?;
    if window == 0 || stride == 0 {
        return Err(Error::shape("pool window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::shape(format!(
            "pool window {window} exceeds spatial dims {h}x{w}"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for dy in 0..window {
                    let row = (ci * h + oy * stride + dy) * w + ox * stride;
                    for dx in 0..window {
                        let v = x[row + dx];
                        // strict comparison keeps the row-major first maximum
                        if v > best || best_i == usize::MAX {
                            best = v;
                            best_i = row + dx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, arg))
}

pub fn max_pool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    max_pool2d_forward(input, window, stride).map(|(t, _)| t)
}

/// Corner-aligned sampling coefficients along one axis: `(lo, hi, frac)` per output index.
fn axis_coeffs(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            if input == 1 || output == 1 {
                return (0, 0, 0.0);
            }
            let num = o * (input - 1);
            let den = output - 1;
            let lo = num / den;
            let rem = num % den;
            if rem == 0 {
                (lo, lo, 0.0)
            } else {
                (lo, (lo + 1).min(input - 1), rem as f64 / den as f64)
            }
        })
        .collect()
}

/// Corner-aligned bilinear resize of every channel of a `[C,H,W]` tensor.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize target must be at least 1x1"));
    }
    if out_h == h && out_w == w {
        return Ok(Tensor::new(input.shape(), input.data().to_vec())?);
    }
    let ys = axis_coeffs(h, out_h);
    let xs = axis_coeffs(w, out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], fx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], fx);
                out.push(lerp(top, bottom, fy));
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a * (1.0 - t) + b * t
    }
}

pub fn bilinear_resize_backward(grad_out: &[f64], in_shape: &[usize], out_h: usize, out_w: usize) -> Vec<f64> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    if out_h == h && out_w == w {
        return grad_out.to_vec();
    }
    let ys = axis_coeffs(h, out_h);
    let xs = axis_coeffs(w, out_w);
    let mut gi = vec![0.0; c * h * w];
    let mut k = 0;
    for ci in 0..c {
        let plane = &mut gi[ci * h * w..(ci + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let g = grad_out[k];
                k += 1;
                plane[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += g * (1.0 - fy) * fx;
                plane[y1 * w + x0] += g * fy * (1.0 - fx);
                plane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    gi
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}

pub fn elementwise_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
    )
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, ha, wa) = a.chw()?;
    let (cb, hb, wb) = b.chw()?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::shape(format!(
            "concat: spatial dims {ha}x{wa} and {hb}x{wb} differ"
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(&[ca + cb, ha, wa], data)
}

/// Softmax across channels at every spatial location, max-subtracted.
pub fn softmax_channels(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let hw = h * w;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for p in 0..hw {
        let m = (0..c).map(|ci| x[ci * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for ci in 0..c {
            let e = (x[ci * hw + p] - m).exp();
            out[ci * hw + p] = e;
            sum += e;
        }
        for ci in 0..c {
            out[ci * hw + p] /= sum;
        }
    }
    Tensor::new(input.shape(), out)
}

/// Given softmax output `y` and upstream gradient, returns the gradient w.r.t. the logits.
pub fn softmax_channels_backward(y: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    let (c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let hw = h * w;
    let yd = y.data();
    let mut gi = vec![0.0; yd.len()];
    for p in 0..hw {
        let dot: f64 = (0..c).map(|ci| yd[ci * hw + p] * grad_out[ci * hw + p]).sum();
        for ci in 0..c {
            let i = ci * hw + p;
            gi[i] = yd[i] * (grad_out[i] - dot);
        }
    }
    gi
}

/// Channel-wise spatial mean, `[C,H,W] -> [C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let n = (h * w) as f64;
    Tensor::new(
        &[c],
        (0..c).map(|ci| input.channel(ci).iter().sum::<f64>() / n).collect(),
    )
}

/// `Σ_p f[d,p] w[p] / Σ_p w[p]` for each channel `d`.
pub fn weighted_spatial_pool(features: &Tensor, weights: &[f64]) -> Result<(Tensor, f64)> {
    let (c, h, w) = features.chw()?;
    if weights.len() != h * w {
        return Err(Error::shape(format!(
            "pool weights have {} entries for {h}x{w} features",
            weights.len()
        )));
    }
    let denom: f64 = weights.iter().sum();
    let out = (0..c)
        .map(|ci| {
            features
                .channel(ci)
                .iter()
                .zip(weights)
                .map(|(f, m)| f * m)
                .sum::<f64>()
                / denom
        })
        .collect();
    Ok((Tensor::new(&[c], out)?, denom))
}

/// Broadcast a `[D]` vector to `[D,h,w]`.
pub fn tile(vec: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if vec.ndim() != 1 {
        return Err(Error::shape(format!("tile expects [D], got {:?}", vec.shape())));
    }
    let d = vec.len();
    let mut data = Vec::with_capacity(d * h * w);
    for &v in vec.data() {
        data.extend(std::iter::repeat_n(v, h * w));
    }
    Tensor::new(&[d, h, w], data)
}

/// Mean over locations of `-ln(clamp(p[target]))`; returns the loss and `dL/dp`.
pub fn cross_entropy_spatial_with_grad(probs: &Tensor, target: &BinaryMask) -> Result<(f64, Vec<f64>)> {
    let (c, h, w) = probs.chw()?;
    if c != 2 || target.height() != h || target.width() != w {
        return Err(Error::shape(format!(
            "cross-entropy: prediction {:?} vs target {}x{}",
            probs.shape(),
            target.height(),
            target.width()
        )));
    }
    let labels: Vec<usize> = target.data().iter().map(|&t| t as usize).collect();
    cross_entropy_labels_with_grad(probs, &labels)
}

/// Mean `-ln p[label]` over locations of a `[C,h,w]` probability map, with `dL/dp`.
pub fn cross_entropy_labels_with_grad(probs: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (c, h, w) = probs.chw()?;
    let hw = h * w;
    if labels.len() != hw {
        return Err(Error::shape(format!(
            "cross-entropy: {} labels for a {h}x{w} map",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::shape(format!("label {bad} out of range for {c} channels")));
    }
    let n = hw as f64;
    let p = probs.data();
    let mut grad = vec![0.0; p.len()];
    let mut terms = Vec::with_capacity(hw);
    for (i, &t) in labels.iter().enumerate() {
        let idx = t * hw + i;
        let pc = p[idx].clamp(CE_CLAMP, 1.0);
        terms.push(-pc.ln());
        if p[idx] > CE_CLAMP {
            grad[idx] = -1.0 / (p[idx] * n);
        }
    }
    Ok((pairwise_sum(&terms) / n, grad))
}

/// Recursive halving; exact for `2^k` equal terms, so a uniform loss does not drift with resolution.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

pub fn cross_entropy_spatial(probs: &Tensor, target: &BinaryMask) -> Result<f64> {
    cross_entropy_spatial_with_grad(probs, target).map(|(l, _)| l)
}
