//! Shared numeric kernels behind tensor ops and tape backward passes.
//!
//! Summation orders are fixed and documented because bitwise determinism is a
//! contract: per output element, conv2d accumulates over (in-channel, kernel
//! row, kernel column) ascending; reductions accumulate over ascending input
//! linear index; pools and cosine dots accumulate over ascending channel or
//! pixel index.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ───────────────────────── reduction ─────────────────────────

/// Validated reduction layout: maps every input linear index to an output
/// slot, with reduced axes removed from the shape.
pub struct ReducePlan {
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    /// Per-input-axis stride into the output (0 for reduced axes).
    out_strides: Vec<usize>,
    pub reduced_count: usize,
    out_len: usize,
}

impl ReducePlan {
    /// Empty `axes` means reduce over all axes.
    pub fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
        let all: Vec<usize>;
        let axes = if axes.is_empty() {
            all = (0..shape.len()).collect();
            &all
        } else {
            axes
        };
        let mut reduced = vec![false; shape.len()];
        for &axis in axes {
            if axis >= shape.len() || reduced[axis] {
                return Err(Error::InvalidAxis {
                    axis,
                    shape: shape.to_vec(),
                });
            }
            if shape[axis] == 0 {
                return Err(Error::EmptyReduction {
                    axis,
                    shape: shape.to_vec(),
                });
            }
            reduced[axis] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        // Empty product is 1, which is exactly right for a scalar output.
        let out_len = out_shape.iter().product::<usize>();
        // Row-major strides over the kept axes only.
        let mut out_strides = vec![0usize; shape.len()];
        let mut stride = 1usize;
        for i in (0..shape.len()).rev() {
            if !reduced[i] {
                out_strides[i] = stride;
                stride *= shape[i];
            }
        }
        let reduced_count = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product::<usize>();
        Ok(ReducePlan {
            in_shape: shape.to_vec(),
            out_shape,
            out_strides,
            reduced_count,
            out_len,
        })
    }

    fn for_each(&self, len: usize, mut f: impl FnMut(usize, usize)) {
        // Walk input linear indices in order, maintaining the output index
        // incrementally via a multi-index counter.
        let rank = self.in_shape.len();
        if rank == 0 {
            f(0, 0);
            return;
        }
        let mut idx = vec![0usize; rank];
        let mut out = 0usize;
        for linear in 0..len {
            f(linear, out);
            // increment multi-index
            for axis in (0..rank).rev() {
                idx[axis] += 1;
                out += self.out_strides[axis];
                if idx[axis] < self.in_shape[axis] {
                    break;
                }
                out -= self.out_strides[axis] * self.in_shape[axis];
                idx[axis] = 0;
            }
        }
    }

    pub fn sum(&self, data: &[f64]) -> Tensor {
        let mut out = vec![0.0; self.out_len];
        self.for_each(data.len(), |i, o| out[o] += data[i]);
        Tensor::from_parts(self.out_shape.clone(), out)
    }

    pub fn mean(&self, data: &[f64]) -> Tensor {
        let mut t = self.sum(data);
        let n = self.reduced_count as f64;
        for v in t.data.iter_mut() {
            *v /= n;
        }
        t
    }

    /// Max values plus the linear input index of the first maximal element
    /// per output slot (gradient routing target).
    pub fn max(&self, data: &[f64]) -> (Tensor, Vec<usize>) {
        let mut out = vec![f64::NEG_INFINITY; self.out_len];
        let mut arg = vec![usize::MAX; self.out_len];
        self.for_each(data.len(), |i, o| {
            if data[i] > out[o] {
                out[o] = data[i];
                arg[o] = i;
            }
        });
        (Tensor::from_parts(self.out_shape.clone(), out), arg)
    }

    pub fn backward_sum(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        self.for_each(grad_in.len(), |i, o| grad_in[i] += grad_out[o]);
    }

    pub fn backward_mean(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        let n = self.reduced_count as f64;
        self.for_each(grad_in.len(), |i, o| grad_in[i] += grad_out[o] / n);
    }
}

// ───────────────────────── conv2d ─────────────────────────

/// Validated conv2d geometry.
#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 {
            return Err(Error::InvalidShape {
                shape: input.to_vec(),
                reason: "conv2d input must be [C,H,W]".into(),
            });
        }
        if kernel.len() != 4 {
            return Err(Error::InvalidShape {
                shape: kernel.to_vec(),
                reason: "conv2d kernel must be [O,C,kh,kw]".into(),
            });
        }
        let (in_c, in_h, in_w) = (input[0], input[1], input[2]);
        let (out_c, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != in_c {
            return Err(Error::ChannelMismatch {
                input: in_c,
                kernel: kc,
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidShape {
                shape: kernel.to_vec(),
                reason: "kernel height and width must be odd".into(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidShape {
                shape: input.to_vec(),
                reason: "stride must be positive".into(),
            });
        }
        if in_h + 2 * pad < kh || in_w + 2 * pad < kw {
            return Err(Error::InvalidShape {
                shape: input.to_vec(),
                reason: format!("input too small for {kh}x{kw} kernel with pad {pad}"),
            });
        }
        let out_h = (in_h + 2 * pad - kh) / stride + 1;
        let out_w = (in_w + 2 * pad - kw) / stride + 1;
        Ok(ConvSpec {
            in_c,
            in_h,
            in_w,
            out_c,
            out_h,
            out_w,
            kh,
            kw,
            stride,
            pad,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.out_c, self.out_h, self.out_w]
    }

    /// Valid output-column range [lo, hi) for a kernel column, such that the
    /// sampled input column ow*stride + kw_i - pad stays inside [0, in_w).
    #[inline]
    fn ow_range(&self, kw_i: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = kw_i as isize - self.pad as isize;
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi_in = self.in_w as isize - 1 - shift;
        if hi_in < 0 {
            return (0, 0);
        }
        let hi = (hi_in / s + 1).min(self.out_w as isize);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

pub fn conv2d_forward(spec: &ConvSpec, input: &[f64], kernel: &[f64]) -> Tensor {
    let mut out = vec![0.0; spec.out_c * spec.out_h * spec.out_w];
    let s = spec.stride;
    for oc in 0..spec.out_c {
        for oh in 0..spec.out_h {
            let out_row =
                &mut out[(oc * spec.out_h + oh) * spec.out_w..(oc * spec.out_h + oh + 1) * spec.out_w];
            for ic in 0..spec.in_c {
                let ker = &kernel[((oc * spec.in_c) + ic) * spec.kh * spec.kw..];
                for kh_i in 0..spec.kh {
                    let ih = (oh * s + kh_i) as isize - spec.pad as isize;
                    if ih < 0 || ih >= spec.in_h as isize {
                        continue;
                    }
                    let in_row = &input[(ic * spec.in_h + ih as usize) * spec.in_w..][..spec.in_w];
                    for kw_i in 0..spec.kw {
                        let w = ker[kh_i * spec.kw + kw_i];
                        let (lo, hi) = spec.ow_range(kw_i);
                        let shift = kw_i as isize - spec.pad as isize;
                        if s == 1 {
                            let base = (lo as isize + shift) as usize;
                            let src = &in_row[base..base + (hi - lo)];
                            let dst = &mut out_row[lo..hi];
                            for (d, &x) in dst.iter_mut().zip(src) {
                                *d += w * x;
                            }
                        } else {
                            for ow in lo..hi {
                                let iw = (ow * s) as isize + shift;
                                out_row[ow] += w * in_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(spec.out_shape(), out)
}

/// Gradient w.r.t. the conv input: transpose of the forward scatter, iterated
/// in the same deterministic nesting.
pub fn conv2d_grad_input(spec: &ConvSpec, kernel: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
    let s = spec.stride;
    for oc in 0..spec.out_c {
        for oh in 0..spec.out_h {
            let g_row = &grad_out[(oc * spec.out_h + oh) * spec.out_w..][..spec.out_w];
            for ic in 0..spec.in_c {
                let ker = &kernel[((oc * spec.in_c) + ic) * spec.kh * spec.kw..];
                for kh_i in 0..spec.kh {
                    let ih = (oh * s + kh_i) as isize - spec.pad as isize;
                    if ih < 0 || ih >= spec.in_h as isize {
                        continue;
                    }
                    let in_row =
                        &mut grad_in[(ic * spec.in_h + ih as usize) * spec.in_w..][..spec.in_w];
                    for kw_i in 0..spec.kw {
                        let w = ker[kh_i * spec.kw + kw_i];
                        let (lo, hi) = spec.ow_range(kw_i);
                        let shift = kw_i as isize - spec.pad as isize;
                        if s == 1 {
                            let base = (lo as isize + shift) as usize;
                            let dst = &mut in_row[base..base + (hi - lo)];
                            let src = &g_row[lo..hi];
                            for (d, &g) in dst.iter_mut().zip(src) {
                                *d += w * g;
                            }
                        } else {
                            for ow in lo..hi {
                                let iw = (ow * s) as isize + shift;
                                in_row[iw as usize] += w * g_row[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the kernel: one ordered dot product per kernel element.
pub fn conv2d_grad_kernel(spec: &ConvSpec, input: &[f64], grad_out: &[f64], grad_kernel: &mut [f64]) {
    let s = spec.stride;
    for oc in 0..spec.out_c {
        for ic in 0..spec.in_c {
            for kh_i in 0..spec.kh {
                for kw_i in 0..spec.kw {
                    let (lo, hi) = spec.ow_range(kw_i);
                    let shift = kw_i as isize - spec.pad as isize;
                    let mut acc = 0.0;
                    for oh in 0..spec.out_h {
                        let ih = (oh * s + kh_i) as isize - spec.pad as isize;
                        if ih < 0 || ih >= spec.in_h as isize {
                            continue;
                        }
                        let g_row = &grad_out[(oc * spec.out_h + oh) * spec.out_w..][..spec.out_w];
                        let in_row =
                            &input[(ic * spec.in_h + ih as usize) * spec.in_w..][..spec.in_w];
                        if s == 1 {
                            let base = (lo as isize + shift) as usize;
                            for (g, x) in g_row[lo..hi].iter().zip(&in_row[base..base + (hi - lo)]) {
                                acc += g * x;
                            }
                        } else {
                            for ow in lo..hi {
                                let iw = (ow * s) as isize + shift;
                                acc += g_row[ow] * in_row[iw as usize];
                            }
                        }
                    }
                    grad_kernel[((oc * spec.in_c + ic) * spec.kh + kh_i) * spec.kw + kw_i] += acc;
                }
            }
        }
    }
}

// ───────────────────────── bilinear resize ─────────────────────────

#[derive(Debug, Clone)]
pub struct ResizeSpec {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Per output row/column: (low index, high index, fraction toward high).
    taps_y: Vec<(usize, usize, f64)>,
    taps_x: Vec<(usize, usize, f64)>,
}

fn resize_taps(in_dim: usize, out_dim: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_dim as f64 / out_dim as f64;
    (0..out_dim)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let lo = (floor.max(0.0) as usize).min(in_dim - 1);
            let hi = ((floor + 1.0).max(0.0) as usize).min(in_dim - 1);
            (lo, hi, frac)
        })
        .collect()
}

impl ResizeSpec {
    pub fn new(input: &[usize], out_h: usize, out_w: usize) -> Result<Self> {
        if input.len() != 3 {
            return Err(Error::InvalidShape {
                shape: input.to_vec(),
                reason: "resize input must be [C,h,w]".into(),
            });
        }
        if out_h == 0 || out_w == 0 || input[1] == 0 || input[2] == 0 {
            return Err(Error::InvalidShape {
                shape: input.to_vec(),
                reason: format!("resize to {out_h}x{out_w} needs positive sizes"),
            });
        }
        Ok(ResizeSpec {
            channels: input[0],
            in_h: input[1],
            in_w: input[2],
            out_h,
            out_w,
            taps_y: resize_taps(input[1], out_h),
            taps_x: resize_taps(input[2], out_w),
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.channels, self.out_h, self.out_w]
    }
}

/// Lerp form `a + t*(b-a)`: preserves constant inputs exactly and is monotone
/// in each axis for monotone profiles.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

pub fn resize_forward(spec: &ResizeSpec, input: &[f64]) -> Tensor {
    let mut out = vec![0.0; spec.channels * spec.out_h * spec.out_w];
    for c in 0..spec.channels {
        let chan = &input[c * spec.in_h * spec.in_w..][..spec.in_h * spec.in_w];
        let out_chan = &mut out[c * spec.out_h * spec.out_w..][..spec.out_h * spec.out_w];
        for (oy, &(y0, y1, fy)) in spec.taps_y.iter().enumerate() {
            let row0 = &chan[y0 * spec.in_w..][..spec.in_w];
            let row1 = &chan[y1 * spec.in_w..][..spec.in_w];
            let out_row = &mut out_chan[oy * spec.out_w..][..spec.out_w];
            for (ox, &(x0, x1, fx)) in spec.taps_x.iter().enumerate() {
                let top = lerp(row0[x0], row0[x1], fx);
                let bottom = lerp(row1[x0], row1[x1], fx);
                out_row[ox] = lerp(top, bottom, fy);
            }
        }
    }
    Tensor::from_parts(spec.out_shape(), out)
}

pub fn resize_backward(spec: &ResizeSpec, grad_out: &[f64], grad_in: &mut [f64]) {
    for c in 0..spec.channels {
        let g_chan = &grad_out[c * spec.out_h * spec.out_w..][..spec.out_h * spec.out_w];
        let in_chan = &mut grad_in[c * spec.in_h * spec.in_w..][..spec.in_h * spec.in_w];
        for (oy, &(y0, y1, fy)) in spec.taps_y.iter().enumerate() {
            let g_row = &g_chan[oy * spec.out_w..][..spec.out_w];
            for (ox, &(x0, x1, fx)) in spec.taps_x.iter().enumerate() {
                let g = g_row[ox];
                in_chan[y0 * spec.in_w + x0] += g * (1.0 - fy) * (1.0 - fx);
                in_chan[y0 * spec.in_w + x1] += g * (1.0 - fy) * fx;
                in_chan[y1 * spec.in_w + x0] += g * fy * (1.0 - fx);
                in_chan[y1 * spec.in_w + x1] += g * fy * fx;
            }
        }
    }
}

// ───────────────────────── cosine correlation map ─────────────────────────

/// Norm guard below which a cosine is defined as zero (and carries zero
/// gradient).
pub const COSINE_NORM_EPS: f64 = 1e-12;

/// Cosine of every (prototype row, pixel) pair.
///
/// `features` is `[C, n]` flattened spatially, `protos` is `[P, C]`; output
/// `[P, n]`. Values are clamped to [-1, 1] against rounding overshoot.
pub fn cosine_map_forward(
    channels: usize,
    pixels: usize,
    rows: usize,
    features: &[f64],
    protos: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut feat_norms = vec![0.0; pixels];
    for j in 0..pixels {
        let mut acc = 0.0;
        for c in 0..channels {
            let v = features[c * pixels + j];
            acc += v * v;
        }
        feat_norms[j] = acc.sqrt();
    }
    let mut proto_norms = vec![0.0; rows];
    for k in 0..rows {
        let row = &protos[k * channels..][..channels];
        let mut acc = 0.0;
        for &v in row {
            acc += v * v;
        }
        proto_norms[k] = acc.sqrt();
    }
    let mut out = vec![0.0; rows * pixels];
    for k in 0..rows {
        let row = &protos[k * channels..][..channels];
        if proto_norms[k] <= COSINE_NORM_EPS {
            continue;
        }
        for j in 0..pixels {
            if feat_norms[j] <= COSINE_NORM_EPS {
                continue;
            }
            let mut dot = 0.0;
            for c in 0..channels {
                dot += row[c] * features[c * pixels + j];
            }
            out[k * pixels + j] = (dot / (feat_norms[j] * proto_norms[k])).clamp(-1.0, 1.0);
        }
    }
    (out, feat_norms, proto_norms)
}

/// Backward for [`cosine_map_forward`]; guarded entries contribute nothing.
#[allow(clippy::too_many_arguments)]
pub fn cosine_map_backward(
    channels: usize,
    pixels: usize,
    rows: usize,
    features: &[f64],
    protos: &[f64],
    feat_norms: &[f64],
    proto_norms: &[f64],
    grad_out: &[f64],
    grad_features: &mut [f64],
    grad_protos: &mut [f64],
) {
    for k in 0..rows {
        let pn = proto_norms[k];
        if pn <= COSINE_NORM_EPS {
            continue;
        }
        let row = &protos[k * channels..][..channels];
        for j in 0..pixels {
            let fn_ = feat_norms[j];
            if fn_ <= COSINE_NORM_EPS {
                continue;
            }
            let g = grad_out[k * pixels + j];
            if g == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for c in 0..channels {
                dot += row[c] * features[c * pixels + j];
            }
            let inv = 1.0 / (fn_ * pn);
            let f_coef = dot / (fn_ * fn_);
            let p_coef = dot / (pn * pn);
            for c in 0..channels {
                let f = features[c * pixels + j];
                let p = row[c];
                grad_features[c * pixels + j] += g * inv * (p - f_coef * f);
                grad_protos[k * channels + c] += g * inv * (f - p_coef * p);
            }
        }
    }
}

// ───────────────────────── weighted spatial pool ─────────────────────────

/// Per-row weighted sum over pixels divided by a per-row divisor:
/// `out[k,c] = (Σ_j weights[k,j] · features[c,j]) / divisors[k]`.
///
/// With indicator weights and the seed count as divisor this is a masked
/// mean, summing pixels in ascending index order.
pub fn weighted_pool_forward(
    channels: usize,
    pixels: usize,
    rows: usize,
    features: &[f64],
    weights: &[f64],
    divisors: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; rows * channels];
    for k in 0..rows {
        let w_row = &weights[k * pixels..][..pixels];
        for c in 0..channels {
            let feat = &features[c * pixels..][..pixels];
            let mut acc = 0.0;
            for j in 0..pixels {
                acc += w_row[j] * feat[j];
            }
            out[k * channels + c] = acc / divisors[k];
        }
    }
    out
}

pub fn weighted_pool_backward(
    channels: usize,
    pixels: usize,
    rows: usize,
    weights: &[f64],
    divisors: &[f64],
    grad_out: &[f64],
    grad_features: &mut [f64],
) {
    for k in 0..rows {
        let w_row = &weights[k * pixels..][..pixels];
        let inv = 1.0 / divisors[k];
        for c in 0..channels {
            let g = grad_out[k * channels + c] * inv;
            if g == 0.0 {
                continue;
            }
            let dst = &mut grad_features[c * pixels..][..pixels];
            for j in 0..pixels {
                dst[j] += g * w_row[j];
            }
        }
    }
}

// ───────────────────────── logistic losses ─────────────────────────

/// Numerically stable softplus ln(1 + e^x).
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
