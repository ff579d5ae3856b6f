//! Raw forward and backward kernels over flat row-major buffers.
//!
//! Everything here is free of tape bookkeeping. The autodiff layer and the
//! straight-line baseline path both call into these functions, which is what
//! makes bitwise comparisons between the two meaningful.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::tensor::Real;

/// `c = alpha * op(a) * op(b) + beta * c` with `op` an optional transpose.
///
/// `a` is stored as `[m, k]` (or `[k, m]` when `trans_a`), `b` as `[k, n]`
/// (or `[n, k]` when `trans_b`), `c` as `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    let a = if trans_a {
        ArrayView2::from_shape((k, m), a).expect("gemm: a shape").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm: a shape")
    };
    let b = if trans_b {
        ArrayView2::from_shape((n, k), b).expect("gemm: b shape").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm: b shape")
    };
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm: c shape");
    general_mat_mul(alpha, &a, &b, beta, &mut c);
}

/// Static description of a 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Real>(g: &ConvGeometry, input: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let src = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        dst[oy * g.out_w + ox] = if iy >= 0
                            && (iy as usize) < g.in_h
                            && ix >= 0
                            && (ix as usize) < g.in_w
                        {
                            src[iy as usize * g.in_w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeometry, cols: &[T], input_grad: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let dst = &mut input_grad[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.in_h {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix < 0 || ix as usize >= g.in_w {
                            continue;
                        }
                        dst[iy as usize * g.in_w + ix as usize] =
                            dst[iy as usize * g.in_w + ix as usize] + src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * plane;
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * plane]
    };
    for n in 0..g.batch {
        let x = &input[n * in_len..(n + 1) * in_len];
        let y = &mut out[n * out_len..(n + 1) * out_len];
        for (k, row) in y.chunks_mut(plane).enumerate() {
            row.fill(bias[k]);
        }
        let patches: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut cols);
            &cols
        };
        gemm(
            g.out_channels,
            g.patch_len(),
            plane,
            T::one(),
            weight,
            false,
            patches,
            false,
            T::one(),
            y,
        );
    }
    out
}

/// Accumulates gradients of a convolution into whichever of the three
/// buffers are supplied.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    out_grad: &[T],
    input_grad: Option<&mut [T]>,
    weight_grad: Option<&mut [T]>,
    bias_grad: Option<&mut [T]>,
) {
    let plane = g.out_plane();
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * plane;
    if let Some(db) = bias_grad {
        for n in 0..g.batch {
            let dy = &out_grad[n * out_len..(n + 1) * out_len];
            for (k, row) in dy.chunks(plane).enumerate() {
                db[k] = db[k] + row.iter().copied().sum::<T>();
            }
        }
    }
    let mut cols = vec![T::zero(); g.patch_len() * plane];
    if let Some(dw) = weight_grad {
        for n in 0..g.batch {
            let x = &input[n * in_len..(n + 1) * in_len];
            let dy = &out_grad[n * out_len..(n + 1) * out_len];
            let patches: &[T] = if g.is_pointwise() {
                x
            } else {
                im2col(g, x, &mut cols);
                &cols
            };
            gemm(
                g.out_channels,
                plane,
                g.patch_len(),
                T::one(),
                dy,
                false,
                patches,
                true,
                T::one(),
                dw,
            );
        }
    }
    if let Some(dx) = input_grad {
        for n in 0..g.batch {
            let dy = &out_grad[n * out_len..(n + 1) * out_len];
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm(
                    g.patch_len(),
                    g.out_channels,
                    plane,
                    T::one(),
                    weight,
                    true,
                    dy,
                    false,
                    T::one(),
                    dxn,
                );
            } else {
                gemm(
                    g.patch_len(),
                    g.out_channels,
                    plane,
                    T::one(),
                    weight,
                    true,
                    dy,
                    false,
                    T::zero(),
                    &mut cols,
                );
                col2im_add(g, &cols, dxn);
            }
        }
    }
}

/// Per-axis interpolation taps for align-corners-false bilinear resizing.
#[derive(Debug, Clone, Copy)]
pub struct Tap<T> {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: T,
    pub w_hi: T,
}

pub fn resize_taps<T: Real>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = T::from_f64(src - lo as f64);
            Tap {
                lo,
                hi,
                w_lo: T::one() - frac,
                w_hi: frac,
            }
        })
        .collect()
}

pub fn resize_forward<T: Real>(
    planes: usize,
    (in_h, in_w): (usize, usize),
    (out_h, out_w): (usize, usize),
    input: &[T],
) -> Vec<T> {
    if (in_h, in_w) == (out_h, out_w) {
        return input.to_vec();
    }
    let ty = resize_taps::<T>(in_h, out_h);
    let tx = resize_taps::<T>(in_w, out_w);
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let src = &input[p * in_h * in_w..(p + 1) * in_h * in_w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, y) in ty.iter().enumerate() {
            let r0 = &src[y.lo * in_w..(y.lo + 1) * in_w];
            let r1 = &src[y.hi * in_w..(y.hi + 1) * in_w];
            for (ox, x) in tx.iter().enumerate() {
                dst[oy * out_w + ox] = y.w_lo * (x.w_lo * r0[x.lo] + x.w_hi * r0[x.hi])
                    + y.w_hi * (x.w_lo * r1[x.lo] + x.w_hi * r1[x.hi]);
            }
        }
    }
    out
}

pub fn resize_backward<T: Real>(
    planes: usize,
    (in_h, in_w): (usize, usize),
    (out_h, out_w): (usize, usize),
    out_grad: &[T],
    input_grad: &mut [T],
) {
    if (in_h, in_w) == (out_h, out_w) {
        for (d, &g) in input_grad.iter_mut().zip(out_grad) {
            *d = *d + g;
        }
        return;
    }
    let ty = resize_taps::<T>(in_h, out_h);
    let tx = resize_taps::<T>(in_w, out_w);
    for p in 0..planes {
        let dy = &out_grad[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dx = &mut input_grad[p * in_h * in_w..(p + 1) * in_h * in_w];
        for (oy, y) in ty.iter().enumerate() {
            for (ox, x) in tx.iter().enumerate() {
                let g = dy[oy * out_w + ox];
                dx[y.lo * in_w + x.lo] = dx[y.lo * in_w + x.lo] + g * y.w_lo * x.w_lo;
                dx[y.lo * in_w + x.hi] = dx[y.lo * in_w + x.hi] + g * y.w_lo * x.w_hi;
                dx[y.hi * in_w + x.lo] = dx[y.hi * in_w + x.lo] + g * y.w_hi * x.w_lo;
                dx[y.hi * in_w + x.hi] = dx[y.hi * in_w + x.hi] + g * y.w_hi * x.w_hi;
            }
        }
    }
}

/// Half-open input range covered by adaptive-pooling bin `i` of `out_len`.
pub fn adaptive_bin(i: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let start = i * in_len / out_len;
    let end = ((i + 1) * in_len).div_ceil(out_len);
    (start, end)
}

pub fn adaptive_avg_pool_forward<T: Real>(
    planes: usize,
    (in_h, in_w): (usize, usize),
    (out_h, out_w): (usize, usize),
    input: &[T],
) -> Vec<T> {
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let src = &input[p * in_h * in_w..(p + 1) * in_h * in_w];
        for i in 0..out_h {
            let (y0, y1) = adaptive_bin(i, in_h, out_h);
            for j in 0..out_w {
                let (x0, x1) = adaptive_bin(j, in_w, out_w);
                let mut acc = T::zero();
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc = acc + src[y * in_w + x];
                    }
                }
                let count = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                out[(p * out_h + i) * out_w + j] = acc / count;
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward<T: Real>(
    planes: usize,
    (in_h, in_w): (usize, usize),
    (out_h, out_w): (usize, usize),
    out_grad: &[T],
    input_grad: &mut [T],
) {
    for p in 0..planes {
        let dst = &mut input_grad[p * in_h * in_w..(p + 1) * in_h * in_w];
        for i in 0..out_h {
            let (y0, y1) = adaptive_bin(i, in_h, out_h);
            for j in 0..out_w {
                let (x0, x1) = adaptive_bin(j, in_w, out_w);
                let count = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                let g = out_grad[(p * out_h + i) * out_w + j] / count;
                for y in y0..y1 {
                    for x in x0..x1 {
                        dst[y * in_w + x] = dst[y * in_w + x] + g;
                    }
                }
            }
        }
    }
}

/// Per-plane maximum and the row-major-first index attaining it.
pub fn global_max_pool_forward<T: Real>(planes: usize, plane_len: usize, input: &[T]) -> (Vec<T>, Vec<usize>) {
    let mut values = Vec::with_capacity(planes);
    let mut argmax = Vec::with_capacity(planes);
    for p in 0..planes {
        let src = &input[p * plane_len..(p + 1) * plane_len];
        let mut best = 0;
        for (i, &v) in src.iter().enumerate() {
            if v > src[best] {
                best = i;
            }
        }
        values.push(src[best]);
        argmax.push(p * plane_len + best);
    }
    (values, argmax)
}

/// One RoI mapped into a feature map's coordinate frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignWindow {
    pub batch: usize,
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

impl AlignWindow {
    /// Maps an image-space box with the half-pixel convention: feature cell
    /// `i` is centered on image coordinate `(i + 0.5) * stride`.
    pub fn from_image_box(batch: usize, x1: f64, y1: f64, x2: f64, y2: f64, stride: f64) -> Self {
        let x0 = x1 / stride - 0.5;
        let y0 = y1 / stride - 0.5;
        Self {
            batch,
            x0,
            y0,
            width: x2 / stride - 0.5 - x0,
            height: y2 / stride - 0.5 - y0,
        }
    }

    /// True when at least part of the window can produce nonzero samples.
    pub fn overlaps(&self, h: usize, w: usize) -> bool {
        self.x0 + self.width >= -1.0
            && self.x0 <= w as f64
            && self.y0 + self.height >= -1.0
            && self.y0 <= h as f64
    }

    /// Sample coordinates `(y, x)` for output bin `(i, j)`.
    pub fn samples(&self, i: usize, j: usize, out: (usize, usize), ratio: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
        let bin_h = self.height / out.0 as f64;
        let bin_w = self.width / out.1 as f64;
        (0..ratio).flat_map(move |iy| {
            let y = self.y0 + i as f64 * bin_h + (iy as f64 + 0.5) * bin_h / ratio as f64;
            (0..ratio).map(move |ix| {
                let x = self.x0 + j as f64 * bin_w + (ix as f64 + 0.5) * bin_w / ratio as f64;
                (y, x)
            })
        })
    }
}

/// Four-corner bilinear taps for a point, or `None` if it falls outside the
/// `[-1, size]` band where RoI-Align contributes nothing.
pub fn bilinear_corners(y: f64, x: f64, h: usize, w: usize) -> Option<[(usize, f64); 4]> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    let (y_lo, y_hi, ly) = clamp_axis(y.max(0.0), h);
    let (x_lo, x_hi, lx) = clamp_axis(x.max(0.0), w);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Some([
        (y_lo * w + x_lo, hy * hx),
        (y_lo * w + x_hi, hy * lx),
        (y_hi * w + x_lo, ly * hx),
        (y_hi * w + x_hi, ly * lx),
    ])
}

fn clamp_axis(v: f64, len: usize) -> (usize, usize, f64) {
    let lo = v.floor() as usize;
    if lo >= len - 1 {
        (len - 1, len - 1, 0.0)
    } else {
        (lo, lo + 1, v - lo as f64)
    }
}

pub fn roi_align_forward<T: Real>(
    channels: usize,
    (h, w): (usize, usize),
    input: &[T],
    windows: &[AlignWindow],
    out: (usize, usize),
    ratio: usize,
) -> Vec<T> {
    let bins = out.0 * out.1;
    let norm = T::from_f64(1.0 / (ratio * ratio) as f64);
    let mut result = vec![T::zero(); windows.len() * channels * bins];
    for (r, win) in windows.iter().enumerate() {
        for i in 0..out.0 {
            for j in 0..out.1 {
                let taps: Vec<_> = win
                    .samples(i, j, out, ratio)
                    .filter_map(|(y, x)| bilinear_corners(y, x, h, w))
                    .collect();
                for c in 0..channels {
                    let plane = &input[((win.batch * channels) + c) * h * w..][..h * w];
                    let mut acc = T::zero();
                    for corners in &taps {
                        for &(idx, wt) in corners {
                            acc = acc + T::from_f64(wt) * plane[idx];
                        }
                    }
                    result[(r * channels + c) * bins + i * out.1 + j] = acc * norm;
                }
            }
        }
    }
    result
}

pub fn roi_align_backward<T: Real>(
    channels: usize,
    (h, w): (usize, usize),
    windows: &[AlignWindow],
    out: (usize, usize),
    ratio: usize,
    out_grad: &[T],
    input_grad: &mut [T],
) {
    let bins = out.0 * out.1;
    let norm = T::from_f64(1.0 / (ratio * ratio) as f64);
    for (r, win) in windows.iter().enumerate() {
        for i in 0..out.0 {
            for j in 0..out.1 {
                let taps: Vec<_> = win
                    .samples(i, j, out, ratio)
                    .filter_map(|(y, x)| bilinear_corners(y, x, h, w))
                    .collect();
                for c in 0..channels {
                    let g = out_grad[(r * channels + c) * bins + i * out.1 + j] * norm;
                    let plane = &mut input_grad[((win.batch * channels) + c) * h * w..][..h * w];
                    for corners in &taps {
                        for &(idx, wt) in corners {
                            plane[idx] = plane[idx] + T::from_f64(wt) * g;
                        }
                    }
                }
            }
        }
    }
}
