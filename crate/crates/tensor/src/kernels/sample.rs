//! Pooling and spatial resampling of NCHW tensors.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Max pooling without padding (floor output size). Returns the output and,
/// per output element, the flat in-plane index of the selected input.
pub fn max_pool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    let ho = if h >= kernel { (h - kernel) / stride + 1 } else { 0 };
    let wo = if w >= kernel { (w - kernel) / stride + 1 } else { 0 };
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut arg = vec![0u32; out.len()];
    let d = x.data();
    for p in 0..n * c {
        let src = &d[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = (oy * stride + ky) * w + ox * stride + kx;
                        // NaN propagates like the reference implementation
                        if src[i] > best || src[i].is_nan() {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (Tensor::from_vec(&[n, c, ho, wo], out).expect("shape"), arg)
}

pub fn max_pool2d_backward<T: Scalar>(
    input_shape: &[usize],
    gy: &Tensor<T>,
    arg: &[u32],
) -> Tensor<T> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (_, _, ho, wo) = gy.dims4();
    let mut gx = vec![T::zero(); n * c * h * w];
    let g = gy.data();
    for p in 0..n * c {
        for o in 0..ho * wo {
            gx[p * h * w + arg[p * ho * wo + o] as usize] += g[p * ho * wo + o];
        }
    }
    Tensor::from_vec(input_shape, gx).expect("shape")
}

#[inline]
fn adaptive_bounds(i: usize, out: usize, len: usize) -> (usize, usize) {
    let start = (i * len) / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

pub fn adaptive_avg_pool2d_forward<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let d = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &d[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_bounds(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bounds(ox, ow, w);
                let mut s = T::zero();
                for y in y0..y1 {
                    for v in &src[y * w + x0..y * w + x1] {
                        s += *v;
                    }
                }
                out[(p * oh + oy) * ow + ox] = s / T::from_usize_lossy((y1 - y0) * (x1 - x0));
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out).expect("shape")
}

pub fn adaptive_avg_pool2d_backward<T: Scalar>(input_shape: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (_, _, oh, ow) = gy.dims4();
    let g = gy.data();
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_bounds(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bounds(ox, ow, w);
                let share =
                    g[(p * oh + oy) * ow + ox] / T::from_usize_lossy((y1 - y0) * (x1 - x0));
                for y in y0..y1 {
                    for v in &mut dst[y * w + x0..y * w + x1] {
                        *v += share;
                    }
                }
            }
        }
    }
    Tensor::from_vec(input_shape, gx).expect("shape")
}

#[inline]
fn nearest_index(o: usize, out: usize, len: usize) -> usize {
    ((o * len) / out).min(len - 1)
}

/// Nearest-neighbour resize to `oh x ow` (source index `floor(o * in / out)`).
pub fn upsample_nearest_forward<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let d = x.data();
    let cols: Vec<usize> = (0..ow).map(|ox| nearest_index(ox, ow, w)).collect();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        for oy in 0..oh {
            let iy = nearest_index(oy, oh, h);
            let src = &d[(p * h + iy) * w..(p * h + iy + 1) * w];
            let dst = &mut out[(p * oh + oy) * ow..(p * oh + oy + 1) * ow];
            for (o, &ix) in dst.iter_mut().zip(&cols) {
                *o = src[ix];
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out).expect("shape")
}

pub fn upsample_nearest_backward<T: Scalar>(input_shape: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (_, _, oh, ow) = gy.dims4();
    let g = gy.data();
    let cols: Vec<usize> = (0..ow).map(|ox| nearest_index(ox, ow, w)).collect();
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        for oy in 0..oh {
            let iy = nearest_index(oy, oh, h);
            let src = &g[(p * oh + oy) * ow..(p * oh + oy + 1) * ow];
            let dst = &mut gx[(p * h + iy) * w..(p * h + iy + 1) * w];
            for (&v, &ix) in src.iter().zip(&cols) {
                dst[ix] += v;
            }
        }
    }
    Tensor::from_vec(input_shape, gx).expect("shape")
}

/// Interpolation taps for one axis: `(i0, i1, frac)` per output position.
fn linear_taps<T: Scalar>(out: usize, len: usize, align_corners: bool) -> Vec<(usize, usize, T)> {
    (0..out)
        .map(|o| {
            let src = if align_corners {
                if out > 1 {
                    o as f64 * (len as f64 - 1.0) / (out as f64 - 1.0)
                } else {
                    0.0
                }
            } else {
                ((o as f64 + 0.5) * len as f64 / out as f64 - 0.5).max(0.0)
            };
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, T::from_f64_lossy(src - i0 as f64))
        })
        .collect()
}

/// Bilinear resize to `oh x ow`.
pub fn upsample_bilinear_forward<T: Scalar>(
    x: &Tensor<T>,
    oh: usize,
    ow: usize,
    align_corners: bool,
) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let d = x.data();
    let ty = linear_taps::<T>(oh, h, align_corners);
    let tx = linear_taps::<T>(ow, w, align_corners);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &d[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            let dst = &mut out[(p * oh + oy) * ow..(p * oh + oy + 1) * ow];
            for (o, &(x0, x1, fx)) in dst.iter_mut().zip(&tx) {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                *o = top + (bot - top) * fy;
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out).expect("shape")
}

pub fn upsample_bilinear_backward<T: Scalar>(
    input_shape: &[usize],
    gy: &Tensor<T>,
    align_corners: bool,
) -> Tensor<T> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (_, _, oh, ow) = gy.dims4();
    let g = gy.data();
    let ty = linear_taps::<T>(oh, h, align_corners);
    let tx = linear_taps::<T>(ow, w, align_corners);
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let src = &g[(p * oh + oy) * ow..(p * oh + oy + 1) * ow];
            for (&v, &(x0, x1, fx)) in src.iter().zip(&tx) {
                let top = v * (T::one() - fy);
                let bot = v * fy;
                dst[y0 * w + x0] += top * (T::one() - fx);
                dst[y0 * w + x1] += top * fx;
                dst[y1 * w + x0] += bot * (T::one() - fx);
                dst[y1 * w + x1] += bot * fx;
            }
        }
    }
    Tensor::from_vec(input_shape, gx).expect("shape")
}
