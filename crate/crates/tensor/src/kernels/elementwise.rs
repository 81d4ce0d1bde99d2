//! Broadcasting arithmetic, activations, softmax, concatenation and batched
//! matrix products.

use crate::kernels::gemm::gemm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Result shape of broadcasting `a` against `b` (equal rank, each axis equal
/// or 1 on one side).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn strides_for(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Source offsets into `shape` for every element of `out`, in row-major order.
fn broadcast_offsets(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = strides_for(shape, out);
    let total: usize = out.iter().product();
    let mut offs = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    for _ in 0..total {
        offs.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    offs
}

/// `f(a, b)` with broadcasting. Panics if shapes are incompatible.
pub fn zip_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let out = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        let v = ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(&out, v).expect("shape");
    }
    // Common case: b is per-(n, c) and a is full NCHW.
    if a.shape() == out.as_slice() && b.rank() == 4 && b.shape()[2] == 1 && b.shape()[3] == 1 {
        let (n, c, h, w) = a.dims4();
        let (bn, bc) = (b.shape()[0], b.shape()[1]);
        let plane = h * w;
        let mut v = Vec::with_capacity(a.numel());
        for img in 0..n {
            for ch in 0..c {
                let s = bd[(if bn == 1 { 0 } else { img }) * bc + if bc == 1 { 0 } else { ch }];
                let base = (img * c + ch) * plane;
                v.extend(ad[base..base + plane].iter().map(|&x| f(x, s)));
            }
        }
        return Tensor::from_vec(&out, v).expect("shape");
    }
    let oa = broadcast_offsets(a.shape(), &out);
    let ob = broadcast_offsets(b.shape(), &out);
    let v = oa.iter().zip(&ob).map(|(&i, &j)| f(ad[i], bd[j])).collect();
    Tensor::from_vec(&out, v).expect("shape")
}

/// Sums `g` (shaped like the broadcast output) back down to `shape`.
pub fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let offs = broadcast_offsets(shape, g.shape());
    let mut out = vec![T::zero(); shape.iter().product()];
    for (&o, &v) in offs.iter().zip(g.data()) {
        out[o] += v;
    }
    Tensor::from_vec(shape, out).expect("shape")
}

/// `[outer, axis, inner]` view of `shape` around `axis`.
pub fn axis_view(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_view(x.shape(), axis);
    let d = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut mx = T::neg_infinity();
            for k in 0..len {
                mx = mx.max(d[at(k)]);
            }
            let mut s = T::zero();
            for k in 0..len {
                let e = (d[at(k)] - mx).exp();
                out[at(k)] = e;
                s += e;
            }
            for k in 0..len {
                out[at(k)] /= s;
            }
        }
    }
    Tensor::from_vec(x.shape(), out).expect("shape")
}

/// Gradient through softmax given its output `y`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_view(y.shape(), axis);
    let (yd, gd) = (y.data(), gy.data());
    let mut gx = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut dot = T::zero();
            for k in 0..len {
                dot += yd[at(k)] * gd[at(k)];
            }
            for k in 0..len {
                gx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        }
    }
    Tensor::from_vec(y.shape(), gx).expect("shape")
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn concat_forward<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    let first = parts[0].shape();
    let mut shape = first.to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    for p in parts {
        let mut s = p.shape().to_vec();
        s[axis] = shape[axis];
        assert_eq!(s, shape, "concat shape mismatch");
    }
    let (outer, _, inner) = axis_view(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::from_vec(&shape, out).expect("shape")
}

/// Slices the concatenated gradient back into per-input pieces.
pub fn concat_backward<T: Scalar>(
    gy: &Tensor<T>,
    shapes: &[Vec<usize>],
    axis: usize,
) -> Vec<Tensor<T>> {
    let (outer, total, inner) = axis_view(gy.shape(), axis);
    let g = gy.data();
    let mut start = 0;
    shapes
        .iter()
        .map(|s| {
            let len = s[axis];
            let mut v = Vec::with_capacity(s.iter().product());
            for o in 0..outer {
                let base = (o * total + start) * inner;
                v.extend_from_slice(&g[base..base + len * inner]);
            }
            start += len;
            Tensor::from_vec(s, v).expect("shape")
        })
        .collect()
}

/// Batched `op(a) @ op(b)` over rank-3 tensors. With `ta`, `a` is stored
/// `[B, k, m]`; with `tb`, `b` is stored `[B, n, k]`.
pub fn batched_matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "matmul shapes {sa:?} {sb:?}");
    let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
    let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
    assert_eq!(k, k2, "matmul inner dims {sa:?} {sb:?}");
    let batch = sa[0];
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            ta,
            &b.data()[i * k * n..(i + 1) * k * n],
            tb,
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    Tensor::from_vec(&[batch, m, n], out).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(shape: &[usize], phase: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64) * 0.71 + phase).sin())
    }

    #[test]
    fn broadcast_add_matches_explicit_expansion() {
        let a = wave(&[2, 3, 2, 2], 0.0);
        let b = wave(&[2, 3, 1, 1], 1.0);
        let c = wave(&[1, 3, 2, 1], 2.0);
        for other in [&b, &c] {
            let y = zip_broadcast(&a, other, |x, y| x + y);
            let (n, ch, h, w) = a.dims4();
            let os = other.shape();
            for i in 0..n * ch * h * w {
                let (img, r) = (i / (ch * h * w), i % (ch * h * w));
                let (cc, r) = (r / (h * w), r % (h * w));
                let (yy, xx) = (r / w, r % w);
                let j = (((if os[0] == 1 { 0 } else { img }) * os[1] + cc) * os[2]
                    + if os[2] == 1 { 0 } else { yy })
                    * os[3]
                    + if os[3] == 1 { 0 } else { xx };
                assert_eq!(y.data()[i], a.data()[i] + other.data()[j]);
            }
            let r = reduce_to(&Tensor::<f64>::ones(a.shape()), other.shape());
            let per = a.numel() as f64 / other.numel() as f64;
            assert!(r.data().iter().all(|&v| v == per));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_gradient_matches_fd() {
        let x = wave(&[2, 4, 3], 0.3);
        let y = softmax_forward(&x, 1);
        for o in 0..2 {
            for i in 0..3 {
                let s: f64 = (0..4).map(|k| y.data()[(o * 4 + k) * 3 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let gy = wave(&[2, 4, 3], 1.7);
        let gx = softmax_backward(&y, &gy, 1);
        let f = |x: &Tensor<f64>| -> f64 {
            softmax_forward(x, 1).data().iter().zip(gy.data()).map(|(a, b)| a * b).sum()
        };
        for i in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = x.clone();
            m.data_mut()[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - gx.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn concat_round_trips_through_backward() {
        let a = wave(&[2, 1, 2, 2], 0.0);
        let b = wave(&[2, 3, 2, 2], 1.0);
        let y = concat_forward(&[&a, &b], 1);
        assert_eq!(y.shape(), &[2, 4, 2, 2]);
        let parts = concat_backward(&y, &[a.shape().to_vec(), b.shape().to_vec()], 1);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn batched_matmul_transposes() {
        let a = wave(&[2, 3, 4], 0.0);
        let b = wave(&[2, 4, 5], 0.5);
        let y = batched_matmul(&a, &b, false, false);
        for bi in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let e: f64 = (0..4)
                        .map(|k| a.data()[(bi * 3 + i) * 4 + k] * b.data()[(bi * 4 + k) * 5 + j])
                        .sum();
                    assert!((y.data()[(bi * 3 + i) * 5 + j] - e).abs() < 1e-12);
                }
            }
        }
        // (a^T)^T b: store a transposed and ask for the transpose back
        let mut at = vec![0.0; 24];
        for bi in 0..2 {
            for i in 0..3 {
                for k in 0..4 {
                    at[(bi * 4 + k) * 3 + i] = a.data()[(bi * 3 + i) * 4 + k];
                }
            }
        }
        let at = Tensor::from_vec(&[2, 4, 3], at).unwrap();
        let y2 = batched_matmul(&at, &b, true, false);
        assert!(y.max_abs_diff(&y2).unwrap() < 1e-12);
    }
}
