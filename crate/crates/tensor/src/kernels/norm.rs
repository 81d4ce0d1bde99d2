use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel statistics captured by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (divides by the element count).
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Scalar> BatchStats<T> {
    /// Unbiased variance used for running-statistic updates.
    pub fn unbiased_var(&self) -> Vec<T> {
        if self.count < 2 {
            return self.var.clone();
        }
        let f = T::from_usize_lossy(self.count) / T::from_usize_lossy(self.count - 1);
        self.var.iter().map(|&v| v * f).collect()
    }
}

fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>, usize) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let count = n * plane;
    let d = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for img in 0..n {
            for &v in &d[(img * c + ch) * plane..(img * c + ch + 1) * plane] {
                s += v.to_f64_lossy();
            }
        }
        let m = s / count as f64;
        let mut ss = 0.0f64;
        for img in 0..n {
            for &v in &d[(img * c + ch) * plane..(img * c + ch + 1) * plane] {
                let dv = v.to_f64_lossy() - m;
                ss += dv * dv;
            }
        }
        mean[ch] = T::from_f64_lossy(m);
        var[ch] = T::from_f64_lossy(ss / count as f64);
    }
    (mean, var, count)
}

/// `y = (x - mean) * invstd * gamma + beta` per channel.
pub fn channel_affine<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    invstd: &[T],
    gamma: &[T],
    beta: &[T],
) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = x.data().to_vec();
    for img in 0..n {
        for ch in 0..c {
            let scale = invstd[ch] * gamma[ch];
            let shift = beta[ch] - mean[ch] * scale;
            for v in &mut out[(img * c + ch) * plane..(img * c + ch + 1) * plane] {
                *v = *v * scale + shift;
            }
        }
    }
    Tensor::from_vec(x.shape(), out).expect("shape")
}

pub fn batch_norm_train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Tensor<T>, BatchStats<T>, Vec<T>) {
    let (mean, var, count) = channel_moments(x);
    let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let y = channel_affine(x, &mean, &invstd, gamma, beta);
    (y, BatchStats { mean, var, count }, invstd)
}

/// Gradients of a training-mode batch norm: `(gx, ggamma, gbeta)`.
pub fn batch_norm_train_backward<T: Scalar>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    invstd: &[T],
    need_gx: bool,
) -> (Option<Tensor<T>>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let m = T::from_usize_lossy(n * plane);
    let xd = x.data();
    let gyd = gy.data();
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sg = T::zero();
        let mut sgx = T::zero();
        for img in 0..n {
            let r = (img * c + ch) * plane..(img * c + ch + 1) * plane;
            for (&g, &xv) in gyd[r.clone()].iter().zip(&xd[r]) {
                sg += g;
                sgx += g * (xv - mean[ch]) * invstd[ch];
            }
        }
        gbeta[ch] = sg;
        ggamma[ch] = sgx;
    }
    let gx = need_gx.then(|| {
        let mut gx = vec![T::zero(); x.numel()];
        for ch in 0..c {
            let k = gamma[ch] * invstd[ch] / m;
            for img in 0..n {
                let r = (img * c + ch) * plane..(img * c + ch + 1) * plane;
                for ((o, &g), &xv) in gx[r.clone()].iter_mut().zip(&gyd[r.clone()]).zip(&xd[r]) {
                    let xhat = (xv - mean[ch]) * invstd[ch];
                    *o = k * (m * g - gbeta[ch] - xhat * ggamma[ch]);
                }
            }
        }
        Tensor::from_vec(x.shape(), gx).expect("shape")
    });
    (gx, ggamma, gbeta)
}

/// Gradients of a fixed-statistics (inference) batch norm.
pub fn batch_norm_eval_backward<T: Scalar>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    invstd: &[T],
    need_gx: bool,
) -> (Option<Tensor<T>>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let xd = x.data();
    let gyd = gy.data();
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    let mut gx = need_gx.then(|| vec![T::zero(); x.numel()]);
    for img in 0..n {
        for ch in 0..c {
            let r = (img * c + ch) * plane..(img * c + ch + 1) * plane;
            let k = gamma[ch] * invstd[ch];
            for (i, (&g, &xv)) in gyd[r.clone()].iter().zip(&xd[r.clone()]).enumerate() {
                gbeta[ch] += g;
                ggamma[ch] += g * (xv - mean[ch]) * invstd[ch];
                if let Some(gx) = gx.as_deref_mut() {
                    gx[r.start + i] = g * k;
                }
            }
        }
    }
    (
        gx.map(|v| Tensor::from_vec(x.shape(), v).expect("shape")),
        ggamma,
        gbeta,
    )
}

/// Group normalization forward; returns per-(sample, group) mean and invstd.
pub fn group_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    groups: usize,
    eps: T,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    let cg = c / groups;
    let span = cg * h * w;
    let plane = h * w;
    let d = x.data();
    let mut mean = vec![T::zero(); n * groups];
    let mut invstd = vec![T::zero(); n * groups];
    let mut out = vec![T::zero(); x.numel()];
    for img in 0..n {
        for grp in 0..groups {
            let base = (img * c + grp * cg) * plane;
            let seg = &d[base..base + span];
            let m = seg.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / span as f64;
            let var = seg
                .iter()
                .map(|v| {
                    let dv = v.to_f64_lossy() - m;
                    dv * dv
                })
                .sum::<f64>()
                / span as f64;
            let mt = T::from_f64_lossy(m);
            let is = T::one() / (T::from_f64_lossy(var) + eps).sqrt();
            mean[img * groups + grp] = mt;
            invstd[img * groups + grp] = is;
            for cc in 0..cg {
                let ch = grp * cg + cc;
                let r = base + cc * plane..base + (cc + 1) * plane;
                for (o, &v) in out[r.clone()].iter_mut().zip(&d[r]) {
                    *o = (v - mt) * is * gamma[ch] + beta[ch];
                }
            }
        }
    }
    (Tensor::from_vec(x.shape(), out).expect("shape"), mean, invstd)
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    gamma: &[T],
    groups: usize,
    mean: &[T],
    invstd: &[T],
    need_gx: bool,
) -> (Option<Tensor<T>>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    let cg = c / groups;
    let plane = h * w;
    let span = T::from_usize_lossy(cg * plane);
    let xd = x.data();
    let gyd = gy.data();
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    let mut gx = need_gx.then(|| vec![T::zero(); x.numel()]);
    for img in 0..n {
        for grp in 0..groups {
            let mt = mean[img * groups + grp];
            let is = invstd[img * groups + grp];
            let base = (img * c + grp * cg) * plane;
            // sums of dxhat and dxhat * xhat over the group
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for cc in 0..cg {
                let ch = grp * cg + cc;
                let r = base + cc * plane..base + (cc + 1) * plane;
                for (&g, &xv) in gyd[r.clone()].iter().zip(&xd[r]) {
                    let xhat = (xv - mt) * is;
                    gbeta[ch] += g;
                    ggamma[ch] += g * xhat;
                    let dxhat = g * gamma[ch];
                    s1 += dxhat;
                    s2 += dxhat * xhat;
                }
            }
            if let Some(gx) = gx.as_deref_mut() {
                for cc in 0..cg {
                    let ch = grp * cg + cc;
                    let r = base + cc * plane..base + (cc + 1) * plane;
                    for ((o, &g), &xv) in gx[r.clone()].iter_mut().zip(&gyd[r.clone()]).zip(&xd[r])
                    {
                        let xhat = (xv - mt) * is;
                        *o = is / span * (span * g * gamma[ch] - s1 - xhat * s2);
                    }
                }
            }
        }
    }
    (
        gx.map(|v| Tensor::from_vec(x.shape(), v).expect("shape")),
        ggamma,
        gbeta,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(shape: &[usize], phase: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64) * 0.53 + phase).sin() * 2.0 + 0.3)
    }

    fn fd_check(
        x: &Tensor<f64>,
        gamma: &[f64],
        beta: &[f64],
        gy: &Tensor<f64>,
        f: &dyn Fn(&Tensor<f64>, &[f64], &[f64]) -> Tensor<f64>,
        gx: &Tensor<f64>,
        ggamma: &[f64],
        gbeta: &[f64],
    ) {
        let obj = |x: &Tensor<f64>, g: &[f64], b: &[f64]| -> f64 {
            f(x, g, b).data().iter().zip(gy.data()).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (obj(&xp, gamma, beta) - obj(&xm, gamma, beta)) / (2.0 * eps);
            assert!((fd - gx.data()[i]).abs() < 1e-6, "gx[{i}] fd {fd} vs {}", gx.data()[i]);
        }
        for i in 0..gamma.len() {
            let mut gp = gamma.to_vec();
            gp[i] += eps;
            let mut gm = gamma.to_vec();
            gm[i] -= eps;
            let fd = (obj(x, &gp, beta) - obj(x, &gm, beta)) / (2.0 * eps);
            assert!((fd - ggamma[i]).abs() < 1e-6);
            let mut bp = beta.to_vec();
            bp[i] += eps;
            let mut bm = beta.to_vec();
            bm[i] -= eps;
            let fd = (obj(x, gamma, &bp) - obj(x, gamma, &bm)) / (2.0 * eps);
            assert!((fd - gbeta[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_train_normalizes_and_differentiates() {
        let x = wave(&[3, 2, 2, 3], 0.0);
        let gamma = [1.5, -0.7];
        let beta = [0.2, 0.4];
        let (y, stats, invstd) = batch_norm_train_forward(&x, &gamma, &beta, 1e-5);
        // normalized channel has the affine mean
        let (mean, _, _) = channel_moments(&y);
        assert!((mean[0] - 0.2).abs() < 1e-12 && (mean[1] - 0.4).abs() < 1e-12);
        assert_eq!(stats.count, 18);
        let gy = wave(y.shape(), 1.0);
        let (gx, gg, gb) =
            batch_norm_train_backward(&x, &gy, &gamma, &stats.mean, &invstd, true);
        let f = |x: &Tensor<f64>, g: &[f64], b: &[f64]| batch_norm_train_forward(x, g, b, 1e-5).0;
        fd_check(&x, &gamma, &beta, &gy, &f, &gx.unwrap(), &gg, &gb);
    }

    #[test]
    fn batch_norm_eval_differentiates() {
        let x = wave(&[2, 3, 2, 2], 0.4);
        let gamma = [1.0, 2.0, 0.5];
        let beta = [0.0, 0.1, -0.3];
        let mean = [0.1, -0.2, 0.3];
        let var: [f64; 3] = [1.2, 0.5, 2.0];
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + 1e-3).sqrt()).collect();
        let f = |x: &Tensor<f64>, g: &[f64], b: &[f64]| channel_affine(x, &mean, &invstd, g, b);
        let gy = wave(x.shape(), 2.0);
        let (gx, gg, gb) = batch_norm_eval_backward(&x, &gy, &gamma, &mean, &invstd, true);
        fd_check(&x, &gamma, &beta, &gy, &f, &gx.unwrap(), &gg, &gb);
    }

    #[test]
    fn group_norm_differentiates() {
        let x = wave(&[2, 4, 2, 3], 0.7);
        let gamma = [1.0, 0.5, -1.0, 2.0];
        let beta = [0.0, 0.1, 0.2, 0.3];
        let (y, mean, invstd) = group_norm_forward(&x, &gamma, &beta, 2, 1e-5);
        let gy = wave(y.shape(), 0.2);
        let (gx, gg, gb) = group_norm_backward(&x, &gy, &gamma, 2, &mean, &invstd, true);
        let f = |x: &Tensor<f64>, g: &[f64], b: &[f64]| group_norm_forward(x, g, b, 2, 1e-5).0;
        fd_check(&x, &gamma, &beta, &gy, &f, &gx.unwrap(), &gg, &gb);
    }

    #[test]
    fn unbiased_variance_rescales() {
        let stats = BatchStats {
            mean: vec![0.0f64],
            var: vec![1.0],
            count: 4,
        };
        assert!((stats.unbiased_var()[0] - 4.0 / 3.0).abs() < 1e-15);
    }
}
