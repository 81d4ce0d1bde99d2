use crate::error::{Result, TensorError};
use crate::kernels::gemm::gemm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Zero padding applied to each border of the input plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Padding2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding2d {
    pub fn uniform(p: usize) -> Self {
        Padding2d {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    pub fn symmetric(ph: usize, pw: usize) -> Self {
        Padding2d {
            top: ph,
            bottom: ph,
            left: pw,
            right: pw,
        }
    }
}

/// Window geometry shared by convolution, its transpose and the
/// im2col/col2im helpers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding2d,
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Conv2dGeometry {
    pub fn new(kernel: usize) -> Self {
        Conv2dGeometry {
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: Padding2d::default(),
            dilation: (1, 1),
            groups: 1,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: Padding2d) -> Self {
        self.padding = p;
        self
    }

    pub fn pad(self, p: usize) -> Self {
        self.padding(Padding2d::uniform(p))
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    /// Output extent for an `h x w` input, or `None` if the padded input is
    /// smaller than the dilated kernel.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let span_h = self.dilation.0 * (self.kernel.0 - 1) + 1;
        let span_w = self.dilation.1 * (self.kernel.1 - 1) + 1;
        let ph = h + self.padding.top + self.padding.bottom;
        let pw = w + self.padding.left + self.padding.right;
        if ph < span_h || pw < span_w {
            return None;
        }
        Some(((ph - span_h) / self.stride.0 + 1, (pw - span_w) / self.stride.1 + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == Padding2d::default()
    }
}

/// Range of output columns whose input column `o*stride + off` lies inside `[0, w)`.
#[inline]
fn valid_range(len_out: usize, stride: usize, off: isize, w: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi_excl = {
        // largest o with o*s + off <= w-1
        let lim = w as isize - 1 - off;
        if lim < 0 {
            0
        } else {
            (lim / s + 1).min(len_out as isize)
        }
    };
    let lo = (lo as usize).min(len_out);
    let hi = (hi_excl.max(0) as usize).max(lo);
    (lo, hi)
}

/// Unfold `x` (`c x h x w`) into columns (`c*kh*kw x ho*wo`).
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: &Conv2dGeometry,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (dh, dw) = g.dilation;
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            let off_y = (ky * dh) as isize - g.padding.top as isize;
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let off_x = (kx * dw) as isize - g.padding.left as isize;
                let (lo, hi) = valid_range(wo, sw, off_x, w);
                for oy in 0..ho {
                    let iy = (oy * sh) as isize + off_y;
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let in_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if sw == 1 {
                        let start = (lo as isize + off_x) as usize;
                        out[lo..hi].copy_from_slice(&in_row[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            out[ox] = in_row[((ox * sw) as isize + off_x) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: fold columns back, accumulating into `x`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: &Conv2dGeometry,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (dh, dw) = g.dilation;
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            let off_y = (ky * dh) as isize - g.padding.top as isize;
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let off_x = (kx * dw) as isize - g.padding.left as isize;
                let (lo, hi) = valid_range(wo, sw, off_x, w);
                for oy in 0..ho {
                    let iy = (oy * sh) as isize + off_y;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let out_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let in_row = &src[oy * wo..(oy + 1) * wo];
                    if sw == 1 {
                        let start = (lo as isize + off_x) as usize;
                        for (o, &v) in out_row[start..start + (hi - lo)]
                            .iter_mut()
                            .zip(&in_row[lo..hi])
                        {
                            *o += v;
                        }
                    } else {
                        for ox in lo..hi {
                            out_row[((ox * sw) as isize + off_x) as usize] += in_row[ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_shapes<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Conv2dGeometry,
) -> Result<(usize, usize)> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(TensorError::Shape {
            op: "conv2d",
            detail: format!("input {:?} / weight {:?} must be rank 4", x.shape(), w.shape()),
        });
    }
    let (_, cin, h, wd) = x.dims4();
    let (cout, cin_g, kh, kw) = w.dims4();
    if g.groups == 0 || cin % g.groups != 0 || cout % g.groups != 0 || cin / g.groups != cin_g {
        return Err(TensorError::Shape {
            op: "conv2d",
            detail: format!(
                "input channels {cin}, weight {:?}, groups {}",
                w.shape(),
                g.groups
            ),
        });
    }
    if (kh, kw) != g.kernel {
        return Err(TensorError::Shape {
            op: "conv2d",
            detail: format!("weight kernel {kh}x{kw} vs geometry {:?}", g.kernel),
        });
    }
    g.output_size(h, wd).ok_or_else(|| TensorError::Shape {
        op: "conv2d",
        detail: format!("input {h}x{wd} smaller than kernel window {:?}", g),
    })
}

fn is_depthwise<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &Conv2dGeometry) -> bool {
    let cin = x.shape()[1];
    g.groups == cin && g.groups > 1 && w.shape()[0] == cin && w.shape()[1] == 1
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: &Conv2dGeometry,
) -> Result<Tensor<T>> {
    let (ho, wo) = check_conv_shapes(x, w, g)?;
    let (n, cin, h, wd) = x.dims4();
    let cout = w.shape()[0];
    let mut out = vec![T::zero(); n * cout * ho * wo];
    let plane_in = h * wd;
    let plane_out = ho * wo;
    let xd = x.data();
    let wdata = w.data();

    if is_depthwise(x, w, g) {
        for img in 0..n {
            for c in 0..cin {
                let src = &xd[(img * cin + c) * plane_in..(img * cin + c + 1) * plane_in];
                let dst = &mut out[(img * cout + c) * plane_out..(img * cout + c + 1) * plane_out];
                let kern = &wdata[c * g.kernel.0 * g.kernel.1..(c + 1) * g.kernel.0 * g.kernel.1];
                depthwise_plane_forward(src, h, wd, kern, g, ho, wo, dst);
            }
        }
    } else if g.is_pointwise() && g.groups == 1 {
        for img in 0..n {
            gemm(
                cout,
                cin,
                plane_out,
                wdata,
                false,
                &xd[img * cin * plane_in..(img + 1) * cin * plane_in],
                false,
                &mut out[img * cout * plane_out..(img + 1) * cout * plane_out],
                false,
            );
        }
    } else {
        let groups = g.groups;
        let cin_g = cin / groups;
        let cout_g = cout / groups;
        let k = cin_g * g.kernel.0 * g.kernel.1;
        let mut col = vec![T::zero(); k * plane_out];
        for img in 0..n {
            for grp in 0..groups {
                let src = &xd[(img * cin + grp * cin_g) * plane_in
                    ..(img * cin + (grp + 1) * cin_g) * plane_in];
                im2col(src, cin_g, h, wd, g, ho, wo, &mut col);
                gemm(
                    cout_g,
                    k,
                    plane_out,
                    &wdata[grp * cout_g * k..(grp + 1) * cout_g * k],
                    false,
                    &col,
                    false,
                    &mut out[(img * cout + grp * cout_g) * plane_out
                        ..(img * cout + (grp + 1) * cout_g) * plane_out],
                    false,
                );
            }
        }
    }

    if let Some(b) = b {
        add_channel_bias(&mut out, b.data(), n, cout, plane_out);
    }
    Tensor::from_vec(&[n, cout, ho, wo], out)
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], n: usize, c: usize, plane: usize) {
    for img in 0..n {
        for ch in 0..c {
            let bv = bias[ch];
            for v in &mut out[(img * c + ch) * plane..(img * c + ch + 1) * plane] {
                *v += bv;
            }
        }
    }
}

/// Sum of `gy` over batch and spatial axes: the bias gradient.
pub fn channel_sum<T: Scalar>(gy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = gy.dims4();
    let plane = h * w;
    let d = gy.data();
    let mut out = vec![T::zero(); c];
    for img in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += d[(img * c + ch) * plane..(img * c + ch + 1) * plane]
                .iter()
                .copied()
                .sum::<T>();
        }
    }
    Tensor::from_vec(&[c], out).expect("length matches")
}

#[allow(clippy::too_many_arguments)]
fn depthwise_plane_forward<T: Scalar>(
    src: &[T],
    h: usize,
    w: usize,
    kern: &[T],
    g: &Conv2dGeometry,
    ho: usize,
    wo: usize,
    dst: &mut [T],
) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (dh, dw) = g.dilation;
    for ky in 0..kh {
        let off_y = (ky * dh) as isize - g.padding.top as isize;
        for kx in 0..kw {
            let wv = kern[ky * kw + kx];
            let off_x = (kx * dw) as isize - g.padding.left as isize;
            let (lo, hi) = valid_range(wo, sw, off_x, w);
            if lo >= hi {
                continue;
            }
            for oy in 0..ho {
                let iy = (oy * sh) as isize + off_y;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let in_row = &src[iy as usize * w..(iy as usize + 1) * w];
                let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                if sw == 1 {
                    let start = (lo as isize + off_x) as usize;
                    for (o, &v) in out_row[lo..hi]
                        .iter_mut()
                        .zip(&in_row[start..start + (hi - lo)])
                    {
                        *o += wv * v;
                    }
                } else {
                    for ox in lo..hi {
                        out_row[ox] += wv * in_row[((ox * sw) as isize + off_x) as usize];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_plane_backward<T: Scalar>(
    src: &[T],
    h: usize,
    w: usize,
    kern: &[T],
    gy: &[T],
    g: &Conv2dGeometry,
    ho: usize,
    wo: usize,
    gx: Option<&mut [T]>,
    gk: Option<&mut [T]>,
) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (dh, dw) = g.dilation;
    let mut gx = gx;
    let mut gk = gk;
    for ky in 0..kh {
        let off_y = (ky * dh) as isize - g.padding.top as isize;
        for kx in 0..kw {
            let wv = kern[ky * kw + kx];
            let off_x = (kx * dw) as isize - g.padding.left as isize;
            let (lo, hi) = valid_range(wo, sw, off_x, w);
            if lo >= hi {
                continue;
            }
            let mut acc = T::zero();
            for oy in 0..ho {
                let iy = (oy * sh) as isize + off_y;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let row_base = iy as usize * w;
                let gy_row = &gy[oy * wo..(oy + 1) * wo];
                if gk.is_some() {
                    let in_row = &src[row_base..row_base + w];
                    if sw == 1 {
                        let start = (lo as isize + off_x) as usize;
                        for (&gv, &xv) in gy_row[lo..hi]
                            .iter()
                            .zip(&in_row[start..start + (hi - lo)])
                        {
                            acc += gv * xv;
                        }
                    } else {
                        for ox in lo..hi {
                            acc += gy_row[ox] * in_row[((ox * sw) as isize + off_x) as usize];
                        }
                    }
                }
                if let Some(gx) = gx.as_deref_mut() {
                    let gx_row = &mut gx[row_base..row_base + w];
                    if sw == 1 {
                        let start = (lo as isize + off_x) as usize;
                        for (o, &gv) in gx_row[start..start + (hi - lo)]
                            .iter_mut()
                            .zip(&gy_row[lo..hi])
                        {
                            *o += wv * gv;
                        }
                    } else {
                        for ox in lo..hi {
                            gx_row[((ox * sw) as isize + off_x) as usize] += wv * gy_row[ox];
                        }
                    }
                }
            }
            if let Some(gk) = gk.as_deref_mut() {
                gk[ky * kw + kx] += acc;
            }
        }
    }
}

/// Gradients of a convolution with respect to its input and weight.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    g: &Conv2dGeometry,
    need_gx: bool,
    need_gw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, cin, h, wd) = x.dims4();
    let (_, cout, ho, wo) = gy.dims4();
    let plane_in = h * wd;
    let plane_out = ho * wo;
    let xd = x.data();
    let wdata = w.data();
    let gyd = gy.data();
    let mut gx = need_gx.then(|| vec![T::zero(); x.numel()]);
    let mut gw = need_gw.then(|| vec![T::zero(); w.numel()]);

    if is_depthwise(x, w, g) {
        let kk = g.kernel.0 * g.kernel.1;
        for img in 0..n {
            for c in 0..cin {
                let xr = (img * cin + c) * plane_in..(img * cin + c + 1) * plane_in;
                let yr = (img * cout + c) * plane_out..(img * cout + c + 1) * plane_out;
                depthwise_plane_backward(
                    &xd[xr.clone()],
                    h,
                    wd,
                    &wdata[c * kk..(c + 1) * kk],
                    &gyd[yr],
                    g,
                    ho,
                    wo,
                    gx.as_deref_mut().map(|v| &mut v[xr]),
                    gw.as_deref_mut().map(|v| &mut v[c * kk..(c + 1) * kk]),
                );
            }
        }
    } else if g.is_pointwise() && g.groups == 1 {
        for img in 0..n {
            let xs = &xd[img * cin * plane_in..(img + 1) * cin * plane_in];
            let gys = &gyd[img * cout * plane_out..(img + 1) * cout * plane_out];
            if let Some(gw) = gw.as_deref_mut() {
                gemm(cout, plane_in, cin, gys, false, xs, true, gw, true);
            }
            if let Some(gx) = gx.as_deref_mut() {
                gemm(
                    cin,
                    cout,
                    plane_in,
                    wdata,
                    true,
                    gys,
                    false,
                    &mut gx[img * cin * plane_in..(img + 1) * cin * plane_in],
                    false,
                );
            }
        }
    } else {
        let groups = g.groups;
        let cin_g = cin / groups;
        let cout_g = cout / groups;
        let k = cin_g * g.kernel.0 * g.kernel.1;
        let mut col = vec![T::zero(); k * plane_out];
        for img in 0..n {
            for grp in 0..groups {
                let xr = (img * cin + grp * cin_g) * plane_in
                    ..(img * cin + (grp + 1) * cin_g) * plane_in;
                let gys = &gyd[(img * cout + grp * cout_g) * plane_out
                    ..(img * cout + (grp + 1) * cout_g) * plane_out];
                let wg = &wdata[grp * cout_g * k..(grp + 1) * cout_g * k];
                if let Some(gw) = gw.as_deref_mut() {
                    im2col(&xd[xr.clone()], cin_g, h, wd, g, ho, wo, &mut col);
                    gemm(
                        cout_g,
                        plane_out,
                        k,
                        gys,
                        false,
                        &col,
                        true,
                        &mut gw[grp * cout_g * k..(grp + 1) * cout_g * k],
                        true,
                    );
                }
                if let Some(gx) = gx.as_deref_mut() {
                    gemm(k, cout_g, plane_out, wg, true, gys, false, &mut col, false);
                    col2im(&col, cin_g, h, wd, g, ho, wo, &mut gx[xr]);
                }
            }
        }
    }

    (
        gx.map(|v| Tensor::from_vec(x.shape(), v).expect("shape")),
        gw.map(|v| Tensor::from_vec(w.shape(), v).expect("shape")),
    )
}

/// Output extent of a transposed convolution.
pub fn conv_transpose_output_size(
    h: usize,
    w: usize,
    g: &Conv2dGeometry,
    output_padding: (usize, usize),
) -> Option<(usize, usize)> {
    let oh = ((h - 1) * g.stride.0 + g.dilation.0 * (g.kernel.0 - 1) + output_padding.0 + 1)
        .checked_sub(g.padding.top + g.padding.bottom)?;
    let ow = ((w - 1) * g.stride.1 + g.dilation.1 * (g.kernel.1 - 1) + output_padding.1 + 1)
        .checked_sub(g.padding.left + g.padding.right)?;
    Some((oh, ow))
}

/// Transposed convolution with weight laid out `cin x cout x kh x kw`
/// (single group).
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: &Conv2dGeometry,
    output_padding: (usize, usize),
) -> Result<Tensor<T>> {
    let (n, cin, h, wd) = x.dims4();
    let (wcin, cout, kh, kw) = w.dims4();
    if wcin != cin || (kh, kw) != g.kernel || g.groups != 1 {
        return Err(TensorError::Shape {
            op: "conv_transpose2d",
            detail: format!("input {:?}, weight {:?}, geometry {:?}", x.shape(), w.shape(), g),
        });
    }
    let (ho, wo) = conv_transpose_output_size(h, wd, g, output_padding).ok_or_else(|| {
        TensorError::Shape {
            op: "conv_transpose2d",
            detail: "padding exceeds output extent".into(),
        }
    })?;
    let k = cout * kh * kw;
    let plane_in = h * wd;
    let plane_out = ho * wo;
    let mut col = vec![T::zero(); k * plane_in];
    let mut out = vec![T::zero(); n * cout * plane_out];
    for img in 0..n {
        gemm(
            k,
            cin,
            plane_in,
            w.data(),
            true,
            &x.data()[img * cin * plane_in..(img + 1) * cin * plane_in],
            false,
            &mut col,
            false,
        );
        col2im(
            &col,
            cout,
            ho,
            wo,
            g,
            h,
            wd,
            &mut out[img * cout * plane_out..(img + 1) * cout * plane_out],
        );
    }
    if let Some(b) = b {
        add_channel_bias(&mut out, b.data(), n, cout, plane_out);
    }
    Tensor::from_vec(&[n, cout, ho, wo], out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    g: &Conv2dGeometry,
    need_gx: bool,
    need_gw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, cin, h, wd) = x.dims4();
    let (_, cout, ho, wo) = gy.dims4();
    let k = cout * g.kernel.0 * g.kernel.1;
    let plane_in = h * wd;
    let plane_out = ho * wo;
    let mut gcol = vec![T::zero(); k * plane_in];
    let mut gx = need_gx.then(|| vec![T::zero(); x.numel()]);
    let mut gw = need_gw.then(|| vec![T::zero(); w.numel()]);
    for img in 0..n {
        im2col(
            &gy.data()[img * cout * plane_out..(img + 1) * cout * plane_out],
            cout,
            ho,
            wo,
            g,
            h,
            wd,
            &mut gcol,
        );
        if let Some(gx) = gx.as_deref_mut() {
            gemm(
                cin,
                k,
                plane_in,
                w.data(),
                false,
                &gcol,
                false,
                &mut gx[img * cin * plane_in..(img + 1) * cin * plane_in],
                false,
            );
        }
        if let Some(gw) = gw.as_deref_mut() {
            gemm(
                cin,
                plane_in,
                k,
                &x.data()[img * cin * plane_in..(img + 1) * cin * plane_in],
                false,
                &gcol,
                true,
                gw,
                true,
            );
        }
    }
    (
        gx.map(|v| Tensor::from_vec(x.shape(), v).expect("shape")),
        gw.map(|v| Tensor::from_vec(w.shape(), v).expect("shape")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-definition convolution used as the reference.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: &Conv2dGeometry) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4();
        let (cout, cin_g, kh, kw) = w.dims4();
        let (ho, wo) = g.output_size(h, wd).unwrap();
        let cout_g = cout / g.groups;
        let mut out = vec![0.0; n * cout * ho * wo];
        for img in 0..n {
            for co in 0..cout {
                let grp = co / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            let cabs = grp * cin_g + ci;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * g.stride.0 + ky * g.dilation.0) as isize
                                        - g.padding.top as isize;
                                    let ix = (ox * g.stride.1 + kx * g.dilation.1) as isize
                                        - g.padding.left as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((img * cin + cabs) * h + iy as usize) * wd
                                        + ix as usize]
                                        * w.data()[((co * cin_g + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((img * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, cout, ho, wo], out).unwrap()
    }

    fn wave(shape: &[usize], phase: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64) * 0.37 + phase).sin())
    }

    fn geometries() -> Vec<(usize, usize, Conv2dGeometry)> {
        vec![
            (4, 6, Conv2dGeometry::new(3).pad(1)),
            (4, 6, Conv2dGeometry::new(1)),
            (4, 4, Conv2dGeometry::new(3).stride(2).padding(Padding2d {
                top: 0,
                bottom: 1,
                left: 0,
                right: 1,
            })),
            (3, 6, Conv2dGeometry::new(5).stride(2).padding(Padding2d {
                top: 1,
                bottom: 2,
                left: 1,
                right: 2,
            })),
            (4, 4, Conv2dGeometry::new(3).pad(2).dilation(2)),
            (4, 4, Conv2dGeometry::new(3).pad(1).groups(2)),
            (4, 8, Conv2dGeometry::new(3).pad(1).groups(4)),
            (4, 4, Conv2dGeometry::new(5).stride(2).pad(2).groups(4)),
            (4, 4, Conv2dGeometry::new(3).pad(2).dilation(2).groups(4)),
        ]
    }

    #[test]
    fn forward_matches_direct_definition() {
        for (cin, cout, g) in geometries() {
            let x = wave(&[2, cin, 7, 9], 0.1);
            let w = wave(&[cout, cin / g.groups, g.kernel.0, g.kernel.1], 0.5);
            let got = conv2d_forward(&x, &w, None, &g).unwrap();
            let want = naive_conv(&x, &w, &g);
            assert_eq!(got.shape(), want.shape(), "{g:?}");
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "{g:?}");
        }
    }

    /// <gy, conv(x)> is bilinear, so its derivatives are exactly the
    /// backward outputs; compare against finite differences of the forward.
    #[test]
    fn backward_matches_finite_differences() {
        for (cin, cout, g) in geometries() {
            let x = wave(&[1, cin, 6, 7], 0.3);
            let w = wave(&[cout, cin / g.groups, g.kernel.0, g.kernel.1], 0.9);
            let y = conv2d_forward(&x, &w, None, &g).unwrap();
            let gy = wave(y.shape(), 1.7);
            let (gx, gw) = conv2d_backward(&x, &w, &gy, &g, true, true);
            let (gx, gw) = (gx.unwrap(), gw.unwrap());
            let objective = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
                let y = conv2d_forward(x, w, None, &g).unwrap();
                y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum()
            };
            let eps = 1e-6;
            for i in (0..x.numel()).step_by(5) {
                let mut xp = x.clone();
                xp.data_mut()[i] += eps;
                let mut xm = x.clone();
                xm.data_mut()[i] -= eps;
                let fd = (objective(&xp, &w) - objective(&xm, &w)) / (2.0 * eps);
                assert!((fd - gx.data()[i]).abs() < 1e-6, "gx {g:?} at {i}");
            }
            for i in 0..w.numel() {
                let mut wp = w.clone();
                wp.data_mut()[i] += eps;
                let mut wm = w.clone();
                wm.data_mut()[i] -= eps;
                let fd = (objective(&x, &wp) - objective(&x, &wm)) / (2.0 * eps);
                assert!((fd - gw.data()[i]).abs() < 1e-6, "gw {g:?} at {i}");
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_convolution() {
        // <conv(u; w), v> == <u, conv_t(v; w)> when the transpose weight is
        // the same tensor read as cin x cout.
        let g = Conv2dGeometry::new(4).stride(2).pad(1);
        let u = wave(&[1, 3, 8, 10], 0.2);
        let w = wave(&[5, 3, 4, 4], 1.1); // conv: cout=5, cin=3
        let y = conv2d_forward(&u, &w, None, &g).unwrap();
        let v = wave(y.shape(), 2.3);
        let wt = w.clone(); // transpose conv: cin=5, cout=3
        let back = conv_transpose2d_forward(&v, &wt, None, &g, (0, 0)).unwrap();
        assert_eq!(back.shape(), u.shape());
        let lhs: f64 = y.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transpose_backward_matches_finite_differences() {
        let g = Conv2dGeometry::new(4).stride(2).pad(1);
        let x = wave(&[2, 3, 3, 4], 0.4);
        let w = wave(&[3, 2, 4, 4], 0.8);
        let y = conv_transpose2d_forward(&x, &w, None, &g, (0, 0)).unwrap();
        assert_eq!(y.shape(), &[2, 2, 6, 8]);
        let gy = wave(y.shape(), 0.6);
        let (gx, gw) = conv_transpose2d_backward(&x, &w, &gy, &g, true, true);
        let (gx, gw) = (gx.unwrap(), gw.unwrap());
        let objective = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
            let y = conv_transpose2d_forward(x, w, None, &g, (0, 0)).unwrap();
            y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (objective(&xp, &w) - objective(&xm, &w)) / (2.0 * eps);
            assert!((fd - gx.data()[i]).abs() < 1e-6);
        }
        for i in 0..w.numel() {
            let mut wp = w.clone();
            wp.data_mut()[i] += eps;
            let mut wm = w.clone();
            wm.data_mut()[i] -= eps;
            let fd = (objective(&x, &wp) - objective(&x, &wm)) / (2.0 * eps);
            assert!((fd - gw.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn bias_is_added_per_channel() {
        let x = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
        let w = Tensor::<f32>::zeros(&[4, 2, 1, 1]);
        let b = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv2d_forward(&x, &w, Some(&b), &Conv2dGeometry::new(1)).unwrap();
        assert_eq!(y.data()[9 * 2], 3.0);
        assert_eq!(channel_sum(&y).data(), &[9.0, 18.0, 27.0, 36.0]);
    }

    #[test]
    fn too_small_input_is_a_shape_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f32>::zeros(&[1, 1, 5, 5]);
        assert!(conv2d_forward(&x, &w, None, &Conv2dGeometry::new(5)).is_err());
    }
}
