//! Resizing, normalization and paired image/mask augmentation.

use enseg_tensor::{Scalar, Tensor};
use image::{imageops, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EnsegError, Result};
use crate::raster::LabelMask;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_height: usize,
    pub target_width: usize,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
    /// Applied to the training split only.
    pub augment: Option<AugmentSpec>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_height: 320,
            target_width: 480,
            norm_mean: IMAGENET_MEAN,
            norm_std: IMAGENET_STD,
            augment: Some(AugmentSpec::default()),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_height == 0 || self.target_width == 0 {
            return Err(EnsegError::Config("target dimensions must be positive".into()));
        }
        if self.norm_std.iter().any(|&s| !(s > 0.0)) {
            return Err(EnsegError::Config(format!(
                "norm_std must be positive, got {:?}",
                self.norm_std
            )));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlipParams {
    pub enabled: bool,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleParams {
    pub enabled: bool,
    pub p: f64,
    /// Zoom factor range.
    pub range: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RotateParams {
    pub enabled: bool,
    pub p: f64,
    /// Counter-clockwise angle range in degrees.
    pub degrees: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    pub enabled: bool,
    pub p: f64,
    /// Gaussian noise variance range on the 0..255 intensity scale.
    pub variance: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerspectiveParams {
    pub enabled: bool,
    pub p: f64,
    /// Each corner moves inward by up to this fraction of the half-size.
    pub distortion_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorParams {
    pub enabled: bool,
    pub p: f64,
    /// Additive shift as a fraction of full intensity, drawn from `[-b, b]`.
    pub brightness: f64,
    /// Contrast gain drawn from `[1 - c, 1 + c]`.
    pub contrast: f64,
    /// Hue rotation as a fraction of the full circle, drawn from `[-h, h]`.
    pub hue: f64,
}

impl Default for FlipParams {
    fn default() -> Self {
        FlipParams { enabled: true, p: 0.5 }
    }
}

impl Default for ScaleParams {
    fn default() -> Self {
        ScaleParams {
            enabled: true,
            p: 0.5,
            range: [0.8, 1.2],
        }
    }
}

impl Default for RotateParams {
    fn default() -> Self {
        RotateParams {
            enabled: true,
            p: 0.5,
            degrees: [-15.0, 15.0],
        }
    }
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            enabled: true,
            p: 0.5,
            variance: [10.0, 50.0],
        }
    }
}

impl Default for PerspectiveParams {
    fn default() -> Self {
        PerspectiveParams {
            enabled: true,
            p: 0.5,
            distortion_scale: 0.2,
        }
    }
}

impl Default for ColorParams {
    fn default() -> Self {
        ColorParams {
            enabled: true,
            p: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            hue: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub hflip: FlipParams,
    pub vflip: FlipParams,
    pub scale: ScaleParams,
    pub rotate: RotateParams,
    pub noise: NoiseParams,
    pub perspective: PerspectiveParams,
    pub color: ColorParams,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            hflip: FlipParams::default(),
            vflip: FlipParams::default(),
            scale: ScaleParams::default(),
            rotate: RotateParams::default(),
            noise: NoiseParams::default(),
            perspective: PerspectiveParams::default(),
            color: ColorParams::default(),
            seed: 0,
        }
    }
}

fn check_p(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(EnsegError::Config(format!("augment.{name}.p must be in [0, 1], got {p}")))
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if r[0] <= r[1] && r.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EnsegError::Config(format!("augment.{name} range {r:?} is not ordered")))
    }
}

impl AugmentSpec {
    /// Every transform switched off.
    pub fn disabled() -> Self {
        let mut s = AugmentSpec::default();
        s.hflip.enabled = false;
        s.vflip.enabled = false;
        s.scale.enabled = false;
        s.rotate.enabled = false;
        s.noise.enabled = false;
        s.perspective.enabled = false;
        s.color.enabled = false;
        s
    }

    pub fn validate(&self) -> Result<()> {
        check_p("hflip", self.hflip.p)?;
        check_p("vflip", self.vflip.p)?;
        check_p("scale", self.scale.p)?;
        check_p("rotate", self.rotate.p)?;
        check_p("noise", self.noise.p)?;
        check_p("perspective", self.perspective.p)?;
        check_p("color", self.color.p)?;
        check_range("scale.range", self.scale.range)?;
        check_range("rotate.degrees", self.rotate.degrees)?;
        check_range("noise.variance", self.noise.variance)?;
        if !(self.scale.range[0] > 0.0) {
            return Err(EnsegError::Config("augment.scale.range must be positive".into()));
        }
        if self.noise.variance[0] < 0.0 {
            return Err(EnsegError::Config("augment.noise.variance must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.perspective.distortion_scale) {
            return Err(EnsegError::Config(
                "augment.perspective.distortion_scale must be in [0, 1)".into(),
            ));
        }
        let c = &self.color;
        if c.brightness < 0.0 || !(0.0..1.0).contains(&c.contrast) || c.hue < 0.0 {
            return Err(EnsegError::Config("augment.color deltas out of range".into()));
        }
        Ok(())
    }

    /// Random state for one sample in one epoch.
    pub fn rng_for(&self, epoch: usize, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((epoch as u64) << 32) ^ index as u64);
        rng
    }
}

/// 3x3 homography acting on `[x, y, 1]` in continuous pixel coordinates,
/// where pixel `(i, j)` covers `[i, i+1) x [j, j+1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    pub const IDENTITY: Homography = Homography([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    /// `self` applied after `first`.
    pub fn after(&self, first: &Homography) -> Homography {
        let (a, b) = (&self.0, &first.0);
        let mut m = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                m[r * 3 + c] = (0..3).map(|k| a[r * 3 + k] * b[k * 3 + c]).sum();
            }
        }
        Homography(m)
    }

    pub fn inverse(&self) -> Option<Homography> {
        let m = &self.0;
        let cof = [
            m[4] * m[8] - m[5] * m[7],
            m[2] * m[7] - m[1] * m[8],
            m[1] * m[5] - m[2] * m[4],
            m[5] * m[6] - m[3] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[2] * m[3] - m[0] * m[5],
            m[3] * m[7] - m[4] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[0] * m[4] - m[1] * m[3],
        ];
        let det = m[0] * cof[0] + m[1] * cof[3] + m[2] * cof[6];
        if det.abs() < 1e-12 {
            return None;
        }
        Some(Homography(cof.map(|v| v / det)))
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        let w = m[6] * x + m[7] * y + m[8];
        ((m[0] * x + m[1] * y + m[2]) / w, (m[3] * x + m[4] * y + m[5]) / w)
    }

    fn about_center(linear: [f64; 4], cx: f64, cy: f64) -> Homography {
        let [a, b, c, d] = linear;
        Homography([
            a,
            b,
            cx - a * cx - b * cy,
            c,
            d,
            cy - c * cx - d * cy,
            0.0,
            0.0,
            1.0,
        ])
    }

    /// Maps the four `src` points onto `dst`. `None` for degenerate quads.
    pub fn from_points(src: [(f64, f64); 4], dst: [(f64, f64); 4]) -> Option<Homography> {
        // Unknowns h0..h7 with h8 = 1; two equations per correspondence.
        let mut a = [[0.0f64; 9]; 8];
        for (i, (&(x, y), &(u, v))) in src.iter().zip(&dst).enumerate() {
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        for col in 0..8 {
            let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
            if a[pivot][col].abs() < 1e-12 {
                return None;
            }
            a.swap(col, pivot);
            for row in 0..8 {
                if row != col {
                    let f = a[row][col] / a[col][col];
                    for k in col..9 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
        let mut h = [1.0; 9];
        for i in 0..8 {
            h[i] = a[i][8] / a[i][i];
        }
        Some(Homography(h))
    }
}

/// Parameters drawn by one [`augment_pair`] call.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentRecord {
    /// Output-to-input coordinate map, when any geometric transform fired.
    pub inverse_map: Option<Homography>,
    pub color: Option<(f64, f64, f64)>,
    pub noise_variance: Option<f64>,
}

impl AugmentRecord {
    /// Replays the geometric part on a mask of the augmented image's size.
    pub fn apply_to_mask(&self, mask: &LabelMask) -> LabelMask {
        match &self.inverse_map {
            Some(h) => warp_mask(mask, h),
            None => mask.clone(),
        }
    }
}

/// Reflect-101 border handling (`dcb|abcd|cba`).
fn reflect101(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn warp_mask(mask: &LabelMask, inv: &Homography) -> LabelMask {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
            let sx = reflect101(u.floor() as i64, w);
            let sy = reflect101(v.floor() as i64, h);
            out.push(mask.get(sx, sy));
        }
    }
    LabelMask::new(w, h, out).expect("same size")
}

fn warp_image(img: &RgbImage, inv: &Homography) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (u, v) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
        let (fx, fy) = (u - 0.5, v - 0.5);
        let (x0, y0) = (fx.floor(), fy.floor());
        let (ax, ay) = (fx - x0, fy - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let xs = [reflect101(x0, w), reflect101(x0 + 1, w)];
        let ys = [reflect101(y0, h), reflect101(y0 + 1, h)];
        let mut px = [0u8; 3];
        for (c, out) in px.iter_mut().enumerate() {
            let at = |xi: usize, yi: usize| img.get_pixel(xi as u32, yi as u32).0[c] as f64;
            let top = at(xs[0], ys[0]) * (1.0 - ax) + at(xs[1], ys[0]) * ax;
            let bot = at(xs[0], ys[1]) * (1.0 - ax) + at(xs[1], ys[1]) * ax;
            *out = (top * (1.0 - ay) + bot * ay).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

fn rotation(deg: f64) -> [f64; 2] {
    // Exact values at quarter turns keep those rotations lossless.
    let q = deg / 90.0;
    if q == q.round() {
        match (q as i64).rem_euclid(4) {
            0 => [1.0, 0.0],
            1 => [0.0, 1.0],
            2 => [-1.0, 0.0],
            _ => [0.0, -1.0],
        }
    } else {
        let (s, c) = deg.to_radians().sin_cos();
        [c, s]
    }
}

fn draw(rng: &mut ChaCha8Rng, enabled: bool, p: f64) -> bool {
    enabled && rng.random::<f64>() < p
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Random augmentation of one pair. Geometric transforms are composed into a
/// single homography and applied to both rasters (bilinear for the image,
/// nearest for the mask); colour and noise touch the image only.
pub fn augment_pair(
    image: &RgbImage,
    mask: &LabelMask,
    spec: &AugmentSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(RgbImage, LabelMask, AugmentRecord)> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if (w, h) != (mask.width(), mask.height()) {
        return Err(EnsegError::Pairing(format!(
            "image is {w}x{h} but mask is {}x{}",
            mask.width(),
            mask.height()
        )));
    }
    let (wf, hf) = (w as f64, h as f64);
    let (cx, cy) = (wf / 2.0, hf / 2.0);

    let mut forward: Option<Homography> = None;
    let mut compose = |m: Homography| {
        forward = Some(match forward {
            Some(f) => m.after(&f),
            None => m,
        });
    };
    if draw(rng, spec.hflip.enabled, spec.hflip.p) {
        compose(Homography::about_center([-1.0, 0.0, 0.0, 1.0], cx, cy));
    }
    if draw(rng, spec.vflip.enabled, spec.vflip.p) {
        compose(Homography::about_center([1.0, 0.0, 0.0, -1.0], cx, cy));
    }
    if draw(rng, spec.scale.enabled, spec.scale.p) {
        let s = uniform(rng, spec.scale.range);
        compose(Homography::about_center([s, 0.0, 0.0, s], cx, cy));
    }
    if draw(rng, spec.rotate.enabled, spec.rotate.p) {
        let [c, s] = rotation(uniform(rng, spec.rotate.degrees));
        // y points down, so this turns content counter-clockwise on screen.
        compose(Homography::about_center([c, s, -s, c], cx, cy));
    }
    if draw(rng, spec.perspective.enabled, spec.perspective.p) {
        let d = spec.perspective.distortion_scale;
        let (mx, my) = (d * wf / 2.0, d * hf / 2.0);
        let mut jitter = |m: f64| if m > 0.0 { rng.random_range(0.0..m) } else { 0.0 };
        let src = [(0.0, 0.0), (wf, 0.0), (wf, hf), (0.0, hf)];
        let dst = [
            (jitter(mx), jitter(my)),
            (wf - jitter(mx), jitter(my)),
            (wf - jitter(mx), hf - jitter(my)),
            (jitter(mx), hf - jitter(my)),
        ];
        if let Some(p) = Homography::from_points(src, dst) {
            compose(p);
        }
    }

    let inverse_map = forward.and_then(|f| f.inverse());
    let (mut img, out_mask) = match &inverse_map {
        Some(inv) => (warp_image(image, inv), warp_mask(mask, inv)),
        None => (image.clone(), mask.clone()),
    };

    let mut color = None;
    if draw(rng, spec.color.enabled, spec.color.p) {
        let c = &spec.color;
        let b = uniform(rng, [-c.brightness, c.brightness]);
        let k = uniform(rng, [1.0 - c.contrast, 1.0 + c.contrast]);
        let hue = uniform(rng, [-c.hue, c.hue]);
        adjust_color(&mut img, b, k, hue);
        color = Some((b, k, hue));
    }
    let mut noise_variance = None;
    if draw(rng, spec.noise.enabled, spec.noise.p) {
        let var = uniform(rng, spec.noise.variance);
        if var > 0.0 {
            let normal = Normal::new(0.0, var.sqrt()).expect("finite sigma");
            for v in img.iter_mut() {
                *v = (*v as f64 + normal.sample(rng)).round().clamp(0.0, 255.0) as u8;
            }
        }
        noise_variance = Some(var);
    }

    Ok((
        img,
        out_mask,
        AugmentRecord {
            inverse_map,
            color,
            noise_variance,
        },
    ))
}

fn adjust_color(img: &mut RgbImage, brightness: f64, contrast: f64, hue: f64) {
    let n = (img.width() * img.height()).max(1) as f64;
    let mean_gray: f64 = img
        .pixels()
        .map(|p| 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64)
        .sum::<f64>()
        / n;
    for p in img.pixels_mut() {
        let mut rgb = p.0.map(|v| v as f64 / 255.0);
        if hue != 0.0 {
            rgb = shift_hue(rgb, hue);
        }
        for (c, v) in rgb.iter().enumerate() {
            let x = (v * 255.0 - mean_gray) * contrast + mean_gray + brightness * 255.0;
            p.0[c] = x.round().clamp(0.0, 255.0) as u8;
        }
    }
}

fn shift_hue([r, g, b]: [f64; 3], shift: f64) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta == 0.0 {
        return [r, g, b];
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let h = (h / 6.0 + shift).rem_euclid(1.0) * 6.0;
    let (s, v) = (delta / max, max);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r1, g1, b1) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r1 + m, g1 + m, b1 + m]
}

/// Nearest-neighbour resize of a label mask; never blends ids.
pub fn resize_mask(mask: &LabelMask, width: usize, height: usize) -> LabelMask {
    if (width, height) == (mask.width(), mask.height()) {
        return mask.clone();
    }
    let src_x: Vec<usize> = (0..width)
        .map(|x| ((2 * x + 1) * mask.width() / (2 * width)).min(mask.width() - 1))
        .collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = ((2 * y + 1) * mask.height() / (2 * height)).min(mask.height() - 1);
        out.extend(src_x.iter().map(|&sx| mask.get(sx, sy)));
    }
    LabelMask::new(width, height, out).expect("sized above")
}

pub fn resize_image(img: &RgbImage, width: usize, height: usize) -> RgbImage {
    imageops::resize(img, width as u32, height as u32, imageops::FilterType::Triangle)
}

/// Resizes both rasters to the configured target size.
pub fn resize_pair(
    image: &RgbImage,
    mask: &LabelMask,
    cfg: &PreprocessConfig,
) -> Result<(RgbImage, LabelMask)> {
    if (image.width() as usize, image.height() as usize) != (mask.width(), mask.height()) {
        return Err(EnsegError::Pairing(format!(
            "image is {}x{} but mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    let (w, h) = (cfg.target_width, cfg.target_height);
    Ok((resize_image(image, w, h), resize_mask(mask, w, h)))
}

/// `(pixel / 255 - mean) / std` per channel, as a `[3, H, W]` tensor.
pub fn normalize<T: Scalar>(image: &RgbImage, mean: [f64; 3], std: [f64; 3]) -> Tensor<T> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let plane = w * h;
    let raw = image.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        T::from_f64_lossy((raw[p * 3 + c] as f64 / 255.0 - mean[c]) / std[c])
    })
}

/// Inverse of [`normalize`], back to `[0, 1]` intensities.
pub fn denormalize<T: Scalar>(field: &Tensor<T>, mean: [f64; 3], std: [f64; 3]) -> Tensor<T> {
    let plane = field.numel() / 3;
    let data = field
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            T::from_f64_lossy(v.to_f64_lossy() * std[c] + mean[c])
        })
        .collect();
    Tensor::from_vec(field.shape(), data).expect("same shape")
}

/// Resize, optionally augment, then normalize one pair.
pub fn prepare<T: Scalar>(
    image: &RgbImage,
    mask: &LabelMask,
    cfg: &PreprocessConfig,
    augment_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor<T>, LabelMask)> {
    let (mut img, mut m) = resize_pair(image, mask, cfg)?;
    if let (Some(spec), Some(rng)) = (&cfg.augment, augment_rng) {
        let (a, b, _) = augment_pair(&img, &m, spec, rng)?;
        img = a;
        m = b;
    }
    Ok((normalize(&img, cfg.norm_mean, cfg.norm_std), m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn only(f: impl FnOnce(&mut AugmentSpec)) -> AugmentSpec {
        let mut s = AugmentSpec::disabled();
        f(&mut s);
        s
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        let spec = only(|s| {
            s.rotate = RotateParams {
                enabled: true,
                p: 1.0,
                degrees: [90.0, 90.0],
            }
        });
        let mask = LabelMask::from_rows(&[&[1, 0], &[0, 2]]);
        let img = RgbImage::new(2, 2);
        let (_, out, _) = augment_pair(&img, &mask, &spec, &mut spec.rng_for(0, 0)).unwrap();
        assert_eq!(out, LabelMask::from_rows(&[&[0, 2], &[1, 0]]));
    }

    #[test]
    fn hflip_twice_is_identity() {
        let spec = only(|s| s.hflip = FlipParams { enabled: true, p: 1.0 });
        let img = RgbImage::from_fn(5, 3, |x, y| Rgb([x as u8 * 40, y as u8 * 70, 9]));
        let mask = LabelMask::new(5, 3, (0..15).map(|i| (i % 4) as u8).collect()).unwrap();
        let mut rng = spec.rng_for(0, 0);
        let (i1, m1, _) = augment_pair(&img, &mask, &spec, &mut rng).unwrap();
        assert_ne!(m1, mask);
        let (i2, m2, _) = augment_pair(&i1, &m1, &spec, &mut rng).unwrap();
        assert_eq!((i2, m2), (img, mask));
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let mut spec = AugmentSpec::default();
        for p in [
            &mut spec.hflip.p,
            &mut spec.vflip.p,
            &mut spec.scale.p,
            &mut spec.rotate.p,
            &mut spec.noise.p,
            &mut spec.perspective.p,
            &mut spec.color.p,
        ] {
            *p = 0.0;
        }
        let img = RgbImage::from_fn(7, 4, |x, y| Rgb([x as u8, y as u8, 3]));
        let mask = LabelMask::filled(7, 4, 1);
        let (i, m, rec) = augment_pair(&img, &mask, &spec, &mut spec.rng_for(3, 1)).unwrap();
        assert_eq!((i, m), (img, mask));
        assert!(rec.inverse_map.is_none());
    }

    #[test]
    fn homography_from_points_recovers_affine_map() {
        let src = [(0.0, 0.0), (4.0, 0.0), (4.0, 3.0), (0.0, 3.0)];
        let dst = src.map(|(x, y)| (2.0 * x + 1.0, y - 5.0));
        let h = Homography::from_points(src, dst).unwrap();
        let (u, v) = h.apply(1.5, 2.5);
        assert!((u - 4.0).abs() < 1e-12 && (v + 2.5).abs() < 1e-12);
    }

    #[test]
    fn reflect101_borders() {
        let got: Vec<usize> = (-3..7).map(|i| reflect101(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn hue_shift_full_turn_is_identity() {
        let c = [0.2, 0.7, 0.4];
        let back = shift_hue(c, 1.0);
        for i in 0..3 {
            assert!((back[i] - c[i]).abs() < 1e-12);
        }
    }
}
