//! Layers shared by several decoders.

use enseg_tensor::{BatchNorm2d, Builder, Conv2d, Conv2dGeometry, ConvInit, Forward, Scalar, Var};

/// Convolution, optional batch norm, ReLU. The convolution carries a bias
/// only when there is no norm. Parameters live under `0` (conv) and `1` (norm).
#[derive(Clone, Debug)]
pub struct Conv2dReLU {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
}

impl Conv2dReLU {
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        padding: usize,
        use_norm: bool,
    ) -> Self {
        let geom = Conv2dGeometry::new(kernel).pad(padding);
        let conv = b.scope("0", |b| Conv2d::new(b, cin, cout, geom, !use_norm, ConvInit::Kaiming));
        let bn = use_norm.then(|| b.scope("1", |b| BatchNorm2d::new(b, cout, 1e-5, 0.1)));
        Conv2dReLU { conv, bn }
    }

    pub fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: Var) -> Var {
        let mut y = self.conv.forward(fx, x);
        if let Some(bn) = &self.bn {
            y = bn.forward(fx, y);
        }
        fx.graph.relu(y)
    }
}

/// A decoder convolution: kaiming-uniform weights and zero bias.
pub fn decoder_conv<T: Scalar>(
    b: &mut Builder<T>,
    cin: usize,
    cout: usize,
    kernel: usize,
    padding: usize,
) -> Conv2d {
    Conv2d::new(
        b,
        cin,
        cout,
        Conv2dGeometry::new(kernel).pad(padding),
        true,
        ConvInit::Kaiming,
    )
}

/// Final convolution, optional bilinear upsampling and per-pixel softmax.
#[derive(Clone, Debug)]
pub struct SegmentationHead {
    conv: Conv2d,
    upsampling: usize,
}

impl SegmentationHead {
    /// Registers under `segmentation_head.0`.
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        cin: usize,
        classes: usize,
        kernel: usize,
        upsampling: usize,
    ) -> Self {
        let geom = Conv2dGeometry::new(kernel).pad(kernel / 2);
        let conv = b.scope("segmentation_head", |b| {
            b.scope("0", |b| Conv2d::new(b, cin, classes, geom, true, ConvInit::Xavier))
        });
        SegmentationHead { conv, upsampling }
    }

    pub fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: Var) -> Var {
        let mut y = self.conv.forward(fx, x);
        if self.upsampling > 1 {
            let s = fx.graph.shape(y);
            let (h, w) = (s[2] * self.upsampling, s[3] * self.upsampling);
            y = fx.graph.upsample_bilinear(y, h, w, true);
        }
        fx.graph.softmax(y, 1)
    }
}

pub fn spatial<T: Scalar>(fx: &Forward<'_, T>, x: Var) -> (usize, usize) {
    let s = fx.graph.shape(x);
    (s[2], s[3])
}

/// Nearest-neighbour upsampling by 2.
pub fn up2_nearest<T: Scalar>(fx: &mut Forward<'_, T>, x: Var) -> Var {
    let (h, w) = spatial(fx, x);
    fx.graph.upsample_nearest(x, 2 * h, 2 * w)
}
