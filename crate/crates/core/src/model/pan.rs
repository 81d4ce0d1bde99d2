use enseg_tensor::{BatchNorm2d, Builder, Conv2d, Forward, Scalar, Var};

use super::blocks::{decoder_conv, spatial};

pub const DECODER_CHANNELS: usize = 32;

/// Convolution with bias, batch norm, optional ReLU.
#[derive(Clone, Debug)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: bool,
}

impl ConvBnRelu {
    fn new<T: Scalar>(b: &mut Builder<T>, cin: usize, cout: usize, k: usize, relu: bool) -> Self {
        ConvBnRelu {
            conv: b.scope("conv", |b| decoder_conv(b, cin, cout, k, k / 2)),
            bn: b.scope("bn", |b| BatchNorm2d::new(b, cout, 1e-5, 0.1)),
            relu,
        }
    }

    fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: Var) -> Var {
        let x = self.conv.forward(fx, x);
        let x = self.bn.forward(fx, x);
        if self.relu {
            fx.graph.relu(x)
        } else {
            x
        }
    }
}

/// Feature pyramid attention over the deepest map.
#[derive(Clone, Debug)]
struct FpaBlock {
    branch1: ConvBnRelu,
    mid: ConvBnRelu,
    down1: ConvBnRelu,
    down2: ConvBnRelu,
    down3: [ConvBnRelu; 2],
    conv2: ConvBnRelu,
    conv1: ConvBnRelu,
}

impl FpaBlock {
    fn new<T: Scalar>(b: &mut Builder<T>, cin: usize, cout: usize) -> Self {
        FpaBlock {
            branch1: b.scope("branch1", |b| b.scope("1", |b| ConvBnRelu::new(b, cin, cout, 1, true))),
            mid: b.scope("mid", |b| b.scope("0", |b| ConvBnRelu::new(b, cin, cout, 1, true))),
            down1: b.scope("down1", |b| b.scope("1", |b| ConvBnRelu::new(b, cin, 1, 7, true))),
            down2: b.scope("down2", |b| b.scope("1", |b| ConvBnRelu::new(b, 1, 1, 5, true))),
            down3: b.scope("down3", |b| {
                [
                    b.scope("1", |b| ConvBnRelu::new(b, 1, 1, 3, true)),
                    b.scope("2", |b| ConvBnRelu::new(b, 1, 1, 3, true)),
                ]
            }),
            conv2: b.scope("conv2", |b| ConvBnRelu::new(b, 1, 1, 5, true)),
            conv1: b.scope("conv1", |b| ConvBnRelu::new(b, 1, 1, 7, true)),
        }
    }

    fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: Var) -> Var {
        let (h, w) = spatial(fx, x);
        let g = fx.graph.adaptive_avg_pool2d(x, 1, 1);
        let g = self.branch1.forward(fx, g);
        let g = fx.graph.upsample_bilinear(g, h, w, true);
        let mid = self.mid.forward(fx, x);

        let x1 = fx.graph.max_pool2d(x, 2, 2);
        let x1 = self.down1.forward(fx, x1);
        let x2 = fx.graph.max_pool2d(x1, 2, 2);
        let x2 = self.down2.forward(fx, x2);
        let x3 = fx.graph.max_pool2d(x2, 2, 2);
        let x3 = self.down3[0].forward(fx, x3);
        let x3 = self.down3[1].forward(fx, x3);

        let x3 = fx.graph.upsample_bilinear(x3, h / 4, w / 4, true);
        let x2 = self.conv2.forward(fx, x2);
        let y = fx.graph.add(x2, x3);
        let y = fx.graph.upsample_bilinear(y, h / 2, w / 2, true);
        let x1 = self.conv1.forward(fx, x1);
        let y = fx.graph.add(y, x1);
        let y = fx.graph.upsample_bilinear(y, h, w, true);
        let y = fx.graph.mul(y, mid);
        fx.graph.add(y, g)
    }
}

/// Global attention upsample: gates low-level features by a channel
/// descriptor of the high-level ones.
#[derive(Clone, Debug)]
struct GauBlock {
    gate: ConvBnRelu,
    conv2: ConvBnRelu,
}

impl GauBlock {
    fn new<T: Scalar>(b: &mut Builder<T>, cin: usize, cout: usize) -> Self {
        GauBlock {
            gate: b.scope("conv1", |b| b.scope("1", |b| ConvBnRelu::new(b, cout, cout, 1, false))),
            conv2: b.scope("conv2", |b| ConvBnRelu::new(b, cin, cout, 3, true)),
        }
    }

    fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, low: Var, high: Var) -> Var {
        let (h, w) = spatial(fx, low);
        let up = fx.graph.upsample_bilinear(high, h, w, true);
        let x = self.conv2.forward(fx, low);
        let g = fx.graph.adaptive_avg_pool2d(high, 1, 1);
        let g = self.gate.forward(fx, g);
        let g = fx.graph.sigmoid(g);
        let z = fx.graph.mul(x, g);
        fx.graph.add(up, z)
    }
}

/// Pyramid attention network decoder (encoder at output stride 16).
#[derive(Clone, Debug)]
pub struct PanDecoder {
    fpa: FpaBlock,
    gau3: GauBlock,
    gau2: GauBlock,
    gau1: GauBlock,
}

impl PanDecoder {
    pub fn new<T: Scalar>(b: &mut Builder<T>, encoder_channels: &[usize]) -> Self {
        let enc = &encoder_channels[2..];
        b.scope("decoder", |b| PanDecoder {
            fpa: b.scope("fpa", |b| FpaBlock::new(b, enc[3], DECODER_CHANNELS)),
            gau3: b.scope("gau3", |b| GauBlock::new(b, enc[2], DECODER_CHANNELS)),
            gau2: b.scope("gau2", |b| GauBlock::new(b, enc[1], DECODER_CHANNELS)),
            gau1: b.scope("gau1", |b| GauBlock::new(b, enc[0], DECODER_CHANNELS)),
        })
    }

    pub fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, features: &[Var]) -> Var {
        let f = &features[2..];
        let out = self.fpa.forward(fx, f[3]);
        let out = self.gau3.forward(fx, f[2], out);
        let out = self.gau2.forward(fx, f[1], out);
        self.gau1.forward(fx, f[0], out)
    }
}
