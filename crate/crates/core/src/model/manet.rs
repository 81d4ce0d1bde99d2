use enseg_tensor::{Builder, Conv2d, Forward, Scalar, Var};

use super::blocks::{decoder_conv, spatial, up2_nearest, Conv2dReLU};
use super::unet::DECODER_CHANNELS;

const PAB_CHANNELS: usize = 64;
const REDUCTION: usize = 16;

/// Position-wise attention over the deepest feature map.
#[derive(Clone, Debug)]
struct PabBlock {
    top: Conv2d,
    center: Conv2d,
    bottom: Conv2d,
    out: Conv2d,
    channels: usize,
}

impl PabBlock {
    fn new<T: Scalar>(b: &mut Builder<T>, c: usize) -> Self {
        PabBlock {
            top: b.scope("top_conv", |b| decoder_conv(b, c, PAB_CHANNELS, 1, 0)),
            center: b.scope("center_conv", |b| decoder_conv(b, c, PAB_CHANNELS, 1, 0)),
            bottom: b.scope("bottom_conv", |b| decoder_conv(b, c, c, 3, 1)),
            out: b.scope("out_conv", |b| decoder_conv(b, c, c, 3, 1)),
            channels: c,
        }
    }

    fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: Var) -> Var {
        let n = fx.graph.shape(x)[0];
        let (h, w) = spatial(fx, x);
        let hw = h * w;
        let top = self.top.forward(fx, x);
        let top = fx.graph.reshape(top, &[n, PAB_CHANNELS, hw]);
        let center = self.center.forward(fx, x);
        let center = fx.graph.reshape(center, &[n, PAB_CHANNELS, hw]);
        let bottom = self.bottom.forward(fx, x);
        let bottom = fx.graph.reshape(bottom, &[n, self.channels, hw]);
        // [hw, hw] affinities, softmax-normalized over the whole map
        let sp = fx.graph.matmul(center, top, true, false);
        let sp = fx.graph.reshape(sp, &[n, hw * hw]);
        let sp = fx.graph.softmax(sp, 1);
        let sp = fx.graph.reshape(sp, &[n, hw, hw]);
        let y = fx.graph.matmul(sp, bottom, false, true);
        // [n, hw, c] reinterpreted as [n, c, h, w] without transposing
        let y = fx.graph.reshape(y, &[n, self.channels, h, w]);
        let y = fx.graph.add(x, y);
        self.out.forward(fx, y)
    }
}

#[derive(Clone, Debug)]
struct SqueezeExcite {
    reduce: Conv2d,
    expand: Conv2d,
}

impl SqueezeExcite {
    fn new<T: Scalar>(b: &mut Builder<T>, c: usize) -> Self {
        let r = (c / REDUCTION).max(1);
        SqueezeExcite {
            reduce: b.scope("1", |b| decoder_conv(b, c, r, 1, 0)),
            expand: b.scope("3", |b| decoder_conv(b, r, c, 1, 0)),
        }
    }

    fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: Var) -> Var {
        let s = fx.graph.adaptive_avg_pool2d(x, 1, 1);
        let s = self.reduce.forward(fx, s);
        let s = fx.graph.relu(s);
        let s = self.expand.forward(fx, s);
        fx.graph.sigmoid(s)
    }
}

/// Multi-scale fusion attention block.
#[derive(Clone, Debug)]
struct MfabBlock {
    hl0: Conv2dReLU,
    hl1: Conv2dReLU,
    se_ll: SqueezeExcite,
    se_hl: SqueezeExcite,
    conv1: Conv2dReLU,
    conv2: Conv2dReLU,
}

#[derive(Clone, Debug)]
enum Block {
    Mfab(MfabBlock),
    Plain { conv1: Conv2dReLU, conv2: Conv2dReLU },
}

impl Block {
    fn new<T: Scalar>(b: &mut Builder<T>, cin: usize, skip: usize, cout: usize) -> Self {
        if skip == 0 {
            return Block::Plain {
                conv1: b.scope("conv1", |b| Conv2dReLU::new(b, cin, cout, 3, 1, true)),
                conv2: b.scope("conv2", |b| Conv2dReLU::new(b, cout, cout, 3, 1, true)),
            };
        }
        let (hl0, hl1) = b.scope("hl_conv", |b| {
            (
                b.scope("0", |b| Conv2dReLU::new(b, cin, cin, 3, 1, true)),
                b.scope("1", |b| Conv2dReLU::new(b, cin, skip, 1, 0, true)),
            )
        });
        Block::Mfab(MfabBlock {
            hl0,
            hl1,
            se_ll: b.scope("SE_ll", |b| SqueezeExcite::new(b, skip)),
            se_hl: b.scope("SE_hl", |b| SqueezeExcite::new(b, skip)),
            conv1: b.scope("conv1", |b| Conv2dReLU::new(b, 2 * skip, cout, 3, 1, true)),
            conv2: b.scope("conv2", |b| Conv2dReLU::new(b, cout, cout, 3, 1, true)),
        })
    }

    fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: Var, skip: Option<Var>) -> Var {
        match self {
            Block::Plain { conv1, conv2 } => {
                let mut x = up2_nearest(fx, x);
                if let Some(s) = skip {
                    x = fx.graph.concat(&[x, s]);
                }
                let x = conv1.forward(fx, x);
                conv2.forward(fx, x)
            }
            Block::Mfab(m) => {
                let x = m.hl0.forward(fx, x);
                let x = m.hl1.forward(fx, x);
                let mut x = up2_nearest(fx, x);
                let mut att = m.se_hl.forward(fx, x);
                if let Some(s) = skip {
                    let ll = m.se_ll.forward(fx, s);
                    att = fx.graph.add(att, ll);
                    x = fx.graph.mul(x, att);
                    x = fx.graph.concat(&[x, s]);
                }
                let x = m.conv1.forward(fx, x);
                m.conv2.forward(fx, x)
            }
        }
    }
}

/// MA-Net decoder: a position attention centre followed by multi-scale
/// fusion attention blocks.
#[derive(Clone, Debug)]
pub struct ManetDecoder {
    center: PabBlock,
    blocks: Vec<Block>,
}

impl ManetDecoder {
    pub fn new<T: Scalar>(b: &mut Builder<T>, encoder_channels: &[usize]) -> Self {
        let enc: Vec<usize> = encoder_channels[1..].iter().rev().copied().collect();
        let mut ins = vec![enc[0]];
        ins.extend_from_slice(&DECODER_CHANNELS[..4]);
        let mut skips = enc[1..].to_vec();
        skips.push(0);
        b.scope("decoder", |b| {
            let center = b.scope("center", |b| PabBlock::new(b, enc[0]));
            let blocks = b.scope("blocks", |b| {
                (0..5)
                    .map(|i| b.scope(i, |b| Block::new(b, ins[i], skips[i], DECODER_CHANNELS[i])))
                    .collect()
            });
            ManetDecoder { center, blocks }
        })
    }

    pub fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, features: &[Var]) -> Var {
        let rev: Vec<Var> = features[1..].iter().rev().copied().collect();
        let mut x = self.center.forward(fx, rev[0]);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(fx, x, rev.get(i + 1).copied());
        }
        x
    }
}
