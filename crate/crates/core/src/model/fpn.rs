use enseg_tensor::{Builder, Conv2d, Conv2dGeometry, ConvInit, Forward, GroupNorm, Scalar, Var};

use super::blocks::{decoder_conv, spatial, up2_nearest};

const PYRAMID_CHANNELS: usize = 256;
pub const SEGMENTATION_CHANNELS: usize = 128;
const DROPOUT: f64 = 0.2;

#[derive(Clone, Debug)]
struct Conv3x3GnRelu {
    conv: Conv2d,
    gn: GroupNorm,
    upsample: bool,
}

impl Conv3x3GnRelu {
    fn new<T: Scalar>(b: &mut Builder<T>, cin: usize, cout: usize, upsample: bool) -> Self {
        b.scope("block", |b| Conv3x3GnRelu {
            conv: b.scope("0", |b| {
                Conv2d::new(b, cin, cout, Conv2dGeometry::new(3).pad(1), false, ConvInit::Kaiming)
            }),
            gn: b.scope("1", |b| GroupNorm::new(b, 32, cout, 1e-5)),
            upsample,
        })
    }

    fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: Var) -> Var {
        let x = self.conv.forward(fx, x);
        let x = self.gn.forward(fx, x);
        let x = fx.graph.relu(x);
        if self.upsample {
            let (h, w) = spatial(fx, x);
            fx.graph.upsample_bilinear(x, 2 * h, 2 * w, true)
        } else {
            x
        }
    }
}

/// Feature pyramid decoder: a top-down pathway with lateral 1x1 convs, then
/// per-level conv stacks upsampled to 1/4 resolution and summed.
#[derive(Clone, Debug)]
pub struct FpnDecoder {
    p5: Conv2d,
    laterals: Vec<Conv2d>,
    seg_blocks: Vec<Vec<Conv3x3GnRelu>>,
}

impl FpnDecoder {
    pub fn new<T: Scalar>(b: &mut Builder<T>, encoder_channels: &[usize]) -> Self {
        let enc: Vec<usize> = encoder_channels.iter().rev().copied().collect();
        b.scope("decoder", |b| {
            let p5 = b.scope("p5", |b| decoder_conv(b, enc[0], PYRAMID_CHANNELS, 1, 0));
            let laterals = (1..=3)
                .map(|i| {
                    b.scope(format!("p{}", 5 - i), |b| {
                        b.scope("skip_conv", |b| decoder_conv(b, enc[i], PYRAMID_CHANNELS, 1, 0))
                    })
                })
                .collect();
            let seg_blocks = b.scope("seg_blocks", |b| {
                [3usize, 2, 1, 0]
                    .iter()
                    .enumerate()
                    .map(|(i, &ups)| {
                        b.scope(i, |b| {
                            b.scope("block", |b| {
                                (0..ups.max(1))
                                    .map(|j| {
                                        let cin = if j == 0 { PYRAMID_CHANNELS } else { SEGMENTATION_CHANNELS };
                                        b.scope(j, |b| Conv3x3GnRelu::new(b, cin, SEGMENTATION_CHANNELS, ups > 0))
                                    })
                                    .collect()
                            })
                        })
                    })
                    .collect()
            });
            FpnDecoder {
                p5,
                laterals,
                seg_blocks,
            }
        })
    }

    pub fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, features: &[Var]) -> Var {
        let n = features.len();
        let (c2, c3, c4, c5) = (features[n - 4], features[n - 3], features[n - 2], features[n - 1]);
        let mut pyramid = vec![self.p5.forward(fx, c5)];
        for (lateral, skip) in self.laterals.iter().zip([c4, c3, c2]) {
            let up = up2_nearest(fx, *pyramid.last().expect("non-empty"));
            let s = lateral.forward(fx, skip);
            pyramid.push(fx.graph.add(up, s));
        }
        let mut merged: Option<Var> = None;
        for (blocks, &p) in self.seg_blocks.iter().zip(&pyramid) {
            let mut x = p;
            for blk in blocks {
                x = blk.forward(fx, x);
            }
            merged = Some(match merged {
                Some(m) => fx.graph.add(m, x),
                None => x,
            });
        }
        let x = merged.expect("four levels");
        fx.dropout2d(x, DROPOUT)
    }
}
