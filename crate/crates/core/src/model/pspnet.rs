use enseg_tensor::{Builder, Forward, Scalar, Var};

use super::blocks::{spatial, Conv2dReLU};

pub const OUT_CHANNELS: usize = 512;
const SIZES: [usize; 4] = [1, 2, 3, 6];
const DROPOUT: f64 = 0.2;

/// Pyramid pooling decoder over the 1/8 feature map.
#[derive(Clone, Debug)]
pub struct PspDecoder {
    pools: Vec<Conv2dReLU>,
    conv: Conv2dReLU,
}

impl PspDecoder {
    pub fn new<T: Scalar>(b: &mut Builder<T>, encoder_channels: &[usize]) -> Self {
        let c = *encoder_channels.last().expect("encoder channels");
        b.scope("decoder", |b| {
            let pools = b.scope("psp", |b| {
                b.scope("blocks", |b| {
                    SIZES
                        .iter()
                        .enumerate()
                        .map(|(i, &size)| {
                            // Batch norm is undefined on a 1x1 map with batch 1.
                            b.scope(i, |b| {
                                b.scope("pool", |b| {
                                    b.scope("1", |b| Conv2dReLU::new(b, c, c / SIZES.len(), 1, 0, size != 1))
                                })
                            })
                        })
                        .collect()
                })
            });
            let conv = b.scope("conv", |b| Conv2dReLU::new(b, 2 * c, OUT_CHANNELS, 1, 0, true));
            PspDecoder { pools, conv }
        })
    }

    pub fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, features: &[Var]) -> Var {
        let x = *features.last().expect("features");
        let (h, w) = spatial(fx, x);
        let mut parts = Vec::with_capacity(SIZES.len() + 1);
        for (pool, &size) in self.pools.iter().zip(&SIZES) {
            let p = fx.graph.adaptive_avg_pool2d(x, size, size);
            let p = pool.forward(fx, p);
            parts.push(fx.graph.upsample_bilinear(p, h, w, true));
        }
        parts.push(x);
        let x = fx.graph.concat(&parts);
        let x = self.conv.forward(fx, x);
        fx.dropout2d(x, DROPOUT)
    }
}
