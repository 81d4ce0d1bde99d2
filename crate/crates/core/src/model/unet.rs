use enseg_tensor::{Builder, Forward, Scalar, Var};

use super::blocks::{spatial, Conv2dReLU};

pub const DECODER_CHANNELS: [usize; 5] = [256, 128, 64, 32, 16];

#[derive(Clone, Debug)]
struct UnetBlock {
    conv1: Conv2dReLU,
    conv2: Conv2dReLU,
}

impl UnetBlock {
    fn new<T: Scalar>(b: &mut Builder<T>, cin: usize, skip: usize, cout: usize) -> Self {
        UnetBlock {
            conv1: b.scope("conv1", |b| Conv2dReLU::new(b, cin + skip, cout, 3, 1, true)),
            conv2: b.scope("conv2", |b| Conv2dReLU::new(b, cout, cout, 3, 1, true)),
        }
    }
}

/// U-Net decoder: nearest upsampling to each skip's size, concatenation,
/// two conv-BN-ReLU layers per level.
#[derive(Clone, Debug)]
pub struct UnetDecoder {
    blocks: Vec<UnetBlock>,
}

impl UnetDecoder {
    pub fn new<T: Scalar>(b: &mut Builder<T>, encoder_channels: &[usize]) -> Self {
        let enc: Vec<usize> = encoder_channels[1..].iter().rev().copied().collect();
        let mut ins = vec![enc[0]];
        ins.extend_from_slice(&DECODER_CHANNELS[..4]);
        let mut skips = enc[1..].to_vec();
        skips.push(0);
        let blocks = b.scope("decoder", |b| {
            b.scope("blocks", |b| {
                (0..5)
                    .map(|i| b.scope(i, |b| UnetBlock::new(b, ins[i], skips[i], DECODER_CHANNELS[i])))
                    .collect()
            })
        });
        UnetDecoder { blocks }
    }

    pub fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, features: &[Var]) -> Var {
        let sizes: Vec<(usize, usize)> = features.iter().rev().map(|&f| spatial(fx, f)).collect();
        let rev: Vec<Var> = features[1..].iter().rev().copied().collect();
        let mut x = rev[0];
        for (i, block) in self.blocks.iter().enumerate() {
            let (h, w) = sizes[i + 1];
            x = fx.graph.upsample_nearest(x, h, w);
            if let Some(&skip) = rev.get(i + 1) {
                x = fx.graph.concat(&[x, skip]);
            }
            x = block.conv1.forward(fx, x);
            x = block.conv2.forward(fx, x);
        }
        x
    }
}
