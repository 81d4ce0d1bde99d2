use enseg_tensor::{BatchNorm2d, Builder, Conv2dGeometry, ConvTranspose2d, Forward, Scalar, Var};

use super::blocks::Conv2dReLU;

const PREFINAL_CHANNELS: usize = 32;

#[derive(Clone, Debug)]
struct Block {
    reduce: Conv2dReLU,
    up: ConvTranspose2d,
    up_bn: BatchNorm2d,
    expand: Conv2dReLU,
}

impl Block {
    fn new<T: Scalar>(b: &mut Builder<T>, cin: usize, cout: usize) -> Self {
        let mid = cin / 4;
        b.scope("block", |b| Block {
            reduce: b.scope("0", |b| Conv2dReLU::new(b, cin, mid, 1, 0, true)),
            up: b.scope("1", |b| {
                b.scope("0", |b| {
                    ConvTranspose2d::new(b, mid, mid, Conv2dGeometry::new(4).stride(2).pad(1), true)
                })
            }),
            up_bn: b.scope("1", |b| b.scope("1", |b| BatchNorm2d::new(b, mid, 1e-5, 0.1))),
            expand: b.scope("2", |b| Conv2dReLU::new(b, mid, cout, 1, 0, true)),
        })
    }

    fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: Var, skip: Option<Var>) -> Var {
        let x = self.reduce.forward(fx, x);
        let x = self.up.forward(fx, x);
        let x = self.up_bn.forward(fx, x);
        let x = fx.graph.relu(x);
        let x = self.expand.forward(fx, x);
        match skip {
            Some(s) => fx.graph.add(x, s),
            None => x,
        }
    }
}

/// LinkNet decoder: bottleneck blocks with a stride-2 transposed convolution,
/// merged with the encoder features by addition.
#[derive(Clone, Debug)]
pub struct LinknetDecoder {
    blocks: Vec<Block>,
}

impl LinknetDecoder {
    pub fn new<T: Scalar>(b: &mut Builder<T>, encoder_channels: &[usize]) -> Self {
        let mut ch: Vec<usize> = encoder_channels[1..].iter().rev().copied().collect();
        ch.push(PREFINAL_CHANNELS);
        let blocks = b.scope("decoder", |b| {
            b.scope("blocks", |b| {
                (0..5).map(|i| b.scope(i, |b| Block::new(b, ch[i], ch[i + 1]))).collect()
            })
        });
        LinknetDecoder { blocks }
    }

    pub fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, features: &[Var]) -> Var {
        let rev: Vec<Var> = features[1..].iter().rev().copied().collect();
        let mut x = rev[0];
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(fx, x, rev.get(i + 1).copied());
        }
        x
    }
}

pub fn head_channels() -> usize {
    PREFINAL_CHANNELS
}
