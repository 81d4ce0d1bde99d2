use std::collections::HashMap;

use enseg_tensor::{Builder, Forward, Scalar, Var};

use super::blocks::{up2_nearest, Conv2dReLU};
use super::unet::DECODER_CHANNELS;

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv2dReLU,
    conv2: Conv2dReLU,
}

impl Block {
    fn new<T: Scalar>(b: &mut Builder<T>, cin: usize, skip: usize, cout: usize) -> Self {
        Block {
            conv1: b.scope("conv1", |b| Conv2dReLU::new(b, cin + skip, cout, 3, 1, true)),
            conv2: b.scope("conv2", |b| Conv2dReLU::new(b, cout, cout, 3, 1, true)),
        }
    }

    fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: Var, skip: Option<Var>) -> Var {
        let mut x = up2_nearest(fx, x);
        if let Some(s) = skip {
            x = fx.graph.concat(&[x, s]);
        }
        let x = self.conv1.forward(fx, x);
        self.conv2.forward(fx, x)
    }
}

/// U-Net++ decoder: nested, densely connected skip pathways. Node
/// `x_{d}_{l}` sits at decoder level `l` after `d` refinement steps.
#[derive(Clone, Debug)]
pub struct UnetPlusPlusDecoder {
    blocks: HashMap<(usize, usize), Block>,
    depth: usize,
}

impl UnetPlusPlusDecoder {
    pub fn new<T: Scalar>(b: &mut Builder<T>, encoder_channels: &[usize]) -> Self {
        let enc: Vec<usize> = encoder_channels[1..].iter().rev().copied().collect();
        let mut ins = vec![enc[0]];
        ins.extend_from_slice(&DECODER_CHANNELS[..4]);
        let mut skips = enc[1..].to_vec();
        skips.push(0);
        let outs = DECODER_CHANNELS;
        let depth = ins.len() - 1;
        let mut blocks = HashMap::new();
        b.scope("decoder", |b| {
            b.scope("blocks", |b| {
                for l in 0..depth {
                    for d in 0..=l {
                        let (cin, skip, cout) = if d == 0 {
                            (ins[l], skips[l] * (l + 1), outs[l])
                        } else {
                            (skips[l - 1], skips[l] * (l + 1 - d), skips[l])
                        };
                        let blk = b.scope(format!("x_{d}_{l}"), |b| Block::new(b, cin, skip, cout));
                        blocks.insert((d, l), blk);
                    }
                }
                let blk = b.scope(format!("x_0_{depth}"), |b| Block::new(b, ins[depth], 0, outs[depth]));
                blocks.insert((0, depth), blk);
            })
        });
        UnetPlusPlusDecoder { blocks, depth }
    }

    pub fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, features: &[Var]) -> Var {
        let f: Vec<Var> = features[1..].iter().rev().copied().collect();
        let mut dense: HashMap<(usize, usize), Var> = HashMap::new();
        for layer in 0..self.depth {
            for d in 0..self.depth - layer {
                if layer == 0 {
                    let out = self.blocks[&(d, d)].forward(fx, f[d], Some(f[d + 1]));
                    dense.insert((d, d), out);
                } else {
                    let l = d + layer;
                    let mut cat: Vec<Var> = (d + 1..=l).map(|i| dense[&(i, l)]).collect();
                    cat.push(f[l + 1]);
                    let cat = fx.graph.concat(&cat);
                    let out = self.blocks[&(d, l)].forward(fx, dense[&(d, l - 1)], Some(cat));
                    dense.insert((d, l), out);
                }
            }
        }
        self.blocks[&(0, self.depth)].forward(fx, dense[&(0, self.depth - 1)], None)
    }
}
