//! EfficientNet B0-B4 feature extractor with TensorFlow-style static "same"
//! padding, laid out so parameter names match the reference checkpoints.

use enseg_tensor::{
    BatchNorm2d, Builder, Conv2d, Conv2dGeometry, ConvInit, Forward, Padding2d, Scalar, Var,
};

use super::Encoder;

const BN_EPS: f64 = 1e-3;
const BN_MOMENTUM: f64 = 0.01;
const DROP_CONNECT_RATE: f64 = 0.2;
const SE_RATIO: f64 = 0.25;

/// (repeats, kernel, stride, expand ratio, input filters, output filters)
const STAGES: [(usize, usize, usize, usize, usize, usize); 7] = [
    (1, 3, 1, 1, 32, 16),
    (2, 3, 2, 6, 16, 24),
    (2, 5, 2, 6, 24, 40),
    (3, 3, 2, 6, 40, 80),
    (3, 5, 1, 6, 80, 112),
    (4, 5, 2, 6, 112, 192),
    (1, 3, 1, 6, 192, 320),
];

struct Variant {
    width: f64,
    depth: f64,
    /// Nominal resolution; fixes the asymmetric padding of strided convs.
    image_size: usize,
    out_indexes: [usize; 4],
    out_channels: [usize; 6],
}

fn variant(e: Encoder) -> Variant {
    let (width, depth, image_size, out_indexes, out_channels) = match e {
        Encoder::EfficientNetB0 => (1.0, 1.0, 224, [2, 4, 8, 15], [3, 32, 24, 40, 112, 320]),
        Encoder::EfficientNetB1 => (1.0, 1.1, 240, [4, 7, 15, 22], [3, 32, 24, 40, 112, 320]),
        Encoder::EfficientNetB2 => (1.1, 1.2, 260, [4, 7, 15, 22], [3, 32, 24, 48, 120, 352]),
        Encoder::EfficientNetB3 => (1.2, 1.4, 300, [4, 7, 17, 25], [3, 40, 32, 48, 136, 384]),
        Encoder::EfficientNetB4 => (1.4, 1.8, 380, [5, 9, 21, 31], [3, 48, 32, 56, 160, 448]),
    };
    Variant {
        width,
        depth,
        image_size,
        out_indexes,
        out_channels,
    }
}

pub fn round_filters(filters: usize, width: f64) -> usize {
    let f = filters as f64 * width;
    let mut new = (((f + 4.0) as usize) / 8 * 8).max(8);
    if (new as f64) < 0.9 * f {
        new += 8;
    }
    new
}

pub fn round_repeats(repeats: usize, depth: f64) -> usize {
    (depth * repeats as f64).ceil() as usize
}

/// Padding that makes a conv over a nominal `size` input produce
/// `ceil(size / stride)` outputs; the odd pixel goes bottom/right.
fn same_padding(size: usize, kernel: usize, stride: usize) -> Padding2d {
    let out = size.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(size);
    Padding2d {
        top: total / 2,
        bottom: total - total / 2,
        left: total / 2,
        right: total - total / 2,
    }
}

fn static_conv(kernel: usize, stride: usize, size: usize) -> Conv2dGeometry {
    Conv2dGeometry::new(kernel)
        .stride(stride)
        .padding(same_padding(size, kernel, stride))
}

#[derive(Clone, Debug)]
struct MbConv {
    expand: Option<(Conv2d, BatchNorm2d)>,
    depthwise: Conv2d,
    bn1: BatchNorm2d,
    se_reduce: Conv2d,
    se_expand: Conv2d,
    project: Conv2d,
    bn2: BatchNorm2d,
    residual: bool,
}

struct BlockArgs {
    kernel: usize,
    stride: usize,
    expand: usize,
    cin: usize,
    cout: usize,
    /// Nominal input size at this block.
    size: usize,
    /// Replace stride with dilation 2 (output stride 16).
    dilate: bool,
    residual: bool,
}

impl MbConv {
    fn new<T: Scalar>(b: &mut Builder<T>, a: &BlockArgs) -> Self {
        let hidden = a.cin * a.expand;
        let pointwise = |b: &mut Builder<T>, cin, cout| {
            Conv2d::new(b, cin, cout, Conv2dGeometry::new(1), false, ConvInit::Default)
        };
        let expand = (a.expand != 1).then(|| {
            (
                b.scope("_expand_conv", |b| pointwise(b, a.cin, hidden)),
                b.scope("_bn0", |b| BatchNorm2d::new(b, hidden, BN_EPS, BN_MOMENTUM)),
            )
        });
        let dw_geom = if a.dilate {
            Conv2dGeometry::new(a.kernel)
                .dilation(2)
                .pad((a.kernel / 2) * 2)
                .groups(hidden)
        } else {
            static_conv(a.kernel, a.stride, a.size).groups(hidden)
        };
        let depthwise = b.scope("_depthwise_conv", |b| {
            Conv2d::new(b, hidden, hidden, dw_geom, false, ConvInit::Default)
        });
        let bn1 = b.scope("_bn1", |b| BatchNorm2d::new(b, hidden, BN_EPS, BN_MOMENTUM));
        let squeezed = ((a.cin as f64 * SE_RATIO) as usize).max(1);
        let one = Conv2dGeometry::new(1);
        let se_reduce = b.scope("_se_reduce", |b| {
            Conv2d::new(b, hidden, squeezed, one, true, ConvInit::Default)
        });
        let se_expand = b.scope("_se_expand", |b| {
            Conv2d::new(b, squeezed, hidden, one, true, ConvInit::Default)
        });
        let project = b.scope("_project_conv", |b| pointwise(b, hidden, a.cout));
        let bn2 = b.scope("_bn2", |b| BatchNorm2d::new(b, a.cout, BN_EPS, BN_MOMENTUM));
        MbConv {
            expand,
            depthwise,
            bn1,
            se_reduce,
            se_expand,
            project,
            bn2,
            residual: a.residual,
        }
    }

    fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: Var, drop_p: f64) -> Var {
        let mut h = x;
        if let Some((conv, bn)) = &self.expand {
            h = conv.forward(fx, h);
            h = bn.forward(fx, h);
            h = fx.graph.silu(h);
        }
        h = self.depthwise.forward(fx, h);
        h = self.bn1.forward(fx, h);
        h = fx.graph.silu(h);

        let mut s = fx.graph.adaptive_avg_pool2d(h, 1, 1);
        s = self.se_reduce.forward(fx, s);
        s = fx.graph.silu(s);
        s = self.se_expand.forward(fx, s);
        s = fx.graph.sigmoid(s);
        h = fx.graph.mul(s, h);

        h = self.project.forward(fx, h);
        h = self.bn2.forward(fx, h);
        if self.residual {
            h = fx.drop_connect(h, drop_p);
            h = fx.graph.add(h, x);
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct EfficientNet {
    stem: Conv2d,
    bn0: BatchNorm2d,
    blocks: Vec<MbConv>,
    out_indexes: [usize; 4],
    out_channels: [usize; 6],
    depth: usize,
}

impl EfficientNet {
    /// Builds under the `encoder` scope. `depth` (3..=5) is the number of
    /// downsampled feature maps returned; `output_stride` is 32 or 16.
    pub fn new<T: Scalar>(b: &mut Builder<T>, encoder: Encoder, depth: usize, output_stride: usize) -> Self {
        assert!((3..=5).contains(&depth), "encoder depth {depth}");
        assert!(output_stride == 32 || output_stride == 16, "output stride {output_stride}");
        let v = variant(encoder);
        b.scope("encoder", |b| {
            let stem_out = round_filters(32, v.width);
            let stem = b.scope("_conv_stem", |b| {
                Conv2d::new(b, 3, stem_out, static_conv(3, 2, v.image_size), false, ConvInit::Default)
            });
            let bn0 = b.scope("_bn0", |b| BatchNorm2d::new(b, stem_out, BN_EPS, BN_MOMENTUM));

            let mut size = v.image_size.div_ceil(2);
            let mut blocks = Vec::new();
            let dilate_from = v.out_indexes[2] + 1;
            b.scope("_blocks", |b| {
                for &(repeats, kernel, stride, expand, fin, fout) in &STAGES {
                    let (cin, cout) = (round_filters(fin, v.width), round_filters(fout, v.width));
                    for r in 0..round_repeats(repeats, v.depth) {
                        let idx = blocks.len();
                        let first = r == 0;
                        let args = BlockArgs {
                            kernel,
                            stride: if first { stride } else { 1 },
                            expand,
                            cin: if first { cin } else { cout },
                            cout,
                            size,
                            dilate: output_stride == 16 && idx >= dilate_from,
                            // The first block of a stage never carries the identity path.
                            residual: !first,
                        };
                        blocks.push(b.scope(idx, |b| MbConv::new(b, &args)));
                        if first {
                            size = size.div_ceil(stride);
                        }
                    }
                }
            });

            // Classifier-side layers: unused by the feature extractor but part
            // of the checkpoint layout.
            let last = round_filters(320, v.width);
            let head = round_filters(1280, v.width);
            b.scope("_conv_head", |b| {
                Conv2d::new(b, last, head, Conv2dGeometry::new(1), false, ConvInit::Default)
            });
            b.scope("_bn1", |b| BatchNorm2d::new(b, head, BN_EPS, BN_MOMENTUM));

            EfficientNet {
                stem,
                bn0,
                blocks,
                out_indexes: v.out_indexes,
                out_channels: v.out_channels,
                depth,
            }
        })
    }

    /// Channels of the returned feature maps, input first.
    pub fn out_channels(&self) -> &[usize] {
        &self.out_channels[..=self.depth]
    }

    /// `[x, stem, f2, ..]`, `depth + 1` maps in total.
    pub fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: Var) -> Vec<Var> {
        let mut features = vec![x];
        let mut h = self.stem.forward(fx, x);
        h = self.bn0.forward(fx, h);
        h = fx.graph.silu(h);
        features.push(h);
        let n = self.blocks.len() as f64;
        for (i, block) in self.blocks.iter().enumerate() {
            if features.len() > self.depth {
                break;
            }
            h = block.forward(fx, h, DROP_CONNECT_RATE * i as f64 / n);
            if self.out_indexes.contains(&i) {
                features.push(h);
            }
        }
        features.truncate(self.depth + 1);
        features
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_rounding_matches_known_widths() {
        assert_eq!(round_filters(32, 1.4), 48);
        assert_eq!(round_filters(320, 1.4), 448);
        assert_eq!(round_filters(40, 1.1), 48);
        assert_eq!(round_filters(112, 1.2), 136);
        assert_eq!(round_filters(1280, 1.0), 1280);
        assert_eq!(round_repeats(3, 1.8), 6);
    }

    #[test]
    fn same_padding_is_asymmetric_for_even_sizes() {
        let p = same_padding(224, 3, 2);
        assert_eq!((p.top, p.bottom), (0, 1));
        let p = same_padding(15, 5, 2);
        assert_eq!((p.top, p.bottom), (2, 2));
        let p = same_padding(56, 5, 1);
        assert_eq!((p.top, p.bottom), (2, 2));
    }

    #[test]
    fn block_counts_match_out_indexes() {
        for (e, last) in [
            (Encoder::EfficientNetB0, 15),
            (Encoder::EfficientNetB1, 22),
            (Encoder::EfficientNetB3, 25),
            (Encoder::EfficientNetB4, 31),
        ] {
            let mut b = Builder::<f32>::new(0);
            let net = EfficientNet::new(&mut b, e, 5, 32);
            assert_eq!(net.blocks.len(), last + 1, "{e:?}");
        }
    }
}
