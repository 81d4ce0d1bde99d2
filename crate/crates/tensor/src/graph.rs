//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations panic on shape mismatches: those are programming errors in the
//! model definition, and user-facing size checks happen before the graph is
//! built.

use std::collections::BTreeMap;

use crate::kernels::conv::{self, Conv2dGeometry};
use crate::kernels::elementwise::{self as ew, sigmoid};
use crate::kernels::norm;
use crate::kernels::sample;
use crate::param::ParamId;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        invstd: Vec<T>,
        batch_stats: bool,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        invstd: Vec<T>,
    },
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    UpsampleNearest(Var),
    UpsampleBilinear {
        x: Var,
        align_corners: bool,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<u32>,
    },
    AdaptiveAvgPool2d(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    DiceLoss {
        p: Var,
        target: Tensor<T>,
        smooth: f64,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient reaching a leaf created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor<T>> {
        self.params
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is retained by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor<T>, trainable: bool) -> Var {
        self.push(value, Op::Param(id), trainable)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: Conv2dGeometry) -> Var {
        let y = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom)
            .unwrap_or_else(|e| panic!("{e}"));
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(y, Op::Conv2d { x, w, b, geom }, ng)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeometry,
    ) -> Var {
        let y = conv::conv_transpose2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &geom,
            (0, 0),
        )
        .unwrap_or_else(|e| panic!("{e}"));
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(y, Op::ConvTranspose2d { x, w, b, geom }, ng)
    }

    /// Batch normalization with statistics of the current batch. Returns the
    /// output and the batch statistics for running-average updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> (Var, norm::BatchStats<T>) {
        let (y, stats, invstd) = norm::batch_norm_train_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mean: stats.mean.clone(),
            invstd,
            batch_stats: true,
        };
        (self.push(y, op, ng), stats)
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Var {
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let y = norm::channel_affine(
            self.value(x),
            mean,
            &invstd,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mean: mean.to_vec(),
            invstd,
            batch_stats: false,
        };
        self.push(y, op, ng)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Var {
        let (y, mean, invstd) = norm::group_norm_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            groups,
            eps,
        );
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            mean,
            invstd,
        };
        self.push(y, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.needs(x);
        self.push(y, Op::Relu(x), ng)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * sigmoid(v));
        let ng = self.needs(x);
        self.push(y, Op::Silu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push(y, Op::Sigmoid(x), ng)
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = ew::zip_broadcast(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(y, Op::Add(a, b), ng)
    }

    /// Broadcasting multiplication.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = ew::zip_broadcast(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(y, Op::Mul(a, b), ng)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ew::concat_forward(&vals, 1);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(y, Op::Concat(parts.to_vec()), ng)
    }

    pub fn upsample_nearest(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let y = sample::upsample_nearest_forward(self.value(x), oh, ow);
        let ng = self.needs(x);
        self.push(y, Op::UpsampleNearest(x), ng)
    }

    pub fn upsample_bilinear(&mut self, x: Var, oh: usize, ow: usize, align_corners: bool) -> Var {
        let y = sample::upsample_bilinear_forward(self.value(x), oh, ow, align_corners);
        let ng = self.needs(x);
        self.push(y, Op::UpsampleBilinear { x, align_corners }, ng)
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Var {
        let (y, argmax) = sample::max_pool2d_forward(self.value(x), kernel, stride);
        let ng = self.needs(x);
        self.push(y, Op::MaxPool2d { x, argmax }, ng)
    }

    pub fn adaptive_avg_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let y = sample::adaptive_avg_pool2d_forward(self.value(x), oh, ow);
        let ng = self.needs(x);
        self.push(y, Op::AdaptiveAvgPool2d(x), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let y = ew::softmax_forward(self.value(x), axis);
        let ng = self.needs(x);
        self.push(y, Op::Softmax { x, axis }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self.value(x).reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        let ng = self.needs(x);
        self.push(y, Op::Reshape(x), ng)
    }

    /// Batched matrix product of rank-3 values; see
    /// [`ew::batched_matmul`] for the transpose flags.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let y = ew::batched_matmul(self.value(a), self.value(b), ta, tb);
        let ng = self.needs(a) || self.needs(b);
        self.push(y, Op::MatMul { a, b, ta, tb }, ng)
    }

    /// Soft Dice loss `1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s)` against a
    /// one-hot `target` of the same shape. Produces a scalar.
    pub fn dice_loss(&mut self, p: Var, target: Tensor<T>, smooth: f64) -> Var {
        assert_eq!(self.shape(p), target.shape(), "dice target shape");
        let (num, den) = dice_terms(self.value(p), &target, smooth);
        let y = Tensor::scalar(T::from_f64_lossy(1.0 - num / den));
        let ng = self.needs(p);
        self.push(y, Op::DiceLoss { p, target, smooth }, ng)
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_val = self.value(root);
        grads[root.0] = Some(Tensor::full(root_val.shape(), T::one()));
        let mut params = BTreeMap::new();

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            let g = match &node.op {
                // Leaf gradients stay in place for `Gradients::wrt`.
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let mut acc = |v: Var, t: Tensor<T>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Param(id) => {
                    params.insert(*id, g);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (gx, gw) = conv::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        geom,
                        self.needs(*x),
                        self.needs(*w),
                    );
                    if let Some(b) = b {
                        acc(*b, conv::channel_sum(&g));
                    }
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                    if let Some(gw) = gw {
                        acc(*w, gw);
                    }
                }
                Op::ConvTranspose2d { x, w, b, geom } => {
                    let (gx, gw) = conv::conv_transpose2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        geom,
                        self.needs(*x),
                        self.needs(*w),
                    );
                    if let Some(b) = b {
                        acc(*b, conv::channel_sum(&g));
                    }
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                    if let Some(gw) = gw {
                        acc(*w, gw);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    invstd,
                    batch_stats,
                } => {
                    let gm = self.value(*gamma).data();
                    let f = if *batch_stats {
                        norm::batch_norm_train_backward
                    } else {
                        norm::batch_norm_eval_backward
                    };
                    let (gx, gg, gb) = f(self.value(*x), &g, gm, mean, invstd, self.needs(*x));
                    let c = gg.len();
                    acc(*gamma, Tensor::from_vec(&[c], gg).expect("shape"));
                    acc(*beta, Tensor::from_vec(&[c], gb).expect("shape"));
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    mean,
                    invstd,
                } => {
                    let (gx, gg, gb) = norm::group_norm_backward(
                        self.value(*x),
                        &g,
                        self.value(*gamma).data(),
                        *groups,
                        mean,
                        invstd,
                        self.needs(*x),
                    );
                    let c = gg.len();
                    acc(*gamma, Tensor::from_vec(&[c], gg).expect("shape"));
                    acc(*beta, Tensor::from_vec(&[c], gb).expect("shape"));
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                }
                Op::Relu(x) => {
                    let gx = ew::zip_broadcast(&g, self.value(*x), |g, v| {
                        if v > T::zero() {
                            g
                        } else {
                            T::zero()
                        }
                    });
                    acc(*x, gx);
                }
                Op::Silu(x) => {
                    let gx = ew::zip_broadcast(&g, self.value(*x), |g, v| {
                        let s = sigmoid(v);
                        g * s * (T::one() + v * (T::one() - s))
                    });
                    acc(*x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = ew::zip_broadcast(&g, &node.value, |g, s| g * s * (T::one() - s));
                    acc(*x, gx);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        acc(*a, ew::reduce_to(&g, self.shape(*a)));
                    }
                    if self.needs(*b) {
                        acc(*b, ew::reduce_to(&g, self.shape(*b)));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let full = ew::zip_broadcast(&g, self.value(*b), |g, v| g * v);
                        acc(*a, ew::reduce_to(&full, self.shape(*a)));
                    }
                    if self.needs(*b) {
                        let full = ew::zip_broadcast(&g, self.value(*a), |g, v| g * v);
                        acc(*b, ew::reduce_to(&full, self.shape(*b)));
                    }
                }
                Op::Concat(parts) => {
                    let shapes: Vec<Vec<usize>> =
                        parts.iter().map(|p| self.shape(*p).to_vec()).collect();
                    for (p, gp) in parts.iter().zip(ew::concat_backward(&g, &shapes, 1)) {
                        acc(*p, gp);
                    }
                }
                Op::UpsampleNearest(x) => {
                    acc(*x, sample::upsample_nearest_backward(self.shape(*x), &g));
                }
                Op::UpsampleBilinear { x, align_corners } => {
                    acc(
                        *x,
                        sample::upsample_bilinear_backward(self.shape(*x), &g, *align_corners),
                    );
                }
                Op::MaxPool2d { x, argmax } => {
                    acc(*x, sample::max_pool2d_backward(self.shape(*x), &g, argmax));
                }
                Op::AdaptiveAvgPool2d(x) => {
                    acc(*x, sample::adaptive_avg_pool2d_backward(self.shape(*x), &g));
                }
                Op::Softmax { x, axis } => {
                    acc(*x, ew::softmax_backward(&node.value, &g, *axis));
                }
                Op::Reshape(x) => {
                    acc(*x, g.reshape(self.shape(*x)).expect("shape"));
                }
                Op::MatMul { a, b, ta, tb } => {
                    // y = A B with A = op(a), B = op(b)
                    // dA = g B^T, dB = A^T g, then undo the storage transpose.
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let ga = if *ta {
                            ew::batched_matmul(bv, &g, *tb, true)
                        } else {
                            ew::batched_matmul(&g, bv, false, !*tb)
                        };
                        acc(*a, ga);
                    }
                    if self.needs(*b) {
                        let gb = if *tb {
                            ew::batched_matmul(&g, av, true, *ta)
                        } else {
                            ew::batched_matmul(av, &g, !*ta, false)
                        };
                        acc(*b, gb);
                    }
                }
                Op::DiceLoss { p, target, smooth } => {
                    let (num, den) = dice_terms(self.value(*p), target, *smooth);
                    let scale = g.data()[0].to_f64_lossy();
                    let gp = Tensor::from_vec(
                        target.shape(),
                        target
                            .data()
                            .iter()
                            .map(|&t| {
                                let gi = t.to_f64_lossy();
                                T::from_f64_lossy(scale * (num - 2.0 * gi * den) / (den * den))
                            })
                            .collect(),
                    )
                    .expect("shape");
                    acc(*p, gp);
                }
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }
}

/// Numerator and denominator of the soft Dice coefficient, accumulated in f64.
pub fn dice_terms<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>, smooth: f64) -> (f64, f64) {
    let (mut pg, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in p.data().iter().zip(g.data()) {
        let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
        pg += a * b;
        sp += a;
        sg += b;
    }
    (2.0 * pg + smooth, sp + sg + smooth)
}
