//! Layers with parameters, and the per-pass [`Forward`] context they run in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::kernels::conv::Conv2dGeometry;
use crate::param::{Builder, Init, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// State for one forward pass: the graph being recorded, read access to the
/// parameters, the train/eval switch and the rng driving dropout.
pub struct Forward<'p, T: Scalar> {
    pub graph: Graph<T>,
    params: &'p ParamStore<T>,
    train: bool,
    record_grad: bool,
    rng: ChaCha8Rng,
    cache: Vec<Option<Var>>,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
    bn_momentum: Option<f64>,
}

impl<'p, T: Scalar> Forward<'p, T> {
    /// `train` selects batch statistics and enables dropout; `record_grad`
    /// marks trainable parameters as requiring gradients.
    pub fn new(params: &'p ParamStore<T>, train: bool, record_grad: bool, seed: u64) -> Self {
        Forward {
            graph: Graph::new(),
            params,
            train,
            record_grad,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cache: vec![None; params.len()],
            buffer_updates: Vec::new(),
            bn_momentum: None,
        }
    }

    /// Replaces every batch-norm momentum for this pass. Passing `1 / k` on
    /// the k-th of a series of passes makes the running statistics a plain
    /// cumulative average.
    pub fn with_bn_momentum(mut self, momentum: f64) -> Self {
        self.bn_momentum = Some(momentum);
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Graph node for a parameter, created on first use.
    pub fn var(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.cache[id.0] {
            return v;
        }
        let e = self.params.entry(id);
        let trainable = self.record_grad && e.kind == ParamKind::Trainable;
        let v = self.graph.param(id, e.value.clone(), trainable);
        self.cache[id.0] = Some(v);
        v
    }

    /// Zeroes whole channels with probability `p` during training, scaling
    /// survivors by `1 / (1 - p)`.
    pub fn dropout2d(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let s = self.graph.shape(x);
        let (n, c) = (s[0], s[1]);
        let keep = 1.0 - p;
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(&[n, c, 1, 1], |_| {
            if rng.random::<f64>() < keep {
                T::from_f64_lossy(1.0 / keep)
            } else {
                T::zero()
            }
        });
        let m = self.graph.constant(mask);
        self.graph.mul(x, m)
    }

    /// Stochastic depth on a residual branch: drops whole samples with
    /// probability `p` during training.
    pub fn drop_connect(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let n = self.graph.shape(x)[0];
        let keep = 1.0 - p;
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(&[n, 1, 1, 1], |_| {
            let binary = (keep + rng.random::<f64>()).floor();
            T::from_f64_lossy(binary / keep)
        });
        let m = self.graph.constant(mask);
        self.graph.mul(x, m)
    }

    fn push_buffer_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.push((id, value));
    }

    /// Ends the pass, returning the graph and pending buffer updates (see
    /// [`apply_buffer_updates`]).
    pub fn finish(self) -> (Graph<T>, Vec<(ParamId, Tensor<T>)>) {
        (self.graph, self.buffer_updates)
    }
}

/// Writes running-statistics updates collected during a training pass.
pub fn apply_buffer_updates<T: Scalar>(
    store: &mut ParamStore<T>,
    updates: Vec<(ParamId, Tensor<T>)>,
) {
    for (id, v) in updates {
        *store.value_mut(id) = v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvInit {
    /// PyTorch's default layer initialization for weight and bias.
    Default,
    /// Kaiming uniform weights, zero bias.
    Kaiming,
    /// Xavier uniform weights, zero bias.
    Xavier,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: Conv2dGeometry,
}

impl Conv2d {
    /// Registers `weight` (and `bias`) in the builder's current scope.
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        cin: usize,
        cout: usize,
        geom: Conv2dGeometry,
        bias: bool,
        init: ConvInit,
    ) -> Self {
        let (kh, kw) = geom.kernel;
        let cin_g = cin / geom.groups;
        let fan_in = cin_g * kh * kw;
        let fan_out = cout / geom.groups * kh * kw;
        let (w_init, b_init) = match init {
            ConvInit::Default => (Init::DefaultUniform { fan_in }, Init::DefaultUniform { fan_in }),
            ConvInit::Kaiming => (Init::KaimingUniform { fan_in }, Init::Zeros),
            ConvInit::Xavier => (Init::XavierUniform { fan_in, fan_out }, Init::Zeros),
        };
        let weight = b.param("weight", &[cout, cin_g, kh, kw], w_init);
        let bias = bias.then(|| b.param("bias", &[cout], b_init));
        Conv2d { weight, bias, geom }
    }

    pub fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: Var) -> Var {
        let w = fx.var(self.weight);
        let b = self.bias.map(|b| fx.var(b));
        fx.graph.conv2d(x, w, b, self.geom)
    }
}

/// Transposed convolution with weight `cin x cout x k x k`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: Conv2dGeometry,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        cin: usize,
        cout: usize,
        geom: Conv2dGeometry,
        bias: bool,
    ) -> Self {
        let (kh, kw) = geom.kernel;
        let fan_in = cout * kh * kw;
        let weight = b.param("weight", &[cin, cout, kh, kw], Init::DefaultUniform { fan_in });
        let bias = bias.then(|| b.param("bias", &[cout], Init::DefaultUniform { fan_in }));
        ConvTranspose2d { weight, bias, geom }
    }

    pub fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: Var) -> Var {
        let w = fx.var(self.weight);
        let b = self.bias.map(|b| fx.var(b));
        fx.graph.conv_transpose2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    /// Weight of the new batch statistic in the running average.
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(b: &mut Builder<T>, c: usize, eps: f64, momentum: f64) -> Self {
        BatchNorm2d {
            weight: b.param("weight", &[c], Init::Ones),
            bias: b.param("bias", &[c], Init::Zeros),
            running_mean: b.buffer("running_mean", Tensor::zeros(&[c])),
            running_var: b.buffer("running_var", Tensor::ones(&[c])),
            eps,
            momentum,
        }
    }

    pub fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: Var) -> Var {
        let gamma = fx.var(self.weight);
        let beta = fx.var(self.bias);
        let eps = T::from_f64_lossy(self.eps);
        let params = fx.params();
        if fx.is_train() {
            let (y, stats) = fx.graph.batch_norm_train(x, gamma, beta, eps);
            let m = T::from_f64_lossy(fx.bn_momentum.unwrap_or(self.momentum));
            let keep = T::one() - m;
            let blend = |old: &Tensor<T>, new: &[T]| {
                Tensor::from_vec(
                    old.shape(),
                    old.data().iter().zip(new).map(|(&o, &n)| keep * o + m * n).collect(),
                )
                .expect("shape")
            };
            let rm = blend(params.get(self.running_mean), &stats.mean);
            let rv = blend(params.get(self.running_var), &stats.unbiased_var());
            fx.push_buffer_update(self.running_mean, rm);
            fx.push_buffer_update(self.running_var, rv);
            y
        } else {
            fx.graph.batch_norm_eval(
                x,
                gamma,
                beta,
                params.get(self.running_mean).data(),
                params.get(self.running_var).data(),
                eps,
            )
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<T: Scalar>(b: &mut Builder<T>, groups: usize, c: usize, eps: f64) -> Self {
        assert_eq!(c % groups, 0, "group norm: {c} channels in {groups} groups");
        GroupNorm {
            weight: b.param("weight", &[c], Init::Ones),
            bias: b.param("bias", &[c], Init::Zeros),
            groups,
            eps,
        }
    }

    pub fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: Var) -> Var {
        let gamma = fx.var(self.weight);
        let beta = fx.var(self.bias);
        fx.graph
            .group_norm(x, gamma, beta, self.groups, T::from_f64_lossy(self.eps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_norm_updates_running_stats_only_in_train() {
        let mut b = Builder::<f64>::new(0);
        let bn = b.scope("bn", |b| BatchNorm2d::new(b, 1, 1e-5, 0.1));
        let mut store = b.finish();
        let x = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();

        let mut fx = Forward::new(&store, false, false, 0);
        let xv = fx.graph.constant(x.clone());
        bn.forward(&mut fx, xv);
        let (_, updates) = fx.finish();
        assert!(updates.is_empty());

        let mut fx = Forward::new(&store, true, true, 0);
        let xv = fx.graph.constant(x);
        bn.forward(&mut fx, xv);
        let (_, updates) = fx.finish();
        apply_buffer_updates(&mut store, updates);
        // mean 2.5, unbiased var 5/3
        let rm = store.get(store.id("bn.running_mean").unwrap()).data()[0];
        let rv = store.get(store.id("bn.running_var").unwrap()).data()[0];
        assert!((rm - 0.25).abs() < 1e-12);
        assert!((rv - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let store = ParamStore::<f32>::new();
        let mut fx = Forward::new(&store, false, false, 1);
        let x = fx.graph.constant(Tensor::ones(&[2, 4, 2, 2]));
        assert_eq!(fx.dropout2d(x, 0.5), x);
        assert_eq!(fx.drop_connect(x, 0.5), x);
    }
}
