use enseg_tensor::io::{load_safetensors, read_safetensors, save_safetensors};
use enseg_tensor::{
    Adam, BatchNorm2d, Builder, Conv2d, Conv2dGeometry, ConvInit, Forward, ParamKind, ParamStore, Tensor, Var,
};

struct Net {
    conv1: Conv2d,
    bn: BatchNorm2d,
    conv2: Conv2d,
}

fn net(seed: u64) -> (Net, ParamStore<f64>) {
    let mut b = Builder::<f64>::new(seed);
    let conv1 = b.scope("conv1", |b| Conv2d::new(b, 2, 3, Conv2dGeometry::new(3).pad(1), true, ConvInit::Default));
    let bn = b.scope("bn", |b| BatchNorm2d::new(b, 3, 1e-5, 0.1));
    let conv2 = b.scope("conv2", |b| Conv2d::new(b, 6, 3, Conv2dGeometry::new(1), true, ConvInit::Default));
    (Net { conv1, bn, conv2 }, b.finish())
}

fn input() -> Tensor<f64> {
    Tensor::from_fn(&[2, 2, 4, 4], |i| ((i * 29 % 31) as f64 / 15.5) - 1.0 + 0.01 * i as f64)
}

fn target() -> Tensor<f64> {
    let hw = 16;
    Tensor::from_fn(&[2, 3, 4, 4], |i| {
        let (n, c, p) = (i / (3 * hw), i / hw % 3, i % hw);
        f64::from(u8::from((p + n) % 3 == c))
    })
}

fn forward<'p>(net: &Net, store: &'p ParamStore<f64>, x: &Tensor<f64>) -> (Forward<'p, f64>, Var, Var) {
    let mut fx = Forward::new(store, true, true, 0);
    let xv = fx.graph.input(x.clone());
    let h = net.conv1.forward(&mut fx, xv);
    let h = net.bn.forward(&mut fx, h);
    let skip = fx.graph.silu(h);
    let p = fx.graph.max_pool2d(skip, 2, 2);
    let up = fx.graph.upsample_bilinear(p, 4, 4, false);
    let cat = fx.graph.concat(&[skip, up]);
    let logits = net.conv2.forward(&mut fx, cat);
    let probs = fx.graph.softmax(logits, 1);
    let loss = fx.graph.dice_loss(probs, target(), 1e-7);
    (fx, xv, loss)
}

/// conv, batch norm, SiLU, pool, bilinear upsample, skip concat, 1x1 conv,
/// softmax, Dice loss. Returns the loss and the gradients of the input and
/// of every parameter, in store order.
fn run(net: &Net, store: &ParamStore<f64>, x: &Tensor<f64>) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    let (fx, xv, loss) = forward(net, store, x);
    let value = fx.graph.value(loss).data()[0];
    let grads = fx.graph.backward(loss);
    let gx = grads.wrt(xv).unwrap().data().to_vec();
    let gp = store
        .ids()
        .map(|id| match grads.params().get(&id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; store.get(id).numel()],
        })
        .collect();
    (value, gx, gp)
}

fn close(analytic: f64, fd: f64) -> bool {
    (analytic - fd).abs() <= 1e-6 * fd.abs().max(analytic.abs()).max(1e-3)
}

#[test]
fn gradients_match_finite_differences() {
    let (net, store) = net(1);
    let x = input();
    let (_, gx, gp) = run(&net, &store, &x);
    let h = 1e-6;

    for i in 0..x.numel() {
        let shifted = |d: f64| {
            let mut x2 = x.clone();
            x2.data_mut()[i] += d;
            run(&net, &store, &x2).0
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        assert!(close(gx[i], fd), "input {i}: {} vs {fd}", gx[i]);
    }

    for (k, id) in store.ids().enumerate() {
        if store.entry(id).kind != ParamKind::Trainable {
            continue;
        }
        for j in 0..store.get(id).numel() {
            let shifted = |d: f64| {
                let mut s = store.clone();
                s.value_mut(id).data_mut()[j] += d;
                run(&net, &s, &x).0
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let name = &store.entry(id).name;
            assert!(close(gp[k][j], fd), "{name}[{j}]: {} vs {fd}", gp[k][j]);
        }
    }
}

#[test]
fn adam_reduces_the_loss() {
    let (net, mut store) = net(2);
    let x = input();
    let mut adam = Adam::new(1e-2);
    let first = run(&net, &store, &x).0;
    let mut last = first;
    for _ in 0..40 {
        let grads = {
            let (fx, _, loss) = forward(&net, &store, &x);
            last = fx.graph.value(loss).data()[0];
            fx.graph.backward(loss)
        };
        adam.step(&mut store, grads.params());
    }
    assert!(last < first * 0.8, "loss {first} -> {last}");
}

#[test]
fn safetensors_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (_, store) = net(3);
    let path = dir.path().join("p.safetensors");
    save_safetensors(&store, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let tensors = read_safetensors::<f64>(&bytes).unwrap();
    assert_eq!(tensors.len(), store.len());

    let (_, mut other) = net(4);
    load_safetensors(&mut other, &bytes).unwrap();
    for id in store.ids() {
        assert_eq!(store.get(id).data(), other.get(id).data(), "{}", store.entry(id).name);
    }
}
