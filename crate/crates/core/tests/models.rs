use enseg::model::{build_model, Architecture, Encoder, ModelSpec, SegModel};
use enseg_tensor::Tensor;

fn input(h: usize, w: usize) -> Tensor<f32> {
    let data = (0..3 * h * w).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
    Tensor::from_vec(&[1, 3, h, w], data).unwrap()
}

#[test]
fn every_architecture_outputs_a_distribution() {
    let (h, w) = (128, 160);
    let x = input(h, w);
    for arch in Architecture::ALL {
        let spec = ModelSpec::new(arch, Encoder::EfficientNetB0, 4);
        let model: SegModel<f32> = build_model(&spec, 7).unwrap();
        let y = model.predict(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4, h, w], "{arch}");
        let d = y.data();
        for p in 0..h * w {
            let s: f32 = (0..4).map(|c| d[c * h * w + p]).sum();
            assert!((s - 1.0).abs() < 1e-5, "{arch} pixel {p} sums to {s}");
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ModelSpec::new(Architecture::Fpn, Encoder::EfficientNetB0, 3);
    let model: SegModel<f32> = build_model(&spec, 3).unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = SegModel::<f32>::load(&path, &spec).unwrap();
    let x = input(64, 96);
    assert_eq!(model.predict(&x).unwrap().data(), back.predict(&x).unwrap().data());

    let other = ModelSpec::new(Architecture::Unet, Encoder::EfficientNetB0, 3);
    assert!(matches!(
        SegModel::<f32>::load(&path, &other),
        Err(enseg::EnsegError::Incompatible { .. })
    ));
}
