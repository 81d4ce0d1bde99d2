//! Forward-pass parity against exported reference weights. Skipped unless
//! `ENSEG_PARITY_DIR` points at the output of `scripts/smp_parity.py`.

use std::path::PathBuf;

use enseg::model::{build_model, Architecture, Encoder, ModelSpec, SegModel};
use enseg_tensor::io;

#[test]
fn forward_matches_reference() {
    let Some(dir) = std::env::var_os("ENSEG_PARITY_DIR").map(PathBuf::from) else {
        eprintln!("ENSEG_PARITY_DIR not set; skipping");
        return;
    };
    for arch in Architecture::ALL {
        let bytes = std::fs::read(dir.join(format!("{arch}.safetensors"))).unwrap();
        let mut tensors = io::read_safetensors::<f64>(&bytes).unwrap();
        let take = |ts: &mut Vec<(String, _)>, key: &str| {
            let i = ts.iter().position(|(n, _)| n == key).unwrap();
            ts.swap_remove(i).1
        };
        let x = take(&mut tensors, "__input__");
        let want = take(&mut tensors, "__output__");

        let spec = ModelSpec::new(arch, Encoder::EfficientNetB0, want.shape()[1]);
        let mut model: SegModel<f64> = build_model(&spec, 0).unwrap();
        io::assign_tensors(model.params_mut(), tensors, |n| Some(n.to_string()), true)
            .unwrap_or_else(|e| panic!("{arch}: {e}"));
        let got = model.predict(&x).unwrap();
        assert_eq!(got.shape(), want.shape(), "{arch}");
        let err = got
            .data()
            .iter()
            .zip(want.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!("{arch}: max abs diff {err:.3e}");
        assert!(err < 1e-9, "{arch}: max abs diff {err}");
    }
}
