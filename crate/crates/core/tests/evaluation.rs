use enseg::evaluation::{evaluate, export_overlays, EvalOptions};
use enseg::metrics::{MetricsAccumulator, DEFAULT_SMOOTH};
use enseg::preprocess::PreprocessConfig;
use enseg::raster::{image_dimensions, LabelMask};
use enseg::synthetic::{generate_shapes, shapes_classes, ShapesConfig};
use enseg::{build_model, Architecture, Encoder, ModelSpec, ProbabilityMap, SegModel};

fn masks() -> Vec<LabelMask> {
    vec![
        LabelMask::from_rows(&[&[0, 1, 1], &[2, 2, 0]]),
        LabelMask::from_rows(&[&[1, 1, 1], &[0, 0, 0]]),
        LabelMask::from_rows(&[&[2, 0, 2], &[2, 1, 0]]),
    ]
}

#[test]
fn perfect_prediction_scores_one() {
    let mut acc = MetricsAccumulator::new(3, 0.5, DEFAULT_SMOOTH);
    for m in masks() {
        acc.add(&ProbabilityMap::<f64>::one_hot(&m, 3).unwrap(), &m).unwrap();
    }
    let s = acc.finish();
    assert_eq!(s.images, 3);
    assert_eq!(s.thresholded.iou_micro, 1.0);
    assert_eq!(s.thresholded.iou_macro, 1.0);
    assert_eq!(s.argmax.f1_micro, 1.0);
    assert!(s.dice_loss.abs() < 1e-12);
}

#[test]
fn uniform_map_matches_hand_values() {
    // Two classes at exactly 0.5: nothing clears the strict threshold, so
    // every labelled pixel is a false negative.
    let m = LabelMask::from_rows(&[&[0, 1], &[1, 1]]);
    let map = ProbabilityMap::from_vec(2, 2, 2, vec![0.5f64; 8]).unwrap();
    let mut acc = MetricsAccumulator::new(2, 0.5, 0.0);
    acc.add(&map, &m).unwrap();
    let s = acc.finish();
    assert_eq!(s.thresholded.iou_micro, 0.0);
    assert_eq!(s.thresholded.f1_macro, 0.0);
    // inter = 4 * 0.5, sum p = 4, sum g = 4
    assert_eq!(s.dice_loss, 0.5);
    // argmax ties go to class 0: class 0 gets 1 tp and 3 fp.
    assert_eq!(s.per_class[0].iou, 0.0);
    assert_eq!(s.argmax.iou_micro, 1.0 / 7.0);
}

#[test]
fn merged_accumulators_equal_one_pass() {
    let maps: Vec<ProbabilityMap<f64>> = (0..3)
        .map(|k| {
            let data = (0..18).map(|i| ((i * 7 + k * 3) % 10) as f64 / 10.0).collect();
            ProbabilityMap::from_vec(3, 2, 3, data).unwrap()
        })
        .collect();
    let ms = masks();
    let mut whole = MetricsAccumulator::new(3, 0.5, DEFAULT_SMOOTH);
    let mut a = MetricsAccumulator::new(3, 0.5, DEFAULT_SMOOTH);
    let mut b = MetricsAccumulator::new(3, 0.5, DEFAULT_SMOOTH);
    for (i, (p, m)) in maps.iter().zip(&ms).enumerate() {
        whole.add(p, m).unwrap();
        if i == 0 { &mut a } else { &mut b }.add(p, m).unwrap();
    }
    a.merge(&b);
    let (x, y) = (whole.finish(), a.finish());
    assert_eq!(x.thresholded, y.thresholded);
    assert_eq!(x.argmax, y.argmax);
    assert!((x.dice_loss - y.dice_loss).abs() < 1e-12);
}

fn setup() -> (SegModel<f32>, Vec<enseg::data::LoadedSample>, PreprocessConfig) {
    let spec = ModelSpec::new(Architecture::Fpn, Encoder::EfficientNetB0, 3);
    let samples = generate_shapes(&ShapesConfig {
        count: 2,
        ..Default::default()
    })
    .unwrap();
    let pre = PreprocessConfig {
        target_height: 64,
        target_width: 96,
        augment: None,
        ..Default::default()
    };
    (build_model(&spec, 4).unwrap(), samples, pre)
}

#[test]
fn evaluate_counts_every_pixel() {
    let (model, samples, pre) = setup();
    let s = evaluate(&model, &samples[..], &pre, &EvalOptions::default()).unwrap();
    assert_eq!(s.images, 2);
    assert!(s.is_complete());
    assert!((0.0..=1.0).contains(&s.thresholded.iou_micro));
    assert_eq!(s.per_class.len(), 3);
}

#[test]
fn overlays_are_three_panels_wide() {
    let dir = tempfile::tempdir().unwrap();
    let (model, samples, pre) = setup();
    let written = export_overlays(&model, &samples[..], &shapes_classes(), &pre, dir.path()).unwrap();
    assert_eq!(written.len(), 2);
    for p in written {
        assert_eq!(image_dimensions(&p).unwrap(), (3 * 96, 64));
    }
}
