//! IoU, F1 and soft Dice over probability maps and label masks.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::AddAssign;

use enseg_tensor::Scalar;
use serde::{Deserialize, Serialize};

use crate::ensemble::{argmax_mask, ProbabilityMap};
use crate::error::{EnsegError, Result};
use crate::raster::SegmentationMask;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SMOOTH: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `tp / (tp + fp + fn)`; a class absent from both sides scores 1.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / d as f64
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Micro,
    Macro,
}

impl std::str::FromStr for Aggregation {
    type Err = EnsegError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "micro" => Ok(Aggregation::Micro),
            "macro" => Ok(Aggregation::Macro),
            _ => Err(EnsegError::Config(format!("unknown aggregation {s:?}"))),
        }
    }
}

/// Confusion counts per class, one-vs-rest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassConfusion {
    pub classes: Vec<ConfusionCounts>,
}

impl ClassConfusion {
    pub fn new(num_classes: usize) -> Self {
        ClassConfusion {
            classes: vec![ConfusionCounts::default(); num_classes],
        }
    }

    pub fn merge(&mut self, other: &ClassConfusion) {
        assert_eq!(self.classes.len(), other.classes.len(), "class count");
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            *a += *b;
        }
    }

    pub fn total(&self) -> ConfusionCounts {
        let mut t = ConfusionCounts::default();
        for c in &self.classes {
            t += *c;
        }
        t
    }

    pub fn iou(&self, agg: Aggregation) -> f64 {
        match agg {
            Aggregation::Micro => self.total().iou(),
            Aggregation::Macro => mean(self.classes.iter().map(ConfusionCounts::iou)),
        }
    }

    pub fn f1(&self, agg: Aggregation) -> f64 {
        match agg {
            Aggregation::Micro => self.total().f1(),
            Aggregation::Macro => mean(self.classes.iter().map(ConfusionCounts::f1)),
        }
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn check_shapes<T: Scalar>(pred: &ProbabilityMap<T>, truth: &SegmentationMask) -> Result<()> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(EnsegError::MetricShape(format!(
            "prediction is {}x{}, truth is {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    if let Some(l) = truth.max_label().filter(|&l| l as usize >= pred.num_classes()) {
        return Err(EnsegError::MetricShape(format!(
            "truth label {l} with {} predicted classes",
            pred.num_classes()
        )));
    }
    Ok(())
}

/// Counts with each class plane binarized at `p > threshold`.
pub fn confusion_thresholded<T: Scalar>(
    pred: &ProbabilityMap<T>,
    truth: &SegmentationMask,
    threshold: f64,
) -> Result<ClassConfusion> {
    check_shapes(pred, truth)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(EnsegError::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    let t = T::from_f64(threshold).expect("finite");
    let mut out = ClassConfusion::new(pred.num_classes());
    for (c, counts) in out.classes.iter_mut().enumerate() {
        for (&p, &g) in pred.plane(c).iter().zip(truth.data()) {
            tally(counts, p > t, g as usize == c);
        }
    }
    Ok(out)
}

/// Counts for the argmax mask.
pub fn confusion_argmax<T: Scalar>(
    pred: &ProbabilityMap<T>,
    truth: &SegmentationMask,
) -> Result<ClassConfusion> {
    check_shapes(pred, truth)?;
    Ok(confusion_masks(&argmax_mask(pred), truth, pred.num_classes()))
}

/// Counts between two label masks of the same size.
pub fn confusion_masks(
    pred: &SegmentationMask,
    truth: &SegmentationMask,
    num_classes: usize,
) -> ClassConfusion {
    assert_eq!(pred.data().len(), truth.data().len(), "mask sizes");
    let mut out = ClassConfusion::new(num_classes);
    for (c, counts) in out.classes.iter_mut().enumerate() {
        for (&p, &g) in pred.data().iter().zip(truth.data()) {
            tally(counts, p as usize == c, g as usize == c);
        }
    }
    out
}

fn tally(c: &mut ConfusionCounts, pred: bool, truth: bool) {
    match (pred, truth) {
        (true, true) => c.tp += 1,
        (true, false) => c.fp += 1,
        (false, true) => c.fn_ += 1,
        (false, false) => c.tn += 1,
    }
}

pub fn iou_score<T: Scalar>(
    pred: &ProbabilityMap<T>,
    truth: &SegmentationMask,
    threshold: f64,
    agg: Aggregation,
) -> Result<f64> {
    Ok(confusion_thresholded(pred, truth, threshold)?.iou(agg))
}

pub fn f1_score<T: Scalar>(
    pred: &ProbabilityMap<T>,
    truth: &SegmentationMask,
    threshold: f64,
    agg: Aggregation,
) -> Result<f64> {
    Ok(confusion_thresholded(pred, truth, threshold)?.f1(agg))
}

/// `(sum p*g, sum p, sum g)` against the one-hot truth, optionally for one
/// class only.
fn dice_sums<T: Scalar>(
    pred: &ProbabilityMap<T>,
    truth: &SegmentationMask,
    class: Option<usize>,
) -> (f64, f64, f64) {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    let classes = match class {
        Some(c) => c..c + 1,
        None => 0..pred.num_classes(),
    };
    for c in classes {
        for (&p, &g) in pred.plane(c).iter().zip(truth.data()) {
            let p = p.to_f64().unwrap_or(f64::NAN);
            sp += p;
            if g as usize == c {
                inter += p;
                sg += 1.0;
            }
        }
    }
    (inter, sp, sg)
}

fn dice_from_sums((inter, sp, sg): (f64, f64, f64), smooth: f64) -> f64 {
    1.0 - (2.0 * inter + smooth) / (sp + sg + smooth)
}

/// Soft Dice loss summed over every pixel and class.
pub fn dice_loss<T: Scalar>(
    pred: &ProbabilityMap<T>,
    truth: &SegmentationMask,
    smooth: f64,
) -> Result<f64> {
    check_shapes(pred, truth)?;
    if !(smooth >= 0.0) {
        return Err(EnsegError::Config(format!("smooth must be >= 0, got {smooth}")));
    }
    Ok(dice_from_sums(dice_sums(pred, truth, None), smooth))
}

/// Analytic gradient of [`dice_loss`] with respect to each entry of `pred`,
/// laid out like the map.
pub fn dice_loss_grad<T: Scalar>(
    pred: &ProbabilityMap<T>,
    truth: &SegmentationMask,
    smooth: f64,
) -> Result<Vec<f64>> {
    check_shapes(pred, truth)?;
    let (inter, sp, sg) = dice_sums(pred, truth, None);
    let num = 2.0 * inter + smooth;
    let den = sp + sg + smooth;
    let hw = truth.data().len();
    let mut out = Vec::with_capacity(pred.num_classes() * hw);
    for c in 0..pred.num_classes() {
        for &g in truth.data() {
            let g = if g as usize == c { 1.0 } else { 0.0 };
            out.push(-(2.0 * g * den - num) / (den * den));
        }
    }
    Ok(out)
}

/// IoU and F1 under both aggregations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub iou_micro: f64,
    pub iou_macro: f64,
    pub f1_micro: f64,
    pub f1_macro: f64,
}

impl Scores {
    pub fn from_confusion(c: &ClassConfusion) -> Self {
        Scores {
            iou_micro: c.iou(Aggregation::Micro),
            iou_macro: c.iou(Aggregation::Macro),
            f1_micro: c.f1(Aggregation::Micro),
            f1_macro: c.f1(Aggregation::Macro),
        }
    }

    pub fn iou(&self, agg: Aggregation) -> f64 {
        match agg {
            Aggregation::Micro => self.iou_micro,
            Aggregation::Macro => self.iou_macro,
        }
    }

    pub fn f1(&self, agg: Aggregation) -> f64 {
        match agg {
            Aggregation::Micro => self.f1_micro,
            Aggregation::Macro => self.f1_macro,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub iou: f64,
    pub f1: f64,
    pub dice_loss: f64,
}

/// Metrics for one split. `thresholded` binarizes each class plane at the
/// threshold; `argmax` scores the final masks. `dice_loss` uses Dice terms
/// summed over every image of the split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub images: usize,
    pub thresholded: Scores,
    pub argmax: Scores,
    pub dice_loss: f64,
    /// Per-class values on the thresholded path.
    pub per_class: Vec<ClassMetrics>,
    /// Samples that could not be scored; non-empty means partial coverage.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<SampleFailure>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub id: String,
    pub error: String,
}

impl SplitMetrics {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Streaming accumulator for [`SplitMetrics`]. Merging is associative.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    threshold: f64,
    smooth: f64,
    thresholded: ClassConfusion,
    argmax: ClassConfusion,
    images: usize,
    /// `(sum p*g, sum p, sum g)` per class.
    dice_terms: Vec<(f64, f64, f64)>,
}

impl MetricsAccumulator {
    pub fn new(num_classes: usize, threshold: f64, smooth: f64) -> Self {
        MetricsAccumulator {
            threshold,
            smooth,
            thresholded: ClassConfusion::new(num_classes),
            argmax: ClassConfusion::new(num_classes),
            images: 0,
            dice_terms: vec![(0.0, 0.0, 0.0); num_classes],
        }
    }

    pub fn add<T: Scalar>(&mut self, pred: &ProbabilityMap<T>, truth: &SegmentationMask) -> Result<()> {
        let classes = self.dice_terms.len();
        if pred.num_classes() != classes {
            return Err(EnsegError::MetricShape(format!(
                "prediction has {} classes, expected {classes}",
                pred.num_classes()
            )));
        }
        let thr = confusion_thresholded(pred, truth, self.threshold)?;
        let arg = confusion_argmax(pred, truth)?;
        self.thresholded.merge(&thr);
        self.argmax.merge(&arg);
        for (c, acc) in self.dice_terms.iter_mut().enumerate() {
            let (i, p, g) = dice_sums(pred, truth, Some(c));
            acc.0 += i;
            acc.1 += p;
            acc.2 += g;
        }
        self.images += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.thresholded.merge(&other.thresholded);
        self.argmax.merge(&other.argmax);
        self.images += other.images;
        for (a, b) in self.dice_terms.iter_mut().zip(&other.dice_terms) {
            a.0 += b.0;
            a.1 += b.1;
            a.2 += b.2;
        }
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn thresholded(&self) -> &ClassConfusion {
        &self.thresholded
    }

    pub fn finish(&self) -> SplitMetrics {
        let total = self
            .dice_terms
            .iter()
            .fold((0.0, 0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
        SplitMetrics {
            images: self.images,
            thresholded: Scores::from_confusion(&self.thresholded),
            argmax: Scores::from_confusion(&self.argmax),
            dice_loss: dice_from_sums(total, self.smooth),
            per_class: self
                .thresholded
                .classes
                .iter()
                .zip(&self.dice_terms)
                .map(|(c, d)| ClassMetrics {
                    iou: c.iou(),
                    f1: c.f1(),
                    dice_loss: dice_from_sums(*d, self.smooth),
                })
                .collect(),
            failures: Vec::new(),
        }
    }
}

/// Metrics of one model over named splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub threshold: f64,
    pub aggregation: Aggregation,
    pub class_names: Vec<String>,
    pub splits: BTreeMap<String, SplitMetrics>,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let agg = self.aggregation;
        writeln!(f, "{} (threshold {}, {:?})", self.model, self.threshold, agg)?;
        writeln!(
            f,
            "{:<8} {:>7} {:>9} {:>9} {:>9} {:>9}",
            "split", "images", "iou", "f1", "dice_loss", "iou_argmax"
        )?;
        for (name, s) in &self.splits {
            writeln!(
                f,
                "{:<8} {:>7} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                name,
                s.images,
                s.thresholded.iou(agg),
                s.thresholded.f1(agg),
                s.dice_loss,
                s.argmax.iou(agg)
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> (ProbabilityMap<f64>, SegmentationMask) {
        // Background plane then foreground plane; predicted foreground on
        // the top row only.
        let pred = ProbabilityMap::from_vec(
            2,
            2,
            2,
            vec![0.1, 0.1, 0.9, 0.9, 0.9, 0.9, 0.1, 0.1],
        )
        .unwrap();
        let truth = SegmentationMask::from_rows(&[&[1, 0], &[0, 0]]);
        (pred, truth)
    }

    #[test]
    fn foreground_iou_by_hand() {
        let (pred, truth) = two_by_two();
        let c = confusion_thresholded(&pred, &truth, 0.5).unwrap();
        assert_eq!(c.classes[1], ConfusionCounts { tp: 1, fp: 1, fn_: 0, tn: 2 });
        assert_eq!(c.classes[1].iou(), 0.5);
        assert!((c.classes[1].f1() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dice_by_hand() {
        let pred = ProbabilityMap::from_vec(2, 1, 2, vec![0.5; 4]).unwrap();
        let truth = SegmentationMask::from_rows(&[&[0, 1]]);
        assert_eq!(dice_loss(&pred, &truth, 0.0).unwrap(), 0.5);
        let perfect = ProbabilityMap::<f64>::one_hot(&truth, 2).unwrap();
        assert_eq!(dice_loss(&perfect, &truth, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn empty_class_convention() {
        let truth = SegmentationMask::from_rows(&[&[0, 0]]);
        let pred = ProbabilityMap::<f64>::one_hot(&truth, 3).unwrap();
        let c = confusion_thresholded(&pred, &truth, 0.5).unwrap();
        assert_eq!(c.iou(Aggregation::Macro), 1.0);

        let other = SegmentationMask::from_rows(&[&[0, 2]]);
        let c = confusion_thresholded(&pred, &other, 0.5).unwrap();
        // class 0: iou 1/2, class 1 absent from both: 1, class 2 missed: 0
        assert!((c.iou(Aggregation::Macro) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (pred, _) = two_by_two();
        let truth = SegmentationMask::from_rows(&[&[0, 0, 0]]);
        assert!(matches!(
            iou_score(&pred, &truth, 0.5, Aggregation::Micro),
            Err(EnsegError::MetricShape(_))
        ));
    }
}
