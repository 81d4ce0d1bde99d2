//! Split-level evaluation, results tables and overlay composites.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use enseg_tensor::{Scalar, Tensor};
use image::{GenericImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{ClassTable, SplitName};
use crate::ensemble::{argmax_mask, EnsembleModel, ProbabilityMap};
use crate::error::{EnsegError, Result};
use crate::metrics::{Aggregation, MetricsAccumulator, MetricsReport, SampleFailure, SplitMetrics, DEFAULT_SMOOTH, DEFAULT_THRESHOLD};
use crate::model::SegModel;
use crate::preprocess::{normalize, resize_pair, PreprocessConfig};
use crate::raster::{LabelMask, SegmentationMask};
use crate::training::SampleSource;

/// Something that maps a normalized `[N, 3, H, W]` batch to probabilities.
pub trait Predictor<T: Scalar> {
    fn name(&self) -> String;
    fn num_classes(&self) -> usize;
    fn check_input(&self, height: usize, width: usize) -> Result<()>;
    fn predict_batch(&self, x: &Tensor<T>) -> Result<Vec<ProbabilityMap<T>>>;
}

impl<T: Scalar> Predictor<T> for SegModel<T> {
    fn name(&self) -> String {
        self.spec().label()
    }

    fn num_classes(&self) -> usize {
        self.spec().num_classes
    }

    fn check_input(&self, height: usize, width: usize) -> Result<()> {
        self.spec().check_input(height, width)
    }

    fn predict_batch(&self, x: &Tensor<T>) -> Result<Vec<ProbabilityMap<T>>> {
        ProbabilityMap::from_batch(&self.predict(x)?)
    }
}

impl<T: Scalar> Predictor<T> for EnsembleModel<T> {
    fn name(&self) -> String {
        self.variant_name().to_string()
    }

    fn num_classes(&self) -> usize {
        EnsembleModel::num_classes(self)
    }

    fn check_input(&self, height: usize, width: usize) -> Result<()> {
        EnsembleModel::check_input(self, height, width)
    }

    fn predict_batch(&self, x: &Tensor<T>) -> Result<Vec<ProbabilityMap<T>>> {
        self.predict(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub threshold: f64,
    pub smooth: f64,
    pub aggregation: Aggregation,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: DEFAULT_THRESHOLD,
            smooth: DEFAULT_SMOOTH,
            aggregation: Aggregation::Micro,
        }
    }
}

/// Resized input and mask without augmentation.
fn prepare_eval<T: Scalar, S: SampleSource + ?Sized>(
    source: &S,
    index: usize,
    pre: &PreprocessConfig,
) -> Result<(RgbImage, Tensor<T>, LabelMask)> {
    let s = source.load(index)?;
    let (img, mask) = resize_pair(&s.image, &s.mask, pre)?;
    let x = normalize::<T>(&img, pre.norm_mean, pre.norm_std);
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let x = x.reshape(&[1, 3, h, w])?;
    Ok((img, x, mask))
}

/// Scores every sample one at a time. Samples that fail to load or score
/// are listed in the result instead of aborting the run.
pub fn evaluate<T: Scalar, P: Predictor<T> + ?Sized, S: SampleSource + ?Sized>(
    predictor: &P,
    samples: &S,
    pre: &PreprocessConfig,
    opts: &EvalOptions,
) -> Result<SplitMetrics> {
    if samples.is_empty() {
        return Err(EnsegError::EmptyDataset("nothing to evaluate".into()));
    }
    predictor.check_input(pre.target_height, pre.target_width)?;
    let mut acc = MetricsAccumulator::new(predictor.num_classes(), opts.threshold, opts.smooth);
    let mut failures = Vec::new();
    for i in 0..samples.len() {
        let scored = prepare_eval::<T, S>(samples, i, pre).and_then(|(_, x, mask)| {
            let map = predictor.predict_batch(&x)?.remove(0);
            acc.add(&map, &mask)
        });
        if let Err(e) = scored {
            // Model-side failures would repeat for every sample.
            if matches!(e, EnsegError::Member { .. } | EnsegError::Shape(_)) {
                return Err(e);
            }
            log::warn!("skipping {}: {e}", samples.id(i));
            failures.push(SampleFailure {
                id: samples.id(i),
                error: e.to_string(),
            });
        }
    }
    let mut out = acc.finish();
    out.failures = failures;
    Ok(out)
}

/// Evaluates several named splits into one report.
pub fn evaluate_splits<T: Scalar, P: Predictor<T> + ?Sized, S: SampleSource + ?Sized>(
    predictor: &P,
    splits: &[(SplitName, &S)],
    class_names: Vec<String>,
    pre: &PreprocessConfig,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let mut out = BTreeMap::new();
    for (name, samples) in splits {
        out.insert(name.as_str().to_string(), evaluate(predictor, *samples, pre, opts)?);
    }
    Ok(MetricsReport {
        model: predictor.name(),
        threshold: opts.threshold,
        aggregation: opts.aggregation,
        class_names,
        splits: out,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableMetric {
    Iou,
    DiceLoss,
    F1,
}

impl TableMetric {
    fn title(self) -> &'static str {
        match self {
            TableMetric::Iou => "IoU",
            TableMetric::DiceLoss => "Dice loss",
            TableMetric::F1 => "F1",
        }
    }

    fn pick(self, s: &SplitMetrics, agg: Aggregation) -> f64 {
        match self {
            TableMetric::Iou => s.thresholded.iou(agg),
            TableMetric::DiceLoss => s.dice_loss,
            TableMetric::F1 => s.thresholded.f1(agg),
        }
    }
}

impl std::str::FromStr for TableMetric {
    type Err = EnsegError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "iou" => Ok(TableMetric::Iou),
            "dice_loss" | "dice" => Ok(TableMetric::DiceLoss),
            "f1" => Ok(TableMetric::F1),
            _ => Err(EnsegError::Config(format!("unknown table metric {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub values: Vec<f64>,
}

/// Models as rows, splits as columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub metric: TableMetric,
    pub splits: Vec<String>,
    pub rows: Vec<TableRow>,
}

fn split_rank(name: &str) -> usize {
    SplitName::ALL
        .iter()
        .position(|s| s.as_str() == name)
        .unwrap_or(SplitName::ALL.len())
}

/// Rows keep the given order. Every report must cover the same splits.
pub fn build_results_table(reports: &[(String, &MetricsReport)], metric: TableMetric) -> Result<ResultsTable> {
    let (_, first) = reports
        .first()
        .ok_or_else(|| EnsegError::TableConsistency("no reports".into()))?;
    let mut splits: Vec<String> = first.splits.keys().cloned().collect();
    splits.sort_by_key(|s| (split_rank(s), s.clone()));
    let mut rows = Vec::with_capacity(reports.len());
    for (model, report) in reports {
        let mut theirs: Vec<&String> = report.splits.keys().collect();
        theirs.sort_by_key(|s| (split_rank(s), (*s).clone()));
        if theirs != splits.iter().collect::<Vec<_>>() {
            return Err(EnsegError::TableConsistency(format!(
                "{model} covers {theirs:?}, expected {splits:?}"
            )));
        }
        rows.push(TableRow {
            model: model.clone(),
            values: splits
                .iter()
                .map(|s| metric.pick(&report.splits[s], report.aggregation))
                .collect(),
        });
    }
    Ok(ResultsTable {
        metric,
        splits,
        rows,
    })
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

impl ResultsTable {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned columns, four decimals.
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.model.chars().count())
            .chain([5])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        let _ = write!(out, "{:<width$}", "Model");
        for s in &self.splits {
            let _ = write!(out, "  {:>8}", capitalize(s));
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<width$}", r.model);
            for v in &r.values {
                let _ = write!(out, "  {v:>8.4}");
            }
            out.push('\n');
        }
        out
    }

    pub fn title(&self) -> &'static str {
        self.metric.title()
    }
}

/// Paints each class id with its table color.
pub fn colorize(mask: &SegmentationMask, classes: &ClassTable) -> RgbImage {
    let colors = classes.colors();
    RgbImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Rgb(colors
            .get(mask.get(x as usize, y as usize) as usize)
            .copied()
            .unwrap_or([0, 0, 0]))
    })
}

/// Input, ground truth and prediction side by side.
pub fn composite(image: &RgbImage, truth: &RgbImage, pred: &RgbImage) -> RgbImage {
    let (w, h) = image.dimensions();
    let mut out = RgbImage::new(3 * w, h);
    for (i, panel) in [image, truth, pred].into_iter().enumerate() {
        out.copy_from(panel, i as u32 * w, 0).expect("panel fits");
    }
    out
}

fn check_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| EnsegError::io(dir, e))?;
    let probe = dir.join(".enseg-write-test");
    fs::write(&probe, b"").map_err(|e| EnsegError::io(dir, e))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

/// Writes `<out_dir>/<id>.png` for every sample, at the preprocessing
/// target size. The directory is checked before any inference runs.
pub fn export_overlays<T: Scalar, P: Predictor<T> + ?Sized, S: SampleSource + ?Sized>(
    predictor: &P,
    samples: &S,
    classes: &ClassTable,
    pre: &PreprocessConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    check_writable(out_dir)?;
    predictor.check_input(pre.target_height, pre.target_width)?;
    let mut written = Vec::with_capacity(samples.len());
    for i in 0..samples.len() {
        let (img, x, mask) = prepare_eval::<T, S>(samples, i, pre)?;
        let map = predictor.predict_batch(&x)?.remove(0);
        let pred = argmax_mask(&map);
        let out = composite(&img, &colorize(&mask, classes), &colorize(&pred, classes));
        let path = out_dir.join(format!("{}.png", samples.id(i)));
        crate::raster::write_rgb_png(&path, &out)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{ClassMetrics, Scores};

    fn report(model: &str, splits: &[(&str, f64)]) -> MetricsReport {
        let s = |iou| SplitMetrics {
            images: 1,
            thresholded: Scores {
                iou_micro: iou,
                iou_macro: iou,
                f1_micro: iou,
                f1_macro: iou,
            },
            argmax: Scores::default(),
            dice_loss: 1.0 - iou,
            per_class: vec![ClassMetrics {
                iou,
                f1: iou,
                dice_loss: 1.0 - iou,
            }],
            failures: vec![],
        };
        MetricsReport {
            model: model.into(),
            threshold: 0.5,
            aggregation: Aggregation::Micro,
            class_names: vec![],
            splits: splits.iter().map(|(n, v)| (n.to_string(), s(*v))).collect(),
        }
    }

    #[test]
    fn table_orders_splits_and_renders_four_decimals() {
        let a = report("EL-4", &[("test", 0.8306), ("train", 0.9), ("valid", 0.85)]);
        let t = build_results_table(&[("EL-4".into(), &a)], TableMetric::Iou).unwrap();
        assert_eq!(t.splits, ["train", "valid", "test"]);
        let text = t.to_text();
        assert!(text.lines().next().unwrap().contains("Train"));
        assert!(text.contains("0.8306"));
        let back: ResultsTable = serde_json::from_str(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn table_rejects_uneven_coverage() {
        let a = report("a", &[("train", 0.5), ("test", 0.5)]);
        let b = report("b", &[("test", 0.5)]);
        assert!(matches!(
            build_results_table(&[("a".into(), &a), ("b".into(), &b)], TableMetric::Iou),
            Err(EnsegError::TableConsistency(_))
        ));
    }

    #[test]
    fn colorize_by_hand() {
        let classes = ClassTable::with_names(&["bg", "fg"]).unwrap();
        let colors = classes.colors();
        let m = SegmentationMask::from_rows(&[&[0, 1], &[1, 0]]);
        let img = colorize(&m, &classes);
        assert_eq!(img.get_pixel(0, 0).0, colors[0]);
        assert_eq!(img.get_pixel(1, 0).0, colors[1]);
        assert_eq!(img.get_pixel(0, 1).0, colors[1]);
        assert_eq!(img.get_pixel(1, 1).0, colors[0]);
    }
}
