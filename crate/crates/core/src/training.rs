//! Supervised training with Adam on the soft Dice loss, per-epoch validation
//! and best-checkpoint selection.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use enseg_tensor::{apply_buffer_updates, Adam, Forward, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_sample, LoadedSample, Sample};
use crate::ensemble::ProbabilityMap;
use crate::error::{EnsegError, Result};
use crate::metrics::{confusion_thresholded, Aggregation, ClassConfusion, DEFAULT_SMOOTH, DEFAULT_THRESHOLD};
use crate::model::{build_model, ModelSpec, SegModel};
use crate::preprocess::{prepare, PreprocessConfig};
use crate::raster::LabelMask;

/// Consecutive non-finite batch losses tolerated before giving up.
const DIVERGENCE_PATIENCE: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMetric {
    #[default]
    IouValid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub train_batch_size: usize,
    pub valid_batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle_train: bool,
    /// Artifacts go to `<checkpoint_dir>/<run_name>/`; nothing is written
    /// when unset.
    pub checkpoint_dir: Option<PathBuf>,
    pub run_name: String,
    /// Write `epoch_<k>.ckpt` for every epoch, not just `best.ckpt`.
    pub keep_epoch_checkpoints: bool,
    /// Re-estimate batch-norm statistics over the training set before each
    /// validation pass. See [`recalibrate_batch_norm`].
    pub recalibrate_bn: bool,
    pub select_metric: SelectMetric,
    pub threshold: f64,
    pub smooth: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            train_batch_size: 8,
            valid_batch_size: 1,
            epochs: 40,
            seed: 0,
            shuffle_train: false,
            checkpoint_dir: None,
            run_name: "run".into(),
            keep_epoch_checkpoints: true,
            recalibrate_bn: false,
            select_metric: SelectMetric::IouValid,
            threshold: DEFAULT_THRESHOLD,
            smooth: DEFAULT_SMOOTH,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EnsegError::Config(m));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if self.train_batch_size == 0 || self.valid_batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must be in (0, 1), got {}", self.threshold));
        }
        if !(self.smooth >= 0.0) {
            return bad(format!("smooth must be >= 0, got {}", self.smooth));
        }
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return bad(format!("run_name {:?} must be a plain directory name", self.run_name));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> Option<PathBuf> {
        self.checkpoint_dir.as_ref().map(|d| d.join(&self.run_name))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_dice_loss: f64,
    pub train_iou: f64,
    pub valid_dice_loss: f64,
    pub valid_iou: f64,
    pub wall_seconds: f64,
}

/// Anything that can hand out decoded samples by index.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<LoadedSample>;
    /// Identifier used in diagnostics, available without loading.
    fn id(&self, index: usize) -> String;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [LoadedSample] {
    fn len(&self) -> usize {
        <[LoadedSample]>::len(self)
    }

    fn load(&self, index: usize) -> Result<LoadedSample> {
        Ok(self[index].clone())
    }

    fn id(&self, index: usize) -> String {
        self[index].id.clone()
    }
}

/// Reads from disk on every access.
impl SampleSource for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn load(&self, index: usize) -> Result<LoadedSample> {
        load_sample(&self[index])
    }

    fn id(&self, index: usize) -> String {
        self[index].id.clone()
    }
}

/// Splits `0..n` into batches of `batch_size`; the last may be short.
/// Without `shuffle` the order is the input order.
pub fn make_batches(n: usize, batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(EnsegError::EmptyDataset("no samples to batch".into()));
    }
    if batch_size == 0 {
        return Err(EnsegError::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacks prepared images into `[N, 3, H, W]`.
pub fn stack_images<T: Scalar>(images: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| EnsegError::EmptyDataset("empty batch".into()))?;
    let s = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for t in images {
        if t.shape() != s.as_slice() {
            return Err(EnsegError::Shape(format!(
                "batch mixes shapes {s:?} and {:?}",
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![images.len()];
    shape.extend(s);
    Ok(Tensor::from_vec(&shape, data)?)
}

/// One-hot `[N, C, H, W]` target for a batch of masks.
pub fn one_hot_batch<T: Scalar>(masks: &[LabelMask], classes: usize) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    for m in masks {
        data.extend(ProbabilityMap::<T>::one_hot(m, classes)?.into_tensor().into_vec());
    }
    let (h, w) = masks.first().map_or((0, 0), |m| (m.height(), m.width()));
    Ok(Tensor::from_vec(&[masks.len(), classes, h, w], data)?)
}

fn prepare_batch<T: Scalar, S: SampleSource + ?Sized>(
    source: &S,
    indices: &[usize],
    pre: &PreprocessConfig,
    epoch: Option<usize>,
    classes: usize,
) -> Result<(Tensor<T>, Vec<LabelMask>)> {
    let mut images = Vec::with_capacity(indices.len());
    let mut masks = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = source.load(i)?;
        if let Some(l) = s.mask.max_label().filter(|&l| l as usize >= classes) {
            return Err(EnsegError::LabelRange {
                file: PathBuf::from(&s.id),
                value: l,
                classes,
            });
        }
        let mut rng = match (epoch, &pre.augment) {
            (Some(e), Some(spec)) => Some(spec.rng_for(e, i)),
            _ => None,
        };
        let (x, m) = prepare::<T>(&s.image, &s.mask, pre, rng.as_mut())?;
        images.push(x);
        masks.push(m);
    }
    Ok((stack_images(&images)?, masks))
}

fn mix_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 32) ^ batch as u64
}

/// Trained model plus its history.
pub struct TrainOutcome<T: Scalar> {
    /// Parameters from the epoch with the highest validation IoU.
    pub best: SegModel<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub run_dir: Option<PathBuf>,
}

struct EpochTotals {
    loss_sum: f64,
    batches: usize,
    confusion: ClassConfusion,
}

impl EpochTotals {
    fn new(classes: usize) -> Self {
        EpochTotals {
            loss_sum: 0.0,
            batches: 0,
            confusion: ClassConfusion::new(classes),
        }
    }

    fn add<T: Scalar>(&mut self, loss: f64, probs: &Tensor<T>, masks: &[LabelMask], threshold: f64) -> Result<()> {
        self.loss_sum += loss;
        self.batches += 1;
        for (map, mask) in ProbabilityMap::from_batch(probs)?.iter().zip(masks) {
            self.confusion.merge(&confusion_thresholded(map, mask, threshold)?);
        }
        Ok(())
    }

    fn mean_loss(&self) -> f64 {
        self.loss_sum / self.batches.max(1) as f64
    }

    fn iou(&self) -> f64 {
        self.confusion.iou(Aggregation::Micro)
    }
}

/// Validation pass in inference mode: mean batch loss and micro IoU.
pub fn validate<T: Scalar, V: SampleSource + ?Sized>(
    model: &SegModel<T>,
    valid: &V,
    pre: &PreprocessConfig,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let classes = model.spec().num_classes;
    let mut totals = EpochTotals::new(classes);
    for batch in make_batches(valid.len(), cfg.valid_batch_size, false, 0)? {
        let (x, masks) = prepare_batch::<T, _>(valid, &batch, pre, None, classes)?;
        let probs = model.predict(&x)?;
        let target = one_hot_batch::<T>(&masks, classes)?;
        let (num, den) = enseg_tensor::dice_terms(&probs, &target, cfg.smooth);
        totals.add(1.0 - num / den, &probs, &masks, cfg.threshold)?;
    }
    Ok((totals.mean_loss(), totals.iou()))
}

/// Sets every batch-norm running mean and variance to the average of the
/// batch statistics over one pass through `samples`, without augmentation
/// or gradients.
///
/// From random initialization the exponential running averages lag far
/// behind the batch statistics in deep encoders, and inference-mode
/// activations shrink layer by layer. Decoders that renormalize per sample
/// (FPN's group norm) then amplify what is left into saturated outputs.
pub fn recalibrate_batch_norm<T: Scalar, S: SampleSource + ?Sized>(
    model: &mut SegModel<T>,
    samples: &S,
    pre: &PreprocessConfig,
    batch_size: usize,
) -> Result<()> {
    let classes = model.spec().num_classes;
    for (k, batch) in make_batches(samples.len(), batch_size, false, 0)?.iter().enumerate() {
        let (x, _) = prepare_batch::<T, _>(samples, batch, pre, None, classes)?;
        let mut fx = Forward::new(model.params(), true, false, k as u64).with_bn_momentum(1.0 / (k + 1) as f64);
        let xv = fx.graph.constant(x);
        model.forward(&mut fx, xv)?;
        let (_, updates) = fx.finish();
        apply_buffer_updates(model.params_mut(), updates);
    }
    Ok(())
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> EnsegError + '_ {
    move |e| EnsegError::io(path, e)
}

/// Trains `model` for `cfg.epochs` epochs. Train IoU is accumulated from the
/// training forward passes themselves, so it reflects augmented inputs and
/// batch statistics.
pub fn train<T: Scalar, S: SampleSource + ?Sized, V: SampleSource + ?Sized>(
    mut model: SegModel<T>,
    train_set: &S,
    valid_set: &V,
    cfg: &TrainConfig,
    pre: &PreprocessConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    pre.validate()?;
    if train_set.is_empty() {
        return Err(EnsegError::EmptyDataset("training split is empty".into()));
    }
    if valid_set.is_empty() {
        return Err(EnsegError::EmptyDataset(
            "validation split is empty; best-checkpoint selection needs it".into(),
        ));
    }
    model.spec().check_input(pre.target_height, pre.target_width)?;
    let classes = model.spec().num_classes;

    let run_dir = cfg.run_dir();
    let mut history_file = match &run_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(write_err(dir))?;
            let p = dir.join("history.jsonl");
            Some((File::create(&p).map_err(write_err(&p))?, p))
        }
        None => None,
    };

    let mut adam = Adam::<T>::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, SegModel<T>)> = None;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let batches = make_batches(
            train_set.len(),
            cfg.train_batch_size,
            cfg.shuffle_train,
            mix_seed(cfg.seed, epoch, usize::MAX),
        )?;
        let mut totals = EpochTotals::new(classes);
        let mut bad_run = 0;
        for (bi, batch) in batches.iter().enumerate() {
            let (x, masks) = prepare_batch::<T, _>(train_set, batch, pre, Some(epoch), classes)?;
            let target = one_hot_batch::<T>(&masks, classes)?;
            let mut fx = Forward::new(model.params(), true, true, mix_seed(cfg.seed, epoch, bi));
            let xv = fx.graph.constant(x);
            let y = model.forward(&mut fx, xv)?;
            let loss = fx.graph.dice_loss(y, target, cfg.smooth);
            let (graph, updates) = fx.finish();
            let loss_value = graph.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
            if !loss_value.is_finite() {
                bad_run += 1;
                log::warn!("epoch {epoch} batch {bi}: non-finite loss");
                if bad_run >= DIVERGENCE_PATIENCE {
                    return Err(EnsegError::Divergence { epoch, batch: bi });
                }
                continue;
            }
            bad_run = 0;
            let grads = graph.backward(loss);
            totals.add(loss_value, graph.value(y), &masks, cfg.threshold)?;
            drop(graph);
            adam.step(model.params_mut(), grads.params());
            apply_buffer_updates(model.params_mut(), updates);
        }

        if cfg.recalibrate_bn {
            recalibrate_batch_norm(&mut model, train_set, pre, cfg.train_batch_size)?;
        }
        let (valid_dice_loss, valid_iou) = validate(&model, valid_set, pre, cfg)?;
        let record = EpochRecord {
            epoch,
            train_dice_loss: totals.mean_loss(),
            train_iou: totals.iou(),
            valid_dice_loss,
            valid_iou,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {epoch}/{}: train loss {:.4} iou {:.4}, valid loss {:.4} iou {:.4}",
            model.spec().label(),
            cfg.epochs,
            record.train_dice_loss,
            record.train_iou,
            record.valid_dice_loss,
            record.valid_iou
        );

        let improved = best.as_ref().is_none_or(|(v, _, _)| valid_iou > *v);
        if let Some(dir) = &run_dir {
            if cfg.keep_epoch_checkpoints {
                model.save(&dir.join(format!("epoch_{epoch}.ckpt")))?;
            }
            if improved {
                model.save(&dir.join("best.ckpt"))?;
            }
        }
        if improved {
            best = Some((valid_iou, epoch, model.clone()));
        }
        if let Some((f, p)) = &mut history_file {
            let line = serde_json::to_string(&record)?;
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(write_err(p))?;
        }
        history.push(record);
    }

    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
        run_dir,
    })
}

/// Trains each spec independently with the same config and data order.
/// Member `i` writes under `<run_name>/<architecture>-<encoder>`.
pub fn train_ensemble_members<T: Scalar, S: SampleSource + ?Sized, V: SampleSource + ?Sized>(
    specs: &[ModelSpec],
    train_set: &S,
    valid_set: &V,
    cfg: &TrainConfig,
    pre: &PreprocessConfig,
) -> Result<Vec<TrainOutcome<T>>> {
    if let Some(first) = specs.first() {
        if let Some((i, s)) = specs
            .iter()
            .enumerate()
            .find(|(_, s)| s.num_classes != first.num_classes)
        {
            return Err(EnsegError::Config(format!(
                "member {i} has {} classes, member 0 has {}",
                s.num_classes, first.num_classes
            )));
        }
    }
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut member_cfg = cfg.clone();
            if specs.len() > 1 {
                member_cfg.checkpoint_dir = cfg.run_dir();
                member_cfg.run_name = format!("{}-{}", spec.architecture, spec.encoder);
            }
            build_model::<T>(spec, cfg.seed)
                .and_then(|m| train(m, train_set, valid_set, &member_cfg, pre))
                .map_err(|e| e.in_member(i))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_counts() {
        assert_eq!(make_batches(3008, 8, false, 0).unwrap().len(), 376);
        let b = make_batches(10, 8, false, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [8, 2]);
        assert_eq!(b.concat(), (0..10).collect::<Vec<_>>());
        assert!(matches!(make_batches(0, 8, false, 0), Err(EnsegError::EmptyDataset(_))));
    }

    #[test]
    fn shuffled_batches_are_a_seeded_permutation() {
        let a = make_batches(20, 3, true, 5).unwrap().concat();
        let b = make_batches(20, 3, true, 5).unwrap().concat();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_ne!(a, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn config_rejects_zero_batch() {
        let cfg = TrainConfig {
            train_batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(EnsegError::Config(_))));
    }
}
