//! Dataset discovery, validation, splitting and channel statistics.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EnsegError, Result};
use crate::raster::{self, LabelMask};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: usize,
    pub name: String,
    pub color: [u8; 3],
}

/// Class ids `0..C`, with background at 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ClassTable {
    entries: Vec<ClassEntry>,
}

impl ClassTable {
    /// Validates and sorts `entries` by id.
    pub fn new(mut entries: Vec<ClassEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.id);
        if entries.len() < 2 {
            return Err(EnsegError::Config(format!(
                "class table needs at least 2 classes, got {}",
                entries.len()
            )));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.id != i {
                return Err(EnsegError::Config(format!(
                    "class ids must be contiguous from 0 without duplicates; found id {} at position {i}",
                    e.id
                )));
            }
        }
        if entries[0].name != "background" {
            return Err(EnsegError::Config(format!(
                "class 0 must be named \"background\", found {:?}",
                entries[0].name
            )));
        }
        if entries.len() > 256 {
            return Err(EnsegError::Config("at most 256 classes fit an 8-bit mask".into()));
        }
        Ok(ClassTable { entries })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<ClassEntry> = serde_json::from_str(text)?;
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EnsegError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            EnsegError::Json(j) => EnsegError::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    /// Background plus `names`, coloured from a fixed palette.
    pub fn with_names(names: &[&str]) -> Result<Self> {
        const PALETTE: [[u8; 3]; 8] = [
            [0, 0, 0],
            [230, 25, 75],
            [60, 180, 75],
            [255, 225, 25],
            [0, 130, 200],
            [245, 130, 48],
            [145, 30, 180],
            [70, 240, 240],
        ];
        let entries = std::iter::once("background")
            .chain(names.iter().copied())
            .enumerate()
            .map(|(id, name)| ClassEntry {
                id,
                name: name.to_string(),
                color: PALETTE[id % PALETTE.len()],
            })
            .collect();
        Self::new(entries)
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn colors(&self) -> Vec<[u8; 3]> {
        self.entries.iter().map(|e| e.color).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }
}

impl<'de> Deserialize<'de> for ClassTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let entries = Vec::<ClassEntry>::deserialize(d)?;
        ClassTable::new(entries).map_err(serde::de::Error::custom)
    }
}

/// One image/mask pair on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Valid, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = EnsegError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(SplitName::Train),
            "valid" | "val" | "validation" => Ok(SplitName::Valid),
            "test" => Ok(SplitName::Test),
            _ => Err(EnsegError::Config(format!("unknown split {s:?}"))),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl DatasetSplit {
    pub fn part(&self, name: SplitName) -> &[Sample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.valid.len(), self.test.len())
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| EnsegError::io(dir, e))? {
        let path = entry.map_err(|e| EnsegError::io(dir, e))?.path();
        if path.is_file() {
            out.push(path);
        }
    }
    Ok(out)
}

fn stem_and_ext(path: &Path) -> Option<(String, String)> {
    let stem = path.file_stem()?.to_str()?.to_string();
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    Some((stem, ext))
}

/// Discovers `root/images/<id>.<jpg|jpeg|png>` paired with `root/masks/<id>.png`
/// and validates every pair: matching dimensions and labels below the class count.
pub fn load_dataset(root: &Path, classes: &ClassTable) -> Result<Vec<Sample>> {
    if !root.is_dir() {
        return Err(EnsegError::DatasetNotFound(root.to_path_buf()));
    }
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    for d in [&img_dir, &mask_dir] {
        if !d.is_dir() {
            return Err(EnsegError::Layout(format!("missing directory {}", d.display())));
        }
    }

    let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
    for path in list_files(&img_dir)? {
        let Some((stem, ext)) = stem_and_ext(&path) else { continue };
        if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        if let Some(prev) = images.insert(stem.clone(), path.clone()) {
            return Err(EnsegError::Pairing(format!(
                "id {stem:?} has two images: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    let mut masks: BTreeMap<String, PathBuf> = BTreeMap::new();
    for path in list_files(&mask_dir)? {
        if let Some((stem, ext)) = stem_and_ext(&path) {
            if ext == "png" {
                masks.insert(stem, path);
            }
        }
    }

    if let Some(orphan) = images.keys().find(|k| !masks.contains_key(*k)) {
        return Err(EnsegError::Pairing(format!(
            "image {} has no mask {}",
            images[orphan].display(),
            mask_dir.join(format!("{orphan}.png")).display()
        )));
    }
    if let Some(orphan) = masks.keys().find(|k| !images.contains_key(*k)) {
        return Err(EnsegError::Pairing(format!(
            "mask {} has no image",
            masks[orphan].display()
        )));
    }

    let mut samples = Vec::with_capacity(images.len());
    for (id, image_path) in images {
        let mask_path = masks.remove(&id).expect("paired above");
        let mask = raster::read_mask(&mask_path)?;
        check_labels(&mask, &mask_path, classes.num_classes())?;
        let (w, h) = raster::image_dimensions(&image_path)?;
        if (w, h) != (mask.width(), mask.height()) {
            return Err(EnsegError::Pairing(format!(
                "{} is {w}x{h} but its mask is {}x{}",
                image_path.display(),
                mask.width(),
                mask.height()
            )));
        }
        samples.push(Sample {
            id,
            image_path,
            mask_path,
        });
    }
    Ok(samples)
}

fn check_labels(mask: &LabelMask, path: &Path, classes: usize) -> Result<()> {
    match mask.max_label() {
        Some(v) if v as usize >= classes => Err(EnsegError::LabelRange {
            file: path.to_path_buf(),
            value: v,
            classes,
        }),
        _ => Ok(()),
    }
}

/// Loads the on-disk `train/`, `valid/` and `test/` partitions as they are.
pub fn load_predefined_split(root: &Path, classes: &ClassTable) -> Result<DatasetSplit> {
    if !root.is_dir() {
        return Err(EnsegError::DatasetNotFound(root.to_path_buf()));
    }
    let mut parts = Vec::with_capacity(3);
    for name in SplitName::ALL {
        let dir = root.join(name.as_str());
        if !dir.is_dir() {
            return Err(EnsegError::Layout(format!("missing split directory {}", dir.display())));
        }
        let samples = load_dataset(&dir, classes)?;
        if samples.is_empty() {
            log::warn!("split {name} at {} is empty", dir.display());
        }
        parts.push(samples);
    }
    let test = parts.pop().unwrap_or_default();
    let valid = parts.pop().unwrap_or_default();
    let train = parts.pop().unwrap_or_default();
    Ok(DatasetSplit { train, valid, test })
}

/// Split sizes for `n` samples: `floor(n * r)` for valid and test, the
/// remainder to train, and each split kept non-empty.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<(usize, usize, usize)> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(EnsegError::Config(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    if n < 3 {
        return Err(EnsegError::EmptyDataset(format!(
            "{n} samples cannot populate train, valid and test"
        )));
    }
    // The epsilon keeps products like 100 * 0.67 = 66.999... from losing a sample.
    let part = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let mut valid = part(ratios[1]).max(1);
    let mut test = part(ratios[2]).max(1);
    while valid + test > n - 1 {
        if valid >= test && valid > 1 {
            valid -= 1;
        } else {
            test -= 1;
        }
    }
    Ok((n - valid - test, valid, test))
}

/// Seeded shuffle followed by [`split_sizes`] partitioning.
pub fn split_dataset(samples: &[Sample], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    let (n_train, n_valid, _) = split_sizes(samples.len(), ratios)?;
    let mut ids: HashSet<&str> = HashSet::new();
    if let Some(dup) = samples.iter().find(|s| !ids.insert(&s.id)) {
        return Err(EnsegError::Pairing(format!("duplicate sample id {:?}", dup.id)));
    }
    let mut order: Vec<Sample> = samples.to_vec();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(n_train + n_valid);
    let valid = order.split_off(n_train);
    Ok(DatasetSplit {
        train: order,
        valid,
        test,
    })
}

/// Per-channel mean and population standard deviation of pixel values
/// scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub pixel_count: u64,
}

/// Integer channel sums, exact and order-independent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ChannelSums {
    pub count: u64,
    pub sum: [u64; 3],
    pub sum_sq: [u64; 3],
}

impl ChannelSums {
    pub fn add_image(&mut self, img: &RgbImage) {
        for p in img.pixels() {
            for c in 0..3 {
                let v = p.0[c] as u64;
                self.sum[c] += v;
                self.sum_sq[c] += v * v;
            }
        }
        self.count += img.width() as u64 * img.height() as u64;
    }

    pub fn finish(&self) -> Result<ChannelStats> {
        if self.count == 0 {
            return Err(EnsegError::EmptyDataset("no pixels to compute statistics from".into()));
        }
        let n = self.count as u128;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            let (s, ss) = (self.sum[c] as u128, self.sum_sq[c] as u128);
            // n^2 * var, exact in integers
            let scaled_var = n * ss - s * s;
            if scaled_var == 0 {
                return Err(EnsegError::ZeroVariance { channel: c });
            }
            mean[c] = s as f64 / n as f64 / 255.0;
            std[c] = (scaled_var as f64).sqrt() / n as f64 / 255.0;
        }
        Ok(ChannelStats {
            mean,
            std,
            pixel_count: self.count,
        })
    }
}

pub fn compute_channel_stats(samples: &[Sample]) -> Result<ChannelStats> {
    if samples.is_empty() {
        return Err(EnsegError::EmptyDataset("no samples to compute statistics from".into()));
    }
    let mut sums = ChannelSums::default();
    for s in samples {
        sums.add_image(&raster::read_rgb(&s.image_path)?);
    }
    sums.finish()
}

/// A sample decoded into memory.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub image: RgbImage,
    pub mask: LabelMask,
}

pub fn load_sample(s: &Sample) -> Result<LoadedSample> {
    let image = raster::read_rgb(&s.image_path)?;
    let mask = raster::read_mask(&s.mask_path)?;
    if (image.width() as usize, image.height() as usize) != (mask.width(), mask.height()) {
        return Err(EnsegError::Pairing(format!(
            "{} and {} differ in size",
            s.image_path.display(),
            s.mask_path.display()
        )));
    }
    Ok(LoadedSample {
        id: s.id.clone(),
        image,
        mask,
    })
}

pub fn load_samples(samples: &[Sample]) -> Result<Vec<LoadedSample>> {
    samples.iter().map(load_sample).collect()
}

/// Writes samples in the `images/` + `masks/` layout under `root`.
pub fn write_dataset(root: &Path, samples: &[LoadedSample], classes: &ClassTable) -> Result<Vec<Sample>> {
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| EnsegError::io(d, e))?;
    }
    let colors = classes.colors();
    samples
        .iter()
        .map(|s| {
            let image_path = img_dir.join(format!("{}.png", s.id));
            let mask_path = mask_dir.join(format!("{}.png", s.id));
            raster::write_rgb_png(&image_path, &s.image)?;
            raster::write_mask_png(&mask_path, &s.mask, &colors)?;
            Ok(Sample {
                id: s.id.clone(),
                image_path,
                mask_path,
            })
        })
        .collect()
}
