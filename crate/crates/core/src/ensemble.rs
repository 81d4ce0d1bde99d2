//! Probability-level fusion of several segmentation models.

use std::fmt;

use enseg_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{EnsegError, Result};
use crate::model::{Architecture, Encoder, ModelSpec, SegModel};
use crate::raster::SegmentationMask;

/// Per-pixel class distribution, stored `[C, H, W]`.
#[derive(Clone, PartialEq)]
pub struct ProbabilityMap<T: Scalar> {
    tensor: Tensor<T>,
}

impl<T: Scalar> fmt::Debug for ProbabilityMap<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProbabilityMap")
            .field("shape", &self.tensor.shape())
            .finish()
    }
}

impl<T: Scalar> ProbabilityMap<T> {
    /// Wraps a `[C, H, W]` tensor. Normalization is not checked here; see
    /// [`ProbabilityMap::max_normalization_error`].
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.rank() != 3 || tensor.shape()[0] == 0 {
            return Err(EnsegError::Shape(format!(
                "probability map must be [C, H, W], got {:?}",
                tensor.shape()
            )));
        }
        Ok(ProbabilityMap { tensor })
    }

    pub fn from_vec(classes: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        Self::new(Tensor::from_vec(&[classes, height, width], data)?)
    }

    /// Splits a `[N, C, H, W]` batch into per-image maps.
    pub fn from_batch(batch: &Tensor<T>) -> Result<Vec<Self>> {
        if batch.rank() != 4 {
            return Err(EnsegError::Shape(format!(
                "expected [N, C, H, W], got {:?}",
                batch.shape()
            )));
        }
        let (n, c, h, w) = batch.dims4();
        let per = c * h * w;
        (0..n)
            .map(|i| Self::from_vec(c, h, w, batch.data()[i * per..(i + 1) * per].to_vec()))
            .collect()
    }

    /// One-hot encoding of a label mask.
    pub fn one_hot(mask: &SegmentationMask, classes: usize) -> Result<Self> {
        let hw = mask.width() * mask.height();
        let mut data = vec![T::zero(); classes * hw];
        for (p, &l) in mask.data().iter().enumerate() {
            if l as usize >= classes {
                return Err(EnsegError::Shape(format!("label {l} with {classes} classes")));
            }
            data[l as usize * hw + p] = T::one();
        }
        Self::from_vec(classes, mask.height(), mask.width(), data)
    }

    pub fn num_classes(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn get(&self, class: usize, y: usize, x: usize) -> T {
        self.tensor.data()[(class * self.height() + y) * self.width() + x]
    }

    /// Plane of class `c`, row-major.
    pub fn plane(&self, class: usize) -> &[T] {
        let hw = self.height() * self.width();
        &self.tensor.data()[class * hw..(class + 1) * hw]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.tensor.same_shape(&other.tensor)
    }

    /// Largest `|sum_c p - 1|` over pixels, or infinity if any entry is
    /// negative or non-finite.
    pub fn max_normalization_error(&self) -> f64 {
        let hw = self.height() * self.width();
        let d = self.tensor.data();
        let mut worst = 0.0f64;
        for p in 0..hw {
            let mut s = 0.0f64;
            for c in 0..self.num_classes() {
                let v = d[c * hw + p].to_f64().unwrap_or(f64::NAN);
                if !(v >= 0.0) || !v.is_finite() {
                    return f64::INFINITY;
                }
                s += v;
            }
            worst = worst.max((s - 1.0).abs());
        }
        worst
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    #[default]
    WeightedAverage,
    ElementwiseSum,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSpec {
    #[serde(default)]
    pub method: FusionMethod,
    /// One positive weight per member; `None` means equal weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl FusionSpec {
    pub fn weighted(weights: Vec<f64>) -> Self {
        FusionSpec {
            method: FusionMethod::WeightedAverage,
            weights: Some(weights),
        }
    }

    pub fn elementwise_sum() -> Self {
        FusionSpec {
            method: FusionMethod::ElementwiseSum,
            weights: None,
        }
    }

    pub fn validate(&self, members: usize) -> Result<()> {
        if members == 0 {
            return Err(EnsegError::Config("nothing to fuse".into()));
        }
        let Some(w) = &self.weights else {
            return Ok(());
        };
        if self.method == FusionMethod::ElementwiseSum {
            return Err(EnsegError::Config(
                "weights only apply to weighted_average fusion".into(),
            ));
        }
        if w.len() != members {
            return Err(EnsegError::Config(format!(
                "{} fusion weights for {members} members",
                w.len()
            )));
        }
        if let Some(bad) = w.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(EnsegError::Config(format!(
                "fusion weights must be positive and finite, got {bad}"
            )));
        }
        Ok(())
    }

    fn coefficients(&self, members: usize) -> Vec<f64> {
        match (&self.method, &self.weights) {
            (FusionMethod::WeightedAverage, Some(w)) => {
                let total = sorted_sum(w.clone());
                w.iter().map(|v| v / total).collect()
            }
            _ => vec![1.0 / members as f64; members],
        }
    }
}

/// Sum in ascending order, so the result does not depend on input order.
fn sorted_sum<T: Scalar>(mut v: Vec<T>) -> T {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    v.into_iter().fold(T::zero(), |acc, x| acc + x)
}

/// Combines member maps into one distribution.
pub fn fuse<T: Scalar>(maps: &[ProbabilityMap<T>], spec: &FusionSpec) -> Result<ProbabilityMap<T>> {
    spec.validate(maps.len())?;
    let first = &maps[0];
    if let Some((i, m)) = maps.iter().enumerate().find(|(_, m)| !m.same_shape(first)) {
        return Err(EnsegError::FusionShape(format!(
            "map {i} is {:?}, map 0 is {:?}",
            m.tensor.shape(),
            first.tensor.shape()
        )));
    }
    let coef: Vec<T> = spec
        .coefficients(maps.len())
        .into_iter()
        .map(|c| T::from_f64(c).expect("finite"))
        .collect();
    let mut terms = Vec::with_capacity(maps.len());
    let out = Tensor::from_fn(first.tensor.shape(), |i| {
        terms.clear();
        terms.extend(maps.iter().zip(&coef).map(|(m, &c)| c * m.tensor.data()[i]));
        terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        terms.iter().fold(T::zero(), |acc, &x| acc + x)
    });
    ProbabilityMap::new(out)
}

/// Most probable class per pixel; ties go to the lower class index.
pub fn argmax_mask<T: Scalar>(map: &ProbabilityMap<T>) -> SegmentationMask {
    let (h, w) = (map.height(), map.width());
    let hw = h * w;
    let d = map.tensor.data();
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..map.num_classes() {
                if d[c * hw + p] > d[best * hw + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    SegmentationMask::new(w, h, labels).expect("sized from map")
}

/// Several models whose softmax outputs are fused pixel by pixel.
#[derive(Clone)]
pub struct EnsembleModel<T: Scalar> {
    members: Vec<SegModel<T>>,
    fusion: FusionSpec,
    variant_name: String,
}

/// `EL-k` when all members share EfficientNet-Bk, otherwise `EL-custom`.
pub fn variant_name(specs: &[&ModelSpec]) -> String {
    match specs {
        [a, b]
            if a.encoder == b.encoder
                && a.architecture == Architecture::Unet
                && b.architecture == Architecture::Fpn =>
        {
            format!("EL-{}", a.encoder.index())
        }
        _ => "EL-custom".to_string(),
    }
}

/// The default pairing: U-Net and FPN over the same encoder.
pub fn default_member_specs(encoder: Encoder, num_classes: usize) -> Vec<ModelSpec> {
    [Architecture::Unet, Architecture::Fpn]
        .into_iter()
        .map(|a| ModelSpec::new(a, encoder, num_classes))
        .collect()
}

impl<T: Scalar> EnsembleModel<T> {
    pub fn new(members: Vec<SegModel<T>>, fusion: FusionSpec) -> Result<Self> {
        if members.len() < 2 {
            return Err(EnsegError::Config(format!(
                "an ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        fusion.validate(members.len())?;
        let classes = members[0].spec().num_classes;
        if let Some((i, m)) = members
            .iter()
            .enumerate()
            .find(|(_, m)| m.spec().num_classes != classes)
        {
            return Err(EnsegError::Config(format!(
                "member {i} has {} classes, member 0 has {classes}",
                m.spec().num_classes
            )));
        }
        let specs: Vec<&ModelSpec> = members.iter().map(|m| m.spec()).collect();
        let variant_name = variant_name(&specs);
        Ok(EnsembleModel {
            members,
            fusion,
            variant_name,
        })
    }

    pub fn members(&self) -> &[SegModel<T>] {
        &self.members
    }

    pub fn fusion(&self) -> &FusionSpec {
        &self.fusion
    }

    pub fn variant_name(&self) -> &str {
        &self.variant_name
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].spec().num_classes
    }

    /// Every member must accept the size.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        for (i, m) in self.members.iter().enumerate() {
            m.spec().check_input(height, width).map_err(|e| e.in_member(i))?;
        }
        Ok(())
    }

    /// Fused maps for a `[N, 3, H, W]` batch. Members run one after another;
    /// each is deterministic in inference mode, so the order does not matter.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<ProbabilityMap<T>>> {
        let per_member = self
            .members
            .iter()
            .enumerate()
            .map(|(i, m)| {
                m.predict(x)
                    .and_then(|y| ProbabilityMap::from_batch(&y))
                    .map_err(|e| e.in_member(i))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = per_member[0].len();
        (0..n)
            .map(|k| {
                let maps: Vec<ProbabilityMap<T>> =
                    per_member.iter().map(|m| m[k].clone()).collect();
                fuse(&maps, &self.fusion)
            })
            .collect()
    }
}

/// Free-function form of [`EnsembleModel::predict`] for a single `[3, H, W]`
/// or `[1, 3, H, W]` image.
pub fn predict_ensemble<T: Scalar>(
    ensemble: &EnsembleModel<T>,
    image: &Tensor<T>,
) -> Result<ProbabilityMap<T>> {
    let x = match image.rank() {
        3 => image.reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?,
        4 if image.shape()[0] == 1 => image.clone(),
        _ => {
            return Err(EnsegError::Shape(format!(
                "expected one image, got {:?}",
                image.shape()
            )))
        }
    };
    Ok(ensemble.predict(&x)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(c: usize, h: usize, w: usize, data: &[f64]) -> ProbabilityMap<f64> {
        ProbabilityMap::from_vec(c, h, w, data.to_vec()).unwrap()
    }

    #[test]
    fn single_pixel_average() {
        let a = map(2, 1, 1, &[0.2, 0.8]);
        let b = map(2, 1, 1, &[0.6, 0.4]);
        let f = fuse(&[a, b], &FusionSpec::default()).unwrap();
        assert!((f.get(0, 0, 0) - 0.4).abs() < 1e-15);
        assert!((f.get(1, 0, 0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn weights_are_validated() {
        let a = map(2, 1, 1, &[0.2, 0.8]);
        let maps = [a.clone(), a];
        for bad in [vec![1.0, 0.0], vec![1.0], vec![1.0, -2.0], vec![f64::NAN, 1.0]] {
            assert!(matches!(
                fuse(&maps, &FusionSpec::weighted(bad)),
                Err(EnsegError::Config(_))
            ));
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = map(2, 1, 1, &[0.2, 0.8]);
        let b = map(2, 1, 2, &[0.2, 0.8, 0.5, 0.5]);
        assert!(matches!(
            fuse(&[a, b], &FusionSpec::default()),
            Err(EnsegError::FusionShape(_))
        ));
    }

    #[test]
    fn argmax_by_hand() {
        assert_eq!(argmax_mask(&map(3, 1, 1, &[0.1, 0.7, 0.2])).data(), &[1]);
        assert_eq!(argmax_mask(&map(2, 1, 1, &[0.5, 0.5])).data(), &[0]);
        // 2x2, classes planes: pixel order (0,0) (1,0) (0,1) (1,1)
        let m = map(
            3,
            2,
            2,
            &[
                0.6, 0.1, 0.3, 0.4, //
                0.3, 0.8, 0.3, 0.2, //
                0.1, 0.1, 0.4, 0.4,
            ],
        );
        assert_eq!(argmax_mask(&m).data(), &[0, 1, 2, 0]);
    }

    #[test]
    fn variant_names() {
        let a = ModelSpec::new(Architecture::Unet, Encoder::EfficientNetB3, 3);
        let b = ModelSpec::new(Architecture::Fpn, Encoder::EfficientNetB3, 3);
        let c = ModelSpec::new(Architecture::Fpn, Encoder::EfficientNetB0, 3);
        assert_eq!(variant_name(&[&a, &b]), "EL-3");
        assert_eq!(variant_name(&[&a, &c]), "EL-custom");
        assert_eq!(variant_name(&[&a, &a]), "EL-custom");
    }
}
