//! Ensemble semantic segmentation: EfficientNet-backed encoder-decoder
//! models, probability-map fusion, metrics, training and evaluation.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod raster;
pub mod synthetic;
pub mod training;

pub use enseg_tensor::{Scalar, Tensor};
pub use ensemble::{argmax_mask, fuse, predict_ensemble, EnsembleModel, FusionMethod, FusionSpec, ProbabilityMap};
pub use error::{EnsegError, Result};
pub use model::{build_model, Architecture, Encoder, ModelSpec, SegModel};
pub use raster::{LabelMask, SegmentationMask};

pub type SegModel32 = SegModel<f32>;
pub type SegModel64 = SegModel<f64>;
pub type EnsembleModel32 = EnsembleModel<f32>;
pub type EnsembleModel64 = EnsembleModel<f64>;
pub type ProbabilityMap32 = ProbabilityMap<f32>;
pub type ProbabilityMap64 = ProbabilityMap<f64>;
