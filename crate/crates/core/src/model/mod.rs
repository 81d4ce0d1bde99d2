//! Segmentation architectures over an EfficientNet encoder, with per-pixel
//! softmax outputs and safetensors checkpoints.

mod blocks;
pub mod efficientnet;
mod fpn;
mod linknet;
mod manet;
mod pan;
mod pspnet;
mod unet;
mod unetpp;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use enseg_tensor::{io as tio, Forward, ParamStore, Scalar, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{EnsegError, Result};
use blocks::SegmentationHead;
use efficientnet::EfficientNet;

/// Environment variable naming the directory with pretrained encoder weights.
pub const CACHE_ENV: &str = "ENSEG_CACHE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Architecture {
    Unet,
    UnetPlusPlus,
    Manet,
    Linknet,
    Fpn,
    Pspnet,
    Pan,
}

impl Architecture {
    pub const ALL: [Architecture; 7] = [
        Architecture::Unet,
        Architecture::UnetPlusPlus,
        Architecture::Manet,
        Architecture::Linknet,
        Architecture::Fpn,
        Architecture::Pspnet,
        Architecture::Pan,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Unet => "unet",
            Architecture::UnetPlusPlus => "unetpp",
            Architecture::Manet => "manet",
            Architecture::Linknet => "linknet",
            Architecture::Fpn => "fpn",
            Architecture::Pspnet => "pspnet",
            Architecture::Pan => "pan",
        }
    }

    /// Human-readable name for tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Architecture::Unet => "U-Net",
            Architecture::UnetPlusPlus => "U-Net++",
            Architecture::Manet => "MANet",
            Architecture::Linknet => "LinkNet",
            Architecture::Fpn => "FPN",
            Architecture::Pspnet => "PSPNet",
            Architecture::Pan => "PAN",
        }
    }

    /// Input sides must be multiples of this.
    pub fn size_divisor(self) -> usize {
        match self {
            Architecture::Pspnet => 8,
            Architecture::Pan => 16,
            _ => 32,
        }
    }

    /// Smallest accepted side. The attention pyramid in PAN pools its 1/16
    /// input three times.
    pub fn min_side(self) -> usize {
        match self {
            Architecture::Pan => 128,
            other => other.size_divisor(),
        }
    }
}

impl FromStr for Architecture {
    type Err = EnsegError;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric() || *c == '+')
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "unet" => Architecture::Unet,
            "unetpp" | "unet++" | "unetplusplus" => Architecture::UnetPlusPlus,
            "manet" => Architecture::Manet,
            "linknet" => Architecture::Linknet,
            "fpn" => Architecture::Fpn,
            "pspnet" | "psp" => Architecture::Pspnet,
            "pan" => Architecture::Pan,
            _ => return Err(EnsegError::Config(format!("unknown architecture {s:?}"))),
        })
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Encoder {
    EfficientNetB0,
    EfficientNetB1,
    EfficientNetB2,
    EfficientNetB3,
    EfficientNetB4,
}

impl Encoder {
    pub const ALL: [Encoder; 5] = [
        Encoder::EfficientNetB0,
        Encoder::EfficientNetB1,
        Encoder::EfficientNetB2,
        Encoder::EfficientNetB3,
        Encoder::EfficientNetB4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Encoder::EfficientNetB0 => "efficientnet-b0",
            Encoder::EfficientNetB1 => "efficientnet-b1",
            Encoder::EfficientNetB2 => "efficientnet-b2",
            Encoder::EfficientNetB3 => "efficientnet-b3",
            Encoder::EfficientNetB4 => "efficientnet-b4",
        }
    }

    /// 0 for B0 through 4 for B4.
    pub fn index(self) -> usize {
        Encoder::ALL.iter().position(|&e| e == self).expect("listed")
    }
}

impl FromStr for Encoder {
    type Err = EnsegError;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        let idx = match key.as_str() {
            "efficientnetb0" | "b0" => 0,
            "efficientnetb1" | "b1" => 1,
            "efficientnetb2" | "b2" => 2,
            "efficientnetb3" | "b3" => 3,
            "efficientnetb4" | "b4" => 4,
            _ => return Err(EnsegError::Config(format!("unknown encoder {s:?}"))),
        };
        Ok(Encoder::ALL[idx])
    }
}

impl fmt::Display for Encoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(Architecture);
string_serde!(Encoder);

fn default_encoder() -> Encoder {
    Encoder::EfficientNetB0
}

/// What to build. The output is always a per-pixel softmax over
/// `num_classes` channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    #[serde(default = "default_encoder")]
    pub encoder: Encoder,
    #[serde(default)]
    pub encoder_pretrained: bool,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, encoder: Encoder, num_classes: usize) -> Self {
        ModelSpec {
            architecture,
            encoder,
            encoder_pretrained: false,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(EnsegError::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.num_classes > 256 {
            return Err(EnsegError::Config("num_classes must fit an 8-bit mask".into()));
        }
        Ok(())
    }

    /// Short label such as `unet/efficientnet-b0`.
    pub fn label(&self) -> String {
        format!("{}/{}", self.architecture, self.encoder)
    }

    /// Checks that `height x width` inputs are accepted.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let arch = self.architecture;
        let (d, m) = (arch.size_divisor(), arch.min_side());
        if height % d != 0 || width % d != 0 || height < m || width < m {
            return Err(EnsegError::Shape(format!(
                "{} needs input sides divisible by {d} and at least {m}, got {height}x{width}",
                arch.display_name()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} classes)", self.label(), self.num_classes)
    }
}

#[derive(Clone, Debug)]
enum Decoder {
    Unet(unet::UnetDecoder),
    UnetPlusPlus(unetpp::UnetPlusPlusDecoder),
    Manet(manet::ManetDecoder),
    Linknet(linknet::LinknetDecoder),
    Fpn(fpn::FpnDecoder),
    Pspnet(pspnet::PspDecoder),
    Pan(pan::PanDecoder),
}

#[derive(Clone, Debug)]
struct Network {
    encoder: EfficientNet,
    decoder: Decoder,
    head: SegmentationHead,
}

impl Network {
    fn build<T: Scalar>(b: &mut enseg_tensor::Builder<T>, spec: &ModelSpec) -> Self {
        let arch = spec.architecture;
        let (depth, stride) = match arch {
            Architecture::Pspnet => (3, 32),
            Architecture::Pan => (5, 16),
            _ => (5, 32),
        };
        let encoder = EfficientNet::new(b, spec.encoder, depth, stride);
        let ch = encoder.out_channels().to_vec();
        let c = spec.num_classes;
        let last_unet = unet::DECODER_CHANNELS[4];
        let (decoder, head) = match arch {
            Architecture::Unet => (
                Decoder::Unet(unet::UnetDecoder::new(b, &ch)),
                SegmentationHead::new(b, last_unet, c, 3, 1),
            ),
            Architecture::UnetPlusPlus => (
                Decoder::UnetPlusPlus(unetpp::UnetPlusPlusDecoder::new(b, &ch)),
                SegmentationHead::new(b, last_unet, c, 3, 1),
            ),
            Architecture::Manet => (
                Decoder::Manet(manet::ManetDecoder::new(b, &ch)),
                SegmentationHead::new(b, last_unet, c, 3, 1),
            ),
            Architecture::Linknet => (
                Decoder::Linknet(linknet::LinknetDecoder::new(b, &ch)),
                SegmentationHead::new(b, linknet::head_channels(), c, 1, 1),
            ),
            Architecture::Fpn => (
                Decoder::Fpn(fpn::FpnDecoder::new(b, &ch)),
                SegmentationHead::new(b, fpn::SEGMENTATION_CHANNELS, c, 1, 4),
            ),
            Architecture::Pspnet => (
                Decoder::Pspnet(pspnet::PspDecoder::new(b, &ch)),
                SegmentationHead::new(b, pspnet::OUT_CHANNELS, c, 3, 8),
            ),
            Architecture::Pan => (
                Decoder::Pan(pan::PanDecoder::new(b, &ch)),
                SegmentationHead::new(b, pan::DECODER_CHANNELS, c, 3, 4),
            ),
        };
        Network {
            encoder,
            decoder,
            head,
        }
    }

    fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: Var) -> Var {
        let f = self.encoder.forward(fx, x);
        let y = match &self.decoder {
            Decoder::Unet(d) => d.forward(fx, &f),
            Decoder::UnetPlusPlus(d) => d.forward(fx, &f),
            Decoder::Manet(d) => d.forward(fx, &f),
            Decoder::Linknet(d) => d.forward(fx, &f),
            Decoder::Fpn(d) => d.forward(fx, &f),
            Decoder::Pspnet(d) => d.forward(fx, &f),
            Decoder::Pan(d) => d.forward(fx, &f),
        };
        self.head.forward(fx, y)
    }
}

/// A built model: its spec, parameters and layer structure.
#[derive(Clone)]
pub struct SegModel<T: Scalar> {
    spec: ModelSpec,
    params: ParamStore<T>,
    net: Network,
}

/// Initializes a model with parameters drawn from `seed`. Pretrained
/// encoder weights, when requested, are read from [`CACHE_ENV`].
pub fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<SegModel<T>> {
    let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    build_model_with_cache(spec, seed, cache.as_deref())
}

pub fn build_model_with_cache<T: Scalar>(
    spec: &ModelSpec,
    seed: u64,
    cache: Option<&Path>,
) -> Result<SegModel<T>> {
    spec.validate()?;
    let mut b = enseg_tensor::Builder::new(seed);
    let net = Network::build(&mut b, spec);
    let mut model = SegModel {
        spec: spec.clone(),
        params: b.finish(),
        net,
    };
    if spec.encoder_pretrained {
        let dir = cache.ok_or_else(|| {
            EnsegError::PretrainedUnavailable(format!(
                "{} requested but {CACHE_ENV} is not set",
                spec.encoder
            ))
        })?;
        model.load_encoder_weights(&pretrained_path(dir, spec.encoder))?;
    }
    Ok(model)
}

/// `<dir>/<encoder>.safetensors`
pub fn pretrained_path(dir: &Path, encoder: Encoder) -> PathBuf {
    dir.join(format!("{}.safetensors", encoder.as_str()))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// JSON written next to each checkpoint for compatibility checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: Architecture,
    pub encoder: Encoder,
    pub num_classes: usize,
    pub created: String,
}

impl CheckpointMeta {
    pub fn read(ckpt: &Path) -> Result<Self> {
        if !ckpt.is_file() {
            return Err(EnsegError::CheckpointNotFound(ckpt.to_path_buf()));
        }
        let side = sidecar_path(ckpt);
        let text = fs::read_to_string(&side).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => EnsegError::CorruptCheckpoint {
                path: ckpt.to_path_buf(),
                message: format!("missing sidecar {}", side.display()),
            },
            _ => EnsegError::io(&side, e),
        })?;
        serde_json::from_str(&text).map_err(|e| EnsegError::CorruptCheckpoint {
            path: side.clone(),
            message: e.to_string(),
        })
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec::new(self.architecture, self.encoder, self.num_classes)
    }
}

impl<T: Scalar> SegModel<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Records the forward pass of `x` (`[N, 3, H, W]`) into `fx` and returns
    /// the `[N, C, H, W]` probabilities.
    pub fn forward(&self, fx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let s = fx.graph.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(EnsegError::Shape(format!("expected [N, 3, H, W] input, got {s:?}")));
        }
        self.spec.check_input(s[2], s[3])?;
        Ok(self.net.forward(fx, x))
    }

    /// Inference-mode probabilities for a batch.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut fx = Forward::new(&self.params, false, false, 0);
        let xv = fx.graph.constant(x.clone());
        let y = self.forward(&mut fx, xv)?;
        let (graph, _) = fx.finish();
        Ok(graph.value(y).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| EnsegError::io(dir, e))?;
        }
        tio::save_safetensors(&self.params, path).map_err(|e| match e {
            TensorError::Io(io) => EnsegError::io(path, io),
            other => other.into(),
        })?;
        let meta = CheckpointMeta {
            architecture: self.spec.architecture,
            encoder: self.spec.encoder,
            num_classes: self.spec.num_classes,
            created: chrono::Utc::now().to_rfc3339(),
        };
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(&meta)?;
        fs::write(&side, text).map_err(|e| EnsegError::io(&side, e))
    }

    /// Loads a checkpoint written by [`SegModel::save`], which must match
    /// `spec` in architecture, encoder and class count.
    pub fn load(path: &Path, spec: &ModelSpec) -> Result<Self> {
        let meta = CheckpointMeta::read(path)?;
        let found = meta.spec();
        if (found.architecture, found.encoder, found.num_classes)
            != (spec.architecture, spec.encoder, spec.num_classes)
        {
            return Err(EnsegError::Incompatible {
                expected: spec.to_string(),
                found: found.to_string(),
            });
        }
        let mut loaded_spec = spec.clone();
        // The checkpoint already holds every weight.
        loaded_spec.encoder_pretrained = false;
        let mut model = build_model_with_cache(&loaded_spec, 0, None)?;
        model.spec.encoder_pretrained = spec.encoder_pretrained;
        let bytes = fs::read(path).map_err(|e| EnsegError::io(path, e))?;
        tio::load_safetensors(&mut model.params, &bytes).map_err(|e| EnsegError::CorruptCheckpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(model)
    }

    /// Loads the spec from the checkpoint's sidecar, then its weights.
    pub fn load_any(path: &Path) -> Result<Self> {
        let spec = CheckpointMeta::read(path)?.spec();
        Self::load(path, &spec)
    }

    /// Overwrites encoder parameters from a safetensors file keyed either by
    /// bare EfficientNet names (`_conv_stem.weight`) or `encoder.`-prefixed
    /// ones. Classifier weights (`_fc.*`) are ignored.
    pub fn load_encoder_weights(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => EnsegError::PretrainedUnavailable(format!(
                "no weights for {} at {}",
                self.spec.encoder,
                path.display()
            )),
            _ => EnsegError::io(path, e),
        })?;
        let corrupt = |e: TensorError| EnsegError::CorruptCheckpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let tensors = tio::read_safetensors::<T>(&bytes).map_err(corrupt)?;
        let n = tio::assign_tensors(
            &mut self.params,
            tensors,
            |name| {
                if name.starts_with("_fc.") {
                    None
                } else if name.starts_with("encoder.") {
                    Some(name.to_string())
                } else {
                    Some(format!("encoder.{name}"))
                }
            },
            false,
        )
        .map_err(corrupt)?;
        let expected = self
            .params
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("encoder."))
            .count();
        if n != expected {
            return Err(EnsegError::CorruptCheckpoint {
                path: path.to_path_buf(),
                message: format!("covers {n} of {expected} encoder tensors"),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse_loosely() {
        assert_eq!("UNET".parse::<Architecture>().unwrap(), Architecture::Unet);
        assert_eq!("Unet++".parse::<Architecture>().unwrap(), Architecture::UnetPlusPlus);
        assert_eq!("EFFICIENTNET_B3".parse::<Encoder>().unwrap(), Encoder::EfficientNetB3);
        assert!("deeplabv3".parse::<Architecture>().is_err());
        assert!("resnet34".parse::<Encoder>().is_err());
    }

    #[test]
    fn single_class_is_rejected() {
        let spec = ModelSpec::new(Architecture::Unet, Encoder::EfficientNetB0, 1);
        assert!(matches!(build_model::<f32>(&spec, 0), Err(EnsegError::Config(_))));
    }

    #[test]
    fn divisibility_is_checked_per_architecture() {
        let s = |a| ModelSpec::new(a, Encoder::EfficientNetB0, 3);
        assert!(s(Architecture::Unet).check_input(320, 480).is_ok());
        assert!(s(Architecture::Unet).check_input(72, 96).is_err());
        assert!(s(Architecture::Pspnet).check_input(72, 96).is_ok());
        assert!(s(Architecture::Pan).check_input(64, 96).is_err());
        assert!(s(Architecture::Pan).check_input(128, 144).is_ok());
    }
}
