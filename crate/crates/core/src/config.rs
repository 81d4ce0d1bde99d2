//! Declarative experiment description read from a single JSON file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, load_predefined_split, split_dataset, ClassTable, DatasetSplit};
use crate::ensemble::FusionSpec;
use crate::error::{EnsegError, Result};
use crate::evaluation::EvalOptions;
use crate::model::ModelSpec;
use crate::preprocess::PreprocessConfig;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// `<root>/{train,valid,test}/` as shipped.
    #[default]
    Predefined,
    /// One `<root>/{images,masks}/` pool split by ratio.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            mode: SplitMode::Predefined,
            ratios: [0.67, 0.13, 0.20],
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: PathBuf,
    /// Class table JSON; defaults to `<root>/classes.json`.
    #[serde(default)]
    pub classes: Option<PathBuf>,
    #[serde(default)]
    pub split: SplitConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: Vec<ModelSpec>,
    #[serde(default)]
    pub fusion: FusionSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub run_name: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs"),
            run_name: "run".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub output: OutputConfig,
}

fn absolutize(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    /// Parses, makes paths absolute against `base_dir` and validates.
    /// Parse errors name the offending field path.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            EnsegError::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.resolve(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                EnsegError::Config(format!("config file {} not found", path.display()))
            }
            _ => EnsegError::io(path, e),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        let base = fs::canonicalize(base).map_err(|e| EnsegError::io(base, e))?;
        Self::from_json(&text, &base)
    }

    /// Fills in implied values so the serialized form is self-contained.
    fn resolve(&mut self, base: &Path) {
        absolutize(base, &mut self.dataset.root);
        if self.dataset.classes.is_none() {
            self.dataset.classes = Some(self.dataset.root.join("classes.json"));
        }
        if let Some(c) = &mut self.dataset.classes {
            absolutize(base, c);
        }
        absolutize(base, &mut self.output.dir);
        self.train.checkpoint_dir = Some(self.output.dir.clone());
        self.train.run_name = self.output.run_name.clone();
        if let Some(e) = &mut self.ensemble {
            if e.fusion.weights.is_none() && e.fusion.method == crate::ensemble::FusionMethod::WeightedAverage {
                e.fusion.weights = Some(vec![1.0; e.members.len()]);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.model, &self.ensemble) {
            (Some(_), Some(_)) => {
                return Err(EnsegError::Config("set either `model` or `ensemble`, not both".into()))
            }
            (None, None) => return Err(EnsegError::Config("one of `model` or `ensemble` is required".into())),
            (None, Some(e)) => {
                if e.members.len() < 2 {
                    return Err(EnsegError::Config("ensemble.members needs at least 2 entries".into()));
                }
                e.fusion.validate(e.members.len())?;
            }
            (Some(_), None) => {}
        }
        let specs = self.member_specs();
        for s in &specs {
            s.validate()?;
            s.check_input(self.preprocess.target_height, self.preprocess.target_width)?;
        }
        if specs.iter().any(|s| s.num_classes != specs[0].num_classes) {
            return Err(EnsegError::Config("ensemble members disagree on num_classes".into()));
        }
        self.preprocess.validate()?;
        self.train.validate()?;
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(EnsegError::Config("eval.threshold must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// The single model, or every ensemble member.
    pub fn member_specs(&self) -> Vec<ModelSpec> {
        match (&self.model, &self.ensemble) {
            (Some(m), _) => vec![m.clone()],
            (None, Some(e)) => e.members.clone(),
            (None, None) => Vec::new(),
        }
    }

    pub fn fusion(&self) -> FusionSpec {
        self.ensemble.as_ref().map(|e| e.fusion.clone()).unwrap_or_default()
    }

    /// Config fusion when its weights fit `members`, equal weights otherwise.
    pub fn fusion_for(&self, members: usize) -> FusionSpec {
        let f = self.fusion();
        match &f.weights {
            Some(w) if w.len() != members => FusionSpec {
                weights: None,
                ..f
            },
            _ => f,
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.dir.join(&self.output.run_name)
    }

    pub fn class_table(&self) -> Result<ClassTable> {
        let path = self
            .dataset
            .classes
            .clone()
            .unwrap_or_else(|| self.dataset.root.join("classes.json"));
        if !self.dataset.root.is_dir() {
            return Err(EnsegError::DatasetNotFound(self.dataset.root.clone()));
        }
        let table = ClassTable::load(&path)?;
        if let Some(s) = self.member_specs().iter().find(|s| s.num_classes != table.num_classes()) {
            return Err(EnsegError::Config(format!(
                "{} expects {} classes but the class table has {}",
                s.label(),
                s.num_classes,
                table.num_classes()
            )));
        }
        Ok(table)
    }

    pub fn load_split(&self) -> Result<(ClassTable, DatasetSplit)> {
        let classes = self.class_table()?;
        let root = &self.dataset.root;
        let split = match self.dataset.split.mode {
            SplitMode::Predefined => load_predefined_split(root, &classes)?,
            SplitMode::Random => {
                let all = load_dataset(root, &classes)?;
                split_dataset(&all, self.dataset.split.ratios, self.dataset.split.seed)?
            }
        };
        Ok((classes, split))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_made_explicit() {
        let cfg = ExperimentConfig::from_json(
            r#"{"dataset": {"root": "data"}, "model": {"architecture": "unet", "num_classes": 3}}"#,
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(cfg.dataset.root, Path::new("/base/data"));
        assert_eq!(cfg.train.learning_rate, 1e-4);
        let text = cfg.to_json().unwrap();
        assert!(text.contains("\"learning_rate\": 0.0001"));
        let again = ExperimentConfig::from_json(&text, Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let err = ExperimentConfig::from_json(
            r#"{"dataset": {"root": "d"}, "model": {"architecture": "unet", "num_classes": 3},
                "train": {"learning_rate": "fast"}}"#,
            Path::new("/"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("train.learning_rate"), "{err}");
    }

    #[test]
    fn model_and_ensemble_are_exclusive() {
        let m = r#"{"architecture": "unet", "num_classes": 3}"#;
        let both = format!(r#"{{"dataset": {{"root": "d"}}, "model": {m}, "ensemble": {{"members": [{m}, {m}]}}}}"#);
        assert!(ExperimentConfig::from_json(&both, Path::new("/")).is_err());
        let neither = r#"{"dataset": {"root": "d"}}"#;
        assert!(ExperimentConfig::from_json(neither, Path::new("/")).is_err());
    }
}
