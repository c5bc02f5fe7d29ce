use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{resolve_data_root, DatasetKind, Normalization};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::optim::SgdConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Data root or dataset directory. Falls back to `PUSHPULL_DATA_ROOT`, then `./data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Overrides the per-dataset default constants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
}

impl DatasetConfig {
    pub fn new(kind: DatasetKind) -> Self {
        DatasetConfig {
            kind,
            root: None,
            normalization: None,
        }
    }

    pub fn root(&self) -> PathBuf {
        resolve_data_root(self.root.as_deref())
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
            .clone()
            .unwrap_or_else(|| self.kind.default_normalization())
    }
}

fn default_epochs() -> usize {
    5
}

fn default_batch_size() -> usize {
    64
}

/// Everything needed to train one model from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub dataset: DatasetConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub seed: u64,
    /// Train on a stratified subset with this many images per class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(model: ModelSpec, dataset: DatasetConfig) -> Self {
        TrainConfig {
            model,
            dataset,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            sgd: SgdConfig::default(),
            seed: 0,
            subsample: None,
            checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.subsample == Some(0) {
            return Err(Error::Config("subsample must be positive when given".into()));
        }
        if self.model.num_classes != self.dataset.kind.class_count() {
            return Err(Error::Config(format!(
                "model has {} classes but {} has {}",
                self.model.num_classes,
                self.dataset.kind,
                self.dataset.kind.class_count()
            )));
        }
        self.sgd.validate()?;
        self.model.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Serde(msg) => Error::Serde(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FirstLayer;

    const SAMPLE: &str = r#"
epochs = 3
batch_size = 32
seed = 11
subsample = 100

[model]
family = "lenet5"
first_layer = "conv"
conv1_channels = 6
conv2_channels = 8
fc_widths = [64, 32, 10]
num_classes = 10
input_shape = [1, 28, 28]

[dataset]
kind = "mnist"
root = "/tmp/data"

[sgd]
learning_rate = 0.05
momentum = 0.9
"#;

    #[test]
    fn parses_nested_toml() {
        let cfg = TrainConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.model, ModelSpec::lenet("B").unwrap());
        assert_eq!(cfg.sgd.learning_rate, 0.05);
        assert_eq!(cfg.dataset.root(), PathBuf::from("/tmp/data"));
        assert_eq!(cfg.dataset.normalization(), Normalization::mnist());
        let again = TrainConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        let zero = SAMPLE.replace("epochs = 3", "epochs = 0");
        assert!(matches!(TrainConfig::from_toml_str(&zero), Err(Error::Config(_))));
        let batch = SAMPLE.replace("batch_size = 32", "batch_size = 0");
        assert!(TrainConfig::from_toml_str(&batch).is_err());
        let typo = SAMPLE.replace("seed = 11", "sed = 11");
        assert!(matches!(TrainConfig::from_toml_str(&typo), Err(Error::Serde(_))));
        let cifar = SAMPLE.replace("kind = \"mnist\"", "kind = \"cifar100\"");
        assert!(TrainConfig::from_toml_str(&cifar).is_err());
    }

    #[test]
    fn pushpull_model_round_trips() {
        let mut cfg = TrainConfig::from_toml_str(SAMPLE).unwrap();
        cfg.model = cfg.model.with_pushpull(1.5, 0.5);
        let again = TrainConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(again.model.first_layer, FirstLayer::Pushpull);
        assert_eq!(again.model.pushpull.unwrap().alpha, 0.5);
    }
}
