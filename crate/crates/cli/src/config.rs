//! TOML run configuration.

use std::path::{Path, PathBuf};

use hdafl::dataset::EpisodeSpec;
use hdafl::eval::{EvalMode, GAMMA_DEFAULT};
use hdafl::losses::{AalVariant, LossWeights};
use hdafl::model::{ModelConfig, SoftmaxAxis};
use hdafl::trainer::TrainConfig;
use hdafl::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub init_seed: u64,
    pub use_enhanced_features: bool,
    pub aal_variant: AalVariant,
    pub aal_margin: f64,
    pub presence_threshold: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            init_seed: t.init_seed,
            use_enhanced_features: t.use_enhanced_features,
            aal_variant: t.aal_variant,
            aal_margin: t.aal_margin,
            presence_threshold: t.presence_threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_width: usize,
    pub heads: usize,
    pub ff_multiplier: usize,
    pub attention_softmax_axis: SoftmaxAxis,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_width: ModelConfig::DEFAULT_HIDDEN_WIDTH,
            heads: ModelConfig::DEFAULT_HEADS,
            ff_multiplier: ModelConfig::DEFAULT_FF_MULTIPLIER,
            attention_softmax_axis: SoftmaxAxis::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub gamma: f64,
    pub mode: EvalMode,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            gamma: GAMMA_DEFAULT,
            mode: EvalMode::Gzsl,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub train: TrainSection,
    pub episode: EpisodeSpec,
    pub loss: LossWeights,
    pub model: ModelSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile {
                    name: "config".into(),
                    path: path.to_path_buf(),
                }
            } else {
                Error::Io {
                    path: path.to_path_buf(),
                    source: e,
                }
            }
        })?;
        Self::parse(&text)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            episode: self.episode,
            loss: self.loss.clone(),
            init_seed: t.init_seed,
            checkpoint_dir: None,
            use_enhanced_features: t.use_enhanced_features,
            aal_variant: t.aal_variant,
            aal_margin: t.aal_margin,
            presence_threshold: t.presence_threshold,
            attention_softmax_axis: self.model.attention_softmax_axis,
            hidden_width: self.model.hidden_width,
            heads: self.model.heads,
            ff_multiplier: self.model.ff_multiplier,
        }
    }

    /// Applies a global seed override to every seed in the file.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.init_seed = seed;
        self.episode.seed = seed;
    }
}

/// The default configuration as TOML, shown by `--help`.
pub fn defaults_toml() -> String {
    toml::to_string(&RunConfigFile::default()).expect("serialize defaults")
}
