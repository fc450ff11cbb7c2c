//! One TOML file drives a full experiment: dataset synthesis, model
//! shape, loss weights, and the training schedule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{FusionMode, HyperParams, SimilaritySpace};
use crate::error::{Error, Result};
use crate::features::BackboneConfig;
use crate::model::ModelConfig;
use crate::synthgen::SynthSpec;
use crate::trainer::TrainConfig;

/// Dataset sizing for `synth` (everything else about generation lives in
/// [SynthSpec]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train_samples: usize,
    pub n_val_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train_samples: 16,
            n_val_samples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub synth: SynthSpec,
    pub backbone: BackboneConfig,
    pub hyper: HyperParams,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<Self> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(self.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.backbone.validate()?;
        self.hyper.validate()?;
        self.train.validate()?;
        if self.synth.image_size.0 % self.backbone.out_stride != 0
            || self.synth.image_size.1 % self.backbone.out_stride != 0
        {
            return Err(Error::Config(format!(
                "image size {:?} not divisible by backbone stride {}",
                self.synth.image_size, self.backbone.out_stride
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            hyper: self.hyper.clone(),
            n_categories: self.synth.n_categories,
            seed: self.train.seed,
        }
    }
}

pub fn similarity_space_name(s: SimilaritySpace) -> &'static str {
    match s {
        SimilaritySpace::Cosine => "cosine",
        SimilaritySpace::Inner => "inner",
        SimilaritySpace::InnerSigmoidAfter => "inner_sigmoid_after",
        SimilaritySpace::InnerSigmoidBefore => "inner_sigmoid_before",
    }
}

pub fn parse_similarity_space(name: &str) -> Result<SimilaritySpace> {
    Ok(match name {
        "cosine" => SimilaritySpace::Cosine,
        "inner" => SimilaritySpace::Inner,
        "inner_sigmoid_after" => SimilaritySpace::InnerSigmoidAfter,
        "inner_sigmoid_before" => SimilaritySpace::InnerSigmoidBefore,
        other => return Err(Error::Config(format!("unknown similarity space {other:?}"))),
    })
}

pub fn fusion_mode_name(m: FusionMode) -> &'static str {
    match m {
        FusionMode::Index => "index",
        FusionMode::Convs => "convs",
        FusionMode::Multi => "multi",
    }
}

pub fn parse_fusion_mode(name: &str) -> Result<FusionMode> {
    Ok(match name {
        "index" => FusionMode::Index,
        "convs" => FusionMode::Convs,
        "multi" => FusionMode::Multi,
        other => return Err(Error::Config(format!("unknown fusion mode {other:?}"))),
    })
}
