//! Experiment configuration file.
//!
//! TOML with one table per concern; every key has a default matching the
//! tiny recipe and unknown keys are rejected:
//!
//! ```toml
//! output_dir = "runs/tiny"
//!
//! [model]
//! backbone_mode = "separated"
//! moe_modality = "both"
//!
//! [moe]
//! num_experts = 8
//! top_k = 2
//!
//! [train]
//! steps = 2000
//!
//! [finetune]
//! peak_lr = 5e-5
//!
//! [data]
//! num_shapes = 4
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::spec::{ModelSpec, MoeSpec};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dense architecture; MoE settings belong in `[moe]`.
    pub model: ModelSpec,
    pub moe: MoeSpec,
    /// Dense training and sparse training from scratch. The regime is set
    /// by the command that runs it.
    pub train: TrainConfig,
    /// Continued training of an upcycled checkpoint.
    pub finetune: TrainConfig,
    pub data: SynthSpec,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::tiny(),
            moe: MoeSpec::default(),
            train: TrainConfig::default(),
            finetune: TrainConfig::upcycle_default(),
            data: SynthSpec::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Dense spec for training from scratch.
    pub fn dense_spec(&self) -> ModelSpec {
        self.model.dense()
    }

    /// MoE spec for training a sparse model from scratch.
    pub fn sparse_spec(&self) -> ModelSpec {
        self.model.clone().with_moe(self.moe.clone(), self.model.moe_modality)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.moe.is_some() {
            return Err(Error::Config("model.moe is not a config key; use the [moe] table".into()));
        }
        self.model.validate()?;
        self.moe.validate()?;
        self.sparse_spec().validate()?;
        self.train.validate().map_err(|e| rename(e, "train.", "train."))?;
        self.finetune.validate().map_err(|e| rename(e, "train.", "finetune."))?;
        self.data.validate()?;
        data_fits_model(&self.data, &self.model)?;
        for (section, t) in [("train", &self.train), ("finetune", &self.finetune)] {
            if t.batch_size > self.data.train_size {
                return Err(Error::Config(format!(
                    "{section}.batch_size ({}) exceeds data.train_size ({})",
                    t.batch_size, self.data.train_size
                )));
            }
        }
        Ok(())
    }
}

/// Checks that the synthetic data can be fed to a model built from `spec`.
pub fn data_fits_model(data: &SynthSpec, spec: &ModelSpec) -> Result<()> {
    if data.image_size != spec.image_size {
        return Err(Error::Config(format!(
            "data.image_size ({}) must equal model.image_size ({})",
            data.image_size, spec.image_size
        )));
    }
    if data.vocab_needed() > spec.vocab_size {
        return Err(Error::Config(format!(
            "data needs {} tokens but model.vocab_size is {}",
            data.vocab_needed(),
            spec.vocab_size
        )));
    }
    if data.caption_len > spec.text_tokens() {
        return Err(Error::Config(format!(
            "data.caption_len ({}) exceeds model.text_tower.max_tokens ({})",
            data.caption_len,
            spec.text_tokens()
        )));
    }
    if spec.channels != 3 {
        return Err(Error::Config("synthetic data is RGB; model.channels must be 3".into()));
    }
    Ok(())
}

fn rename(e: Error, from: &str, to: &str) -> Error {
    match e {
        Error::Config(m) => Error::Config(m.replace(from, to)),
        other => other,
    }
}
