//! One JSON document configuring every command: corpus, model, training and
//! paths. Every field has a default and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthdata::CorpusSpec;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Checks each section and that the model's input widths and class count
    /// match the corpus it describes.
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        for (field, model, corpus) in [
            ("d_visual_raw", self.model.d_visual_raw, self.corpus.d_visual_raw),
            ("d_audio_raw", self.model.d_audio_raw, self.corpus.d_audio_raw),
            ("num_classes", self.model.num_classes, self.corpus.num_classes),
        ] {
            if model != corpus {
                return Err(Error::Config(format!("{field}: model has {model}, corpus has {corpus}")));
            }
        }
        Ok(())
    }
}
