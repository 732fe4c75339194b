//! The run configuration file: one JSON document with optional sections
//! `data`, `model`, `fen`, `train`, `loss` and `eval`. Unknown keys are
//! rejected; every missing field takes its default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::check_size;
use crate::error::{Error, Result};
use crate::fen::FenConfig;
use crate::loss::LossWeights;
use crate::metrics::EvalConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `[height, width]` every image is resized to.
    pub image_size: [usize; 2],
    /// Images held out of training for evaluation, taken from the end of
    /// each domain.
    pub held_out: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { image_size: [64, 64], held_out: 0 }
    }
}

impl DataConfig {
    pub fn size(&self) -> (usize, usize) {
        (self.image_size[0], self.image_size[1])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub fen: FenConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub eval: EvalConfig,
}

impl RunConfigFile {
    /// Strict parse; errors name the offending field path and position.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfigFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner();
            Error::Config(format!(
                "at `{}` (line {}, column {}): {inner}",
                e.path(),
                inner.line(),
                inner.column()
            ))
        })?;
        cfg.train.weights = cfg.loss.clone();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fixes the source domain and, when `train.target_domains` is empty,
    /// targets every other domain. The generator gets one transfer module
    /// per target.
    pub fn resolve_domains(&mut self, source: usize, n_domains: usize) -> Result<()> {
        if source >= n_domains {
            return Err(Error::Config(format!("source domain {source} out of range for {n_domains} domains")));
        }
        self.train.source_domain = source;
        if self.train.target_domains.is_empty() {
            self.train.target_domains = (0..n_domains).filter(|&d| d != source).collect();
        }
        if let Some(&d) = self.train.target_domains.iter().find(|&&d| d >= n_domains) {
            return Err(Error::Config(format!("target domain {d} out of range for {n_domains} domains")));
        }
        self.model.n_domains = self.train.target_domains.len();
        Ok(())
    }

    /// Full validation; call after [`RunConfigFile::resolve_domains`].
    pub fn validate(&self) -> Result<()> {
        check_size(self.data.size())?;
        self.model.validate()?;
        self.fen.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if !(self.eval.lambda.is_finite() && self.eval.lambda >= 0.0) {
            return Err(Error::Config(format!("eval.lambda must be finite and >= 0, got {}", self.eval.lambda)));
        }
        if self.eval.similarity_layers.is_empty() {
            return Err(Error::Config("eval.similarity_layers must be nonempty".into()));
        }
        Ok(())
    }

    /// The fully resolved document; parsing it yields `self` again.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_resolved(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("resolved-config.json");
        std::fs::write(&path, self.to_json()? + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}
