//! Run configuration file.
//!
//! Every section is optional and falls back to library defaults. Paths are
//! resolved relative to the directory holding the config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;

use hiclass::datagen::{DatasetParams, DatasetSpec};
use hiclass::losses::LossConfig;
use hiclass::model::ModelOptions;
use hiclass::taxonomy::Taxonomy;
use hiclass::trainer::TrainConfig;
use hiclass::Exec;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    /// Taxonomy JSON. Without it the built-in gastric hierarchy is used.
    pub taxonomy: Option<PathBuf>,
    pub dataset: DatasetParams,
    pub model: ModelOptions,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub output_dir: Option<PathBuf>,
    pub exec: Exec,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// `None` when the file names no taxonomy.
    pub taxonomy: Option<Taxonomy>,
    pub dataset: DatasetParams,
    pub model: ModelOptions,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub output_dir: Option<PathBuf>,
    pub exec: Exec,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let raw: RunConfigFile =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let taxonomy = match &raw.taxonomy {
            Some(p) => {
                let p = base.join(p);
                if !p.exists() {
                    bail!("taxonomy file {} does not exist", p.display());
                }
                Some(Taxonomy::load(&p)?)
            }
            None => None,
        };
        raw.loss.validate()?;
        raw.train.validate()?;
        Ok(Self {
            taxonomy,
            dataset: raw.dataset,
            model: raw.model,
            loss: raw.loss,
            train: raw.train,
            output_dir: raw.output_dir.map(|p| base.join(p)),
            exec: raw.exec,
        })
    }

    /// Configuration used when no file is given.
    pub fn load_defaults() -> anyhow::Result<Self> {
        let raw = RunConfigFile::default();
        Ok(Self {
            taxonomy: None,
            dataset: raw.dataset,
            model: raw.model,
            loss: raw.loss,
            train: raw.train,
            output_dir: None,
            exec: raw.exec,
        })
    }

    pub fn taxonomy_or_default(&self) -> Taxonomy {
        self.taxonomy.clone().unwrap_or_else(Taxonomy::gastric)
    }

    pub fn dataset_spec(&self) -> hiclass::Result<DatasetSpec> {
        DatasetSpec::new(self.taxonomy_or_default(), self.dataset.clone())
    }
}
