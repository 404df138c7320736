//! The run configuration: one TOML document tying together dataset
//! generation, architecture, and training. Unknown keys are rejected,
//! every field has a default, and a dumped config re-parses to an
//! equal value.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ArchConfig, HeteroMode};
use crate::phantom::DatasetSpec;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

/// Bumped on any incompatible change to the config layout.
pub const CONFIG_SCHEMA: u32 = 1;

fn default_schema() -> u32 {
    CONFIG_SCHEMA
}

/// Everything one run needs, sectioned as `[dataset]` (with nested
/// `[dataset.phantom]` and `[dataset.noise]`), `[arch]`, and `[train]`.
///
/// The head mode appears in both `[arch]` and `[train]`; they must
/// agree, and [`RunConfig::set_mode`] keeps them in step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub dataset: DatasetSpec,
    pub arch: ArchConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let arch = ArchConfig { hetero: train.hetero, ..ArchConfig::default() };
        RunConfig { schema_version: CONFIG_SCHEMA, dataset: DatasetSpec::default(), arch, train }
    }
}

impl RunConfig {
    /// Set the head mode everywhere it appears.
    pub fn set_mode(&mut self, mode: HeteroMode) {
        self.arch.hetero = mode;
        self.train.hetero = mode;
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "config schema_version {} is not supported (this build reads {CONFIG_SCHEMA})",
                self.schema_version
            )));
        }
        self.dataset.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        if self.arch.hetero != self.train.hetero {
            return Err(Error::Config(format!(
                "[arch] hetero is {:?} but [train] hetero is {:?}; set both to the same mode",
                self.arch.hetero, self.train.hetero
            )));
        }
        if self.arch.n_tasks != self.dataset.phantom.n_tasks() {
            return Err(Error::Config(format!(
                "[arch] n_tasks is {} but the phantom generates {} tasks; set n_tasks to match",
                self.arch.n_tasks,
                self.dataset.phantom.n_tasks()
            )));
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &Path) -> Result<RunConfig> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        // [train] hetero drives the mode; the architecture head follows
        // unless the document pins [arch] hetero itself (then validate
        // still cross-checks the two).
        let raw: toml::Value =
            toml::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        if raw.get("arch").and_then(|a| a.get("hetero")).is_none() {
            cfg.arch.hetero = cfg.train.hetero;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::parse(&fs::read_to_string(path)?, path)
    }

    pub fn dump(&self) -> String {
        toml::to_string(self).expect("a RunConfig always serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.dump())?;
        Ok(())
    }
}
