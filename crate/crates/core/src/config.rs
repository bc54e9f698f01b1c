//! Run configuration file: one JSON document with a schema version and an
//! optional section per pipeline stage. Unknown keys are rejected and every
//! section is validated before any model is built.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::error::{io_err, Error, Result};
use crate::metrics::{KidConfig, RegressorConfig};
use crate::teacher::TeacherConfig;
use crate::trainer::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Images per side for FID/KID and PSNR.
    pub samples: usize,
    pub kid: KidConfig,
    pub regressor: RegressorConfig,
    pub pose_probes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 256,
            kid: KidConfig { subsets: 50, subset_size: 100, seed: 0 },
            regressor: RegressorConfig::default(),
            pose_probes: 64,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 || self.pose_probes == 0 {
            return Err(Error::Config("eval needs ≥ 2 samples and ≥ 1 pose probe".into()));
        }
        if self.kid.subset_size > self.samples || self.kid.subset_size < 2 || self.kid.subsets == 0 {
            return Err(Error::Config("kid subset size must lie in [2, samples] with ≥ 1 subset".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub teacher: TeacherConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            teacher: TeacherConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.teacher.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.bench.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Loads and validates a config file; `None` gives the validated defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_json(&std::fs::read_to_string(p).map_err(io_err(p))?),
            None => {
                let c = Self::default();
                c.validate()?;
                Ok(c)
            }
        }
    }
}
