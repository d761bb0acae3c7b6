//! Run configuration: one TOML document with a block per stage of the
//! pipeline. Every field has a default, so a partial file is valid.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use spf_core::eval::EvalConfig;
use spf_core::schedule::StageEntry;
use spf_core::train::TrainConfig;
use spf_core::{ModelConfig, PyramidSchedule};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every component draws from named sub-streams of it.
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset container directory.
    pub data: PathBuf,
    /// Checkpoint directory written by `train` and read by later commands.
    pub run: PathBuf,
    /// Output directory of `sample`, `validate`, `eval` and `bench`.
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: "runs/data".into(),
            run: "runs/model".into(),
            out: "runs/out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_lat: usize,
    pub n_lon: usize,
    pub years: usize,
    pub train_members: usize,
    pub eval_members: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_lat: 24,
            n_lon: 36,
            years: 80,
            train_members: 3,
            eval_members: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Finest stage first.
    pub stages: Vec<StageEntry>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            stages: PyramidSchedule::default_entries(),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<PyramidSchedule> {
        PyramidSchedule::from_entries(&self.stages).context("invalid schedule block")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub scenario: String,
    pub timescale: String,
    pub ensemble: usize,
    /// Euler steps summed over all stages.
    pub steps_total: usize,
    /// Generate one window instead of the whole span.
    pub window: Option<usize>,
    /// Funnel choice per temporal jump for a single window.
    pub period: Vec<usize>,
    pub cache_capacity: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            scenario: "ssp-mid".into(),
            timescale: "monthly".into(),
            ensemble: 1,
            steps_total: 30,
            window: None,
            period: Vec::new(),
            cache_capacity: 4096,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Propagate the root seed into every component block.
    pub fn resolve(mut self) -> Self {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Write the resolved config beside a command's outputs.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join(CONFIG_FILE), self.to_toml()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default().resolve();
        let text = c.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c: RunConfig = toml::from_str("seed = 7\n[train]\nsteps = 3\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.steps, 3);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.schedule.stages.len(), 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 7\n").is_err());
    }
}
