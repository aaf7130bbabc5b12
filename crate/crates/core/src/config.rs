//! The single run configuration file (TOML) shared by all commands.
//!
//! Every field has a default, so an empty file is valid:
//!
//! ```toml
//! task = "erase"
//! seed = 0
//!
//! [train]
//! steps = 3000
//! batch_size = 16
//!
//! [train.model]
//! d_model = 64
//!
//! [rollout]
//! replan_interval = 16
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compliance::{default_presets, find_preset, StiffnessPreset};
use crate::experts::ExpertConfig;
use crate::runtime::RolloutConfig;
use crate::sim::SimConfig;
use crate::train::TrainConfig;
use crate::types::TaskId;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown task {0:?} (expected grind, erase, round-insert or cuboid-insert)")]
    UnknownTask(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("reading config {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Task name; command-line flags take precedence.
    pub task: Option<String>,
    pub seed: u64,
    /// Demonstrations per collection; `None` uses the task default.
    pub demos: Option<usize>,
    pub presets: Vec<StiffnessPreset>,
    pub sim: SimConfig,
    pub expert: ExpertConfig,
    pub train: TrainConfig,
    pub rollout: RolloutConfig,
    pub teleop_port: u16,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: None,
            seed: 0,
            demos: None,
            presets: default_presets(),
            sim: SimConfig::default(),
            expert: ExpertConfig::default(),
            train: TrainConfig::default(),
            rollout: RolloutConfig::default(),
            teleop_port: 8765,
        }
    }
}

pub fn parse_task(s: &str) -> Result<TaskId, ConfigError> {
    s.parse().map_err(|_| ConfigError::UnknownTask(s.to_owned()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Some(t) = &self.task {
            parse_task(t)?;
        }
        self.train.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let s = &self.sim;
        if !(s.control_rate > 0.0) || s.substeps == 0 || s.grid_size == 0 {
            return Err(ConfigError::Invalid("sim needs positive control_rate, substeps and grid_size".into()));
        }
        if s.grid_size != self.train.model.grid_size {
            return Err(ConfigError::Invalid(format!(
                "sim.grid_size {} differs from train.model.grid_size {}",
                s.grid_size, self.train.model.grid_size
            )));
        }
        if self.expert.position_noise < 0.0 || self.expert.rotation_noise < 0.0 || self.expert.timing_jitter < 0.0 {
            return Err(ConfigError::Invalid("expert noise must be non-negative".into()));
        }
        if self.rollout.replan_interval == 0 || self.rollout.n_infer_steps == 0 {
            return Err(ConfigError::Invalid("rollout.replan_interval and n_infer_steps must be positive".into()));
        }
        if self.rollout.replan_interval > self.train.model.horizon {
            return Err(ConfigError::Invalid(format!(
                "rollout.replan_interval {} exceeds train.model.horizon {}",
                self.rollout.replan_interval, self.train.model.horizon
            )));
        }
        for p in &self.presets {
            for k in [p.low, p.high] {
                crate::compliance::StiffnessDiag::validated(k.0, self.train.bounds)
                    .map_err(|e| ConfigError::Invalid(format!("preset {} arm {}: {e}", p.task, p.arm)))?;
            }
        }
        Ok(())
    }

    /// Task from the flag, else from the file.
    pub fn resolve_task(&self, flag: Option<&str>) -> Result<TaskId, ConfigError> {
        let name = flag.or(self.task.as_deref()).ok_or_else(|| ConfigError::Invalid("no task given".into()))?;
        let task = parse_task(name)?;
        for arm in 0..task.n_arms() {
            find_preset(&self.presets, task, arm).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(task)
    }

    pub fn expert_for(&self, task: TaskId, seed: u64) -> ExpertConfig {
        ExpertConfig { task, seed, presets: self.presets.clone(), ..self.expert.clone() }
    }
}
