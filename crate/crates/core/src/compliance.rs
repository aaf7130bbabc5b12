//! Cartesian impedance control with a diagonal stiffness.
//!
//! The commanded wrench is a spring toward the target pose plus damping on
//! the measured twist, `w = k ⊙ e − d ⊙ v` with `dᵢ = 2ζ√(kᵢ mᵢ)`, clamped
//! component-wise to the configured saturation.

use nalgebra::Vector6;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pose_error, Pose, Wrench};
use crate::types::TaskId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComplianceError {
    #[error("no stiffness preset for task {task} arm {arm}")]
    UnknownPreset { task: TaskId, arm: usize },
    #[error("stiffness {value} at index {index} outside [{min}, {max}]")]
    OutOfBounds { index: usize, value: f64, min: f64, max: f64 },
}

/// `kx, ky, kz` (N/m) followed by `krx, kry, krz` (N·m/rad).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StiffnessDiag(pub [f64; 6]);

impl StiffnessDiag {
    pub fn uniform(translational: f64, rotational: f64) -> Self {
        Self([translational, translational, translational, rotational, rotational, rotational])
    }

    pub fn validated(values: [f64; 6], bounds: StiffnessBounds) -> Result<Self, ComplianceError> {
        for (index, &value) in values.iter().enumerate() {
            let (min, max) = bounds.for_index(index);
            if !(value > 0.0) || value < min || value > max {
                return Err(ComplianceError::OutOfBounds { index, value, min, max });
            }
        }
        Ok(Self(values))
    }

    /// Clamps each entry into the bounds; non-finite entries go to the minimum.
    pub fn clamped(values: [f64; 6], bounds: StiffnessBounds) -> Self {
        Self(std::array::from_fn(|i| {
            let (min, max) = bounds.for_index(i);
            if values[i].is_finite() { values[i].clamp(min, max) } else { min }
        }))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.map(|k| k * s))
    }
}

/// Allowed stiffness range for translational and rotational entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StiffnessBounds {
    pub translational: (f64, f64),
    pub rotational: (f64, f64),
}

impl Default for StiffnessBounds {
    fn default() -> Self {
        Self { translational: (50.0, 2000.0), rotational: (10.0, 500.0) }
    }
}

impl StiffnessBounds {
    fn for_index(&self, i: usize) -> (f64, f64) {
        if i < 3 { self.translational } else { self.rotational }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StiffnessMode {
    Low,
    High,
}

impl StiffnessMode {
    pub fn toggled(self) -> Self {
        match self {
            Self::Low => Self::High,
            Self::High => Self::Low,
        }
    }
}

/// Low/high stiffness pair for one arm of one task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StiffnessPreset {
    pub task: TaskId,
    pub arm: usize,
    pub low: StiffnessDiag,
    pub high: StiffnessDiag,
}

impl StiffnessPreset {
    pub fn get(&self, mode: StiffnessMode) -> StiffnessDiag {
        match mode {
            StiffnessMode::Low => self.low,
            StiffnessMode::High => self.high,
        }
    }
}

/// Per-task presets: position low/high, rotation low/high.
pub fn default_presets() -> Vec<StiffnessPreset> {
    let p = |task, arm, pl, ph, rl, rh| StiffnessPreset {
        task,
        arm,
        low: StiffnessDiag::uniform(pl, rl),
        high: StiffnessDiag::uniform(ph, rh),
    };
    vec![
        p(TaskId::Grind, 0, 300.0, 800.0, 100.0, 150.0),
        p(TaskId::Erase, 0, 800.0, 1200.0, 150.0, 300.0),
        p(TaskId::RoundInsert, 0, 800.0, 1200.0, 150.0, 300.0),
        p(TaskId::RoundInsert, 1, 200.0, 800.0, 100.0, 150.0),
        p(TaskId::CuboidInsert, 0, 800.0, 1200.0, 150.0, 300.0),
        p(TaskId::CuboidInsert, 1, 200.0, 800.0, 100.0, 150.0),
    ]
}

pub fn find_preset(presets: &[StiffnessPreset], task: TaskId, arm: usize) -> Result<StiffnessPreset, ComplianceError> {
    presets
        .iter()
        .find(|p| p.task == task && p.arm == arm)
        .copied()
        .ok_or(ComplianceError::UnknownPreset { task, arm })
}

/// Stiffness diagonal for `mode` from the matching preset.
pub fn set_stiffness_mode(
    mode: StiffnessMode,
    presets: &[StiffnessPreset],
    task: TaskId,
    arm: usize,
) -> Result<StiffnessDiag, ComplianceError> {
    Ok(find_preset(presets, task, arm)?.get(mode))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub damping_ratio: f64,
    /// Virtual mass of the end-effector body (kg).
    pub mass: f64,
    /// Virtual rotational inertia (kg·m²).
    pub inertia: f64,
    pub max_force: f64,
    pub max_torque: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { damping_ratio: 1.0, mass: 1.0, inertia: 0.01, max_force: 50.0, max_torque: 5.0 }
    }
}

impl ControllerConfig {
    pub fn damping(&self, k: &StiffnessDiag) -> [f64; 6] {
        std::array::from_fn(|i| {
            let m = if i < 3 { self.mass } else { self.inertia };
            2.0 * self.damping_ratio * (k.0[i] * m).sqrt()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub config: ControllerConfig,
    pub last_wrench: Wrench,
}

impl ControllerState {
    pub fn new(config: ControllerConfig) -> Self {
        Self { config, last_wrench: Wrench::zero() }
    }
}

/// Commanded wrench for tracking `target` from `current` moving at
/// `velocity` (linear then angular, world frame).
pub fn impedance_wrench(
    current: &Pose,
    velocity: &Vector6<f64>,
    target: &Pose,
    k: &StiffnessDiag,
    state: &mut ControllerState,
) -> Wrench {
    let e = pose_error(current, target);
    let d = state.config.damping(k);
    let raw = Vector6::from_fn(|i, _| k.0[i] * e[i] - d[i] * velocity[i]);
    let (fm, tm) = (state.config.max_force, state.config.max_torque);
    let sat = Vector6::from_fn(|i, _| {
        let lim = if i < 3 { fm } else { tm };
        raw[i].clamp(-lim, lim)
    });
    let w = Wrench::from_vector(&sat);
    state.last_wrench = w;
    w
}
