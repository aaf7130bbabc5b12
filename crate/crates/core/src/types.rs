//! Observation and action containers shared by the policy, simulator and
//! datastore.

use serde::{Deserialize, Serialize};

use crate::geometry::{GeometryError, Pose};

pub const POSE_DIM: usize = 9;
pub const WRENCH_DIM: usize = 6;
pub const ACTION_DIM: usize = 16;
pub const GRIPPER_INDEX: usize = 9;
pub const STIFFNESS_RANGE: std::ops::Range<usize> = 10..16;

/// `[pose9 | gripper | stiffness6]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action16(pub [f64; ACTION_DIM]);

impl Default for Action16 {
    fn default() -> Self {
        Self([0.0; ACTION_DIM])
    }
}

impl Action16 {
    pub fn new(pose: &Pose, gripper: f64, stiffness: &[f64; 6]) -> Self {
        let mut a = [0.0; ACTION_DIM];
        a[..POSE_DIM].copy_from_slice(&pose.to_pose9());
        a[GRIPPER_INDEX] = gripper;
        a[STIFFNESS_RANGE].copy_from_slice(stiffness);
        Self(a)
    }

    pub fn pose9(&self) -> &[f64] {
        &self.0[..POSE_DIM]
    }

    /// Target pose with the rotation columns re-orthonormalized.
    pub fn pose(&self) -> Result<Pose, GeometryError> {
        Pose::from_pose9(&self.0[..POSE_DIM])
    }

    pub fn gripper(&self) -> f64 {
        self.0[GRIPPER_INDEX]
    }

    pub fn stiffness(&self) -> [f64; 6] {
        let mut k = [0.0; 6];
        k.copy_from_slice(&self.0[STIFFNESS_RANGE]);
        k
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// `H` consecutive 16-D actions, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    horizon: usize,
    data: Vec<f64>,
}

impl ActionChunk {
    pub fn zeros(horizon: usize) -> Self {
        Self { horizon, data: vec![0.0; horizon * ACTION_DIM] }
    }

    pub fn from_vec(horizon: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == horizon * ACTION_DIM).then_some(Self { horizon, data })
    }

    pub fn from_actions(actions: &[Action16]) -> Self {
        Self { horizon: actions.len(), data: actions.iter().flat_map(|a| a.0).collect() }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn action(&self, i: usize) -> Action16 {
        let mut a = [0.0; ACTION_DIM];
        a.copy_from_slice(&self.data[i * ACTION_DIM..(i + 1) * ACTION_DIM]);
        Action16(a)
    }

    pub fn actions(&self) -> Vec<Action16> {
        (0..self.horizon).map(|i| self.action(i)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// One observation timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsFrame {
    pub pose: [f64; POSE_DIM],
    pub wrench: [f64; WRENCH_DIM],
    /// Row-major `G×G` grid.
    pub grid: Vec<f64>,
}

impl ObsFrame {
    pub fn zeros(grid_size: usize) -> Self {
        Self { pose: [0.0; POSE_DIM], wrench: [0.0; WRENCH_DIM], grid: vec![0.0; grid_size * grid_size] }
    }
}

/// The `(t−1, t)` observation pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub previous: ObsFrame,
    pub current: ObsFrame,
}

impl Observation {
    pub fn frames(&self) -> [&ObsFrame; 2] {
        [&self.previous, &self.current]
    }
}

/// An observation already mapped through dataset statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedObservation(pub Observation);

/// The four manipulation task analogs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum TaskId {
    /// A: powder grinding with a pestle.
    Grind,
    /// B: erasing pencil marks.
    Erase,
    /// C: bimanual round peg insertion.
    RoundInsert,
    /// D: bimanual cuboid peg insertion.
    CuboidInsert,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [TaskId::Grind, TaskId::Erase, TaskId::RoundInsert, TaskId::CuboidInsert];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Grind => "grind",
            TaskId::Erase => "erase",
            TaskId::RoundInsert => "round-insert",
            TaskId::CuboidInsert => "cuboid-insert",
        }
    }

    pub fn n_arms(self) -> usize {
        match self {
            TaskId::Grind | TaskId::Erase => 1,
            TaskId::RoundInsert | TaskId::CuboidInsert => 2,
        }
    }

    pub fn is_insertion(self) -> bool {
        self.n_arms() == 2
    }

    /// Demonstration counts used for each task.
    pub fn default_demo_count(self) -> usize {
        match self {
            TaskId::Grind => 40,
            _ => 60,
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "grind" | "a" | "A" => Ok(TaskId::Grind),
            "erase" | "b" | "B" => Ok(TaskId::Erase),
            "round-insert" | "c" | "C" => Ok(TaskId::RoundInsert),
            "cuboid-insert" | "d" | "D" => Ok(TaskId::CuboidInsert),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}
