//! Deterministic contact simulator for the four task analogs.
//!
//! Each arm is a free-floating end-effector body driven by a wrench. Contact
//! with task surfaces uses a penalty spring-damper normal force and a
//! smoothed Coulomb friction law. The control loop runs at `control_rate`
//! while the physics integrates with `substeps` semi-implicit Euler steps
//! per control tick.

mod render;
mod tasks;

pub use render::render_grid;
pub use tasks::{initial_marks, InsertState, PegState, TaskState};

use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compliance::{impedance_wrench, ControllerConfig, ControllerState, StiffnessDiag};
use crate::geometry::{Pose, RotationMatrix, Wrench};
use crate::types::{ObsFrame, Observation, TaskId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("simulation diverged: arm {arm} speed {speed:.3} m/s at t={time:.3}s")]
    Diverged { arm: usize, speed: f64, time: f64 },
    #[error("expected {expected} arm commands, got {got}")]
    ArmCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrindParams {
    pub bowl_radius: f64,
    pub pile_radius: f64,
    pub initial_coarse: f64,
    /// Fine mass produced per (N above threshold)·(m/s)·s.
    pub rate: f64,
    pub view_half_extent: f64,
}

impl Default for GrindParams {
    fn default() -> Self {
        Self { bowl_radius: 0.06, pile_radius: 0.035, initial_coarse: 1.0, rate: 0.0, view_half_extent: 0.08 }
            .with_calibrated_rate()
    }
}

impl GrindParams {
    fn with_calibrated_rate(mut self) -> Self {
        self.rate = CALIBRATED_GRIND_RATE;
        self
    }
}

/// Calibrated so the scripted expert reaches about 80 % fine powder in 80 s.
pub const CALIBRATED_GRIND_RATE: f64 = 0.135;
/// Calibrated so two to three expert strokes clear a mark.
pub const CALIBRATED_ERASE_RATE: f64 = 3.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EraseParams {
    /// Half side length of the square notepad region mapped onto the grid.
    pub pad_half_extent: f64,
    pub eraser_half_x: f64,
    pub eraser_half_y: f64,
    /// Intensity removed per (N above threshold)·(m/s)·s.
    pub rate: f64,
}

impl Default for EraseParams {
    fn default() -> Self {
        Self { pad_half_extent: 0.12, eraser_half_x: 0.015, eraser_half_y: 0.04, rate: CALIBRATED_ERASE_RATE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InsertParams {
    pub peg_half_width: f64,
    /// Allowed lateral offset of the peg inside the hole.
    pub clearance: f64,
    /// Extra capture width at the hole mouth.
    pub chamfer: f64,
    pub hole_depth: f64,
    pub target_depth: f64,
    /// Uniform ± range of the hole position randomization.
    pub hole_jitter: f64,
    /// Uniform ± range of the hole yaw randomization (cuboid only).
    pub yaw_jitter: f64,
    pub view_half_extent: f64,
}

impl Default for InsertParams {
    fn default() -> Self {
        Self {
            peg_half_width: 0.01,
            clearance: 0.002,
            chamfer: 0.003,
            hole_depth: 0.03,
            target_depth: 0.02,
            hole_jitter: 0.005,
            yaw_jitter: 0.05,
            view_half_extent: 0.06,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub control_rate: f64,
    pub substeps: usize,
    /// Penalty stiffness k_s (N/m).
    pub contact_stiffness: f64,
    /// Penalty damping c_s (N·s/m).
    pub contact_damping: f64,
    pub friction: f64,
    /// Speed scale (m/s) of the smoothed Coulomb law.
    pub friction_smoothing: f64,
    /// Optional linear/angular drag on every body.
    pub body_damping: f64,
    pub min_force: f64,
    pub damage_force: f64,
    pub max_speed: f64,
    pub gripper_rate: f64,
    pub grid_size: usize,
    pub controller: ControllerConfig,
    pub grind: GrindParams,
    pub erase: EraseParams,
    pub insert: InsertParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            control_rate: 50.0,
            substeps: 20,
            contact_stiffness: 5000.0,
            contact_damping: 100.0,
            friction: 0.8,
            friction_smoothing: 0.01,
            body_damping: 0.0,
            min_force: 0.5,
            damage_force: 15.0,
            max_speed: 10.0,
            gripper_rate: 2.0,
            grid_size: 24,
            controller: ControllerConfig::default(),
            grind: GrindParams::default(),
            erase: EraseParams::default(),
            insert: InsertParams::default(),
        }
    }
}

impl SimConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.control_rate
    }

    /// Episode length in control ticks for each task.
    pub fn episode_ticks(&self, task: TaskId) -> usize {
        let seconds = match task {
            TaskId::Grind => 80.0,
            TaskId::Erase => 24.0,
            TaskId::RoundInsert | TaskId::CuboidInsert => 8.0,
        };
        (seconds * self.control_rate).round() as usize
    }
}

/// State of one end-effector body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmBody {
    pub pose: Pose,
    /// Linear then angular velocity, world frame.
    pub twist: Vector6<f64>,
    /// Opening in [0, 1]; 0 is closed on the held object.
    pub gripper: f64,
    /// Contact wrench exerted by the environment, last substep.
    pub contact: Wrench,
    /// Normal contact force magnitude, last substep.
    pub normal_force: f64,
}

impl ArmBody {
    fn at(pose: Pose) -> Self {
        Self { pose, twist: Vector6::zeros(), gripper: 0.0, contact: Wrench::zero(), normal_force: 0.0 }
    }

    pub fn speed(&self) -> f64 {
        Vector3::new(self.twist[0], self.twist[1], self.twist[2]).norm()
    }
}

/// Reference for the compliance controller of one arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmCommand {
    pub target: Pose,
    pub stiffness: StiffnessDiag,
    pub gripper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub task: TaskId,
    pub config: SimConfig,
    pub arms: Vec<ArmBody>,
    pub task_state: TaskState,
    pub time: f64,
    pub tick: usize,
    controllers: Vec<ControllerState>,
    previous_frames: Option<Vec<ObsFrame>>,
}

impl World {
    /// Initial scene; `seed` randomizes the hole pose of insertion tasks.
    pub fn new(task: TaskId, config: SimConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_5CE4E);
        let (arms, task_state) = match task {
            TaskId::Grind => (
                vec![ArmBody::at(Pose::from_translation(0.0, 0.0, 0.05))],
                TaskState::Grind { coarse: config.grind.initial_coarse, total: config.grind.initial_coarse },
            ),
            TaskId::Erase => {
                let marks = initial_marks(config.grid_size);
                (
                    vec![ArmBody::at(Pose::from_translation(0.11, 0.0, 0.03))],
                    TaskState::Erase { initial_total: marks.iter().sum(), marks, damaged: false },
                )
            }
            TaskId::RoundInsert | TaskId::CuboidInsert => {
                let p = &config.insert;
                let hx = rng.gen_range(-p.hole_jitter..=p.hole_jitter);
                let hy = rng.gen_range(-p.hole_jitter..=p.hole_jitter);
                let yaw = if task == TaskId::CuboidInsert { rng.gen_range(-p.yaw_jitter..=p.yaw_jitter) } else { 0.0 };
                let hole = Pose::new(Vector3::new(hx, hy, 0.10), RotationMatrix::rot_z(yaw));
                let peg = Pose::from_translation(-0.04, 0.0, 0.16);
                (
                    vec![ArmBody::at(peg), ArmBody::at(hole)],
                    TaskState::Insert(InsertState { peg: PegState::Held, inside: false, above: true }),
                )
            }
        };
        let controllers = arms.iter().map(|_| ControllerState::new(config.controller)).collect();
        Self { task, config, arms, task_state, time: 0.0, tick: 0, controllers, previous_frames: None }
    }

    pub fn n_arms(&self) -> usize {
        self.arms.len()
    }

    /// Controller reference that holds every arm where it is.
    pub fn hold_commands(&self, stiffness: &[StiffnessDiag]) -> Vec<ArmCommand> {
        self.arms
            .iter()
            .zip(stiffness)
            .map(|(a, k)| ArmCommand { target: a.pose, stiffness: *k, gripper: a.gripper })
            .collect()
    }

    /// Kinetic energy of all bodies.
    pub fn kinetic_energy(&self) -> f64 {
        let c = &self.config.controller;
        self.arms
            .iter()
            .map(|a| {
                let v = Vector3::new(a.twist[0], a.twist[1], a.twist[2]);
                let w = Vector3::new(a.twist[3], a.twist[4], a.twist[5]);
                0.5 * c.mass * v.norm_squared() + 0.5 * c.inertia * w.norm_squared()
            })
            .sum()
    }

    fn begin_tick(&mut self) {
        self.previous_frames = Some((0..self.n_arms()).map(|a| self.render_frame(a)).collect());
    }

    fn end_tick(&mut self) -> Result<(), SimError> {
        self.tick += 1;
        self.time = self.tick as f64 * self.config.dt();
        for (arm, a) in self.arms.iter().enumerate() {
            let speed = a.speed();
            if !(speed <= self.config.max_speed) {
                return Err(SimError::Diverged { arm, speed, time: self.time });
            }
        }
        Ok(())
    }

    /// Advances one control tick under constant external wrenches.
    pub fn step(&mut self, wrenches: &[Wrench]) -> Result<(), SimError> {
        if wrenches.len() != self.n_arms() {
            return Err(SimError::ArmCount { expected: self.n_arms(), got: wrenches.len() });
        }
        self.begin_tick();
        let h = self.config.dt() / self.config.substeps as f64;
        for _ in 0..self.config.substeps {
            self.substep(wrenches, h);
        }
        self.end_tick()
    }

    /// Advances one control tick with the impedance controller evaluated at
    /// every physics substep.
    pub fn step_controlled(&mut self, commands: &[ArmCommand]) -> Result<(), SimError> {
        if commands.len() != self.n_arms() {
            return Err(SimError::ArmCount { expected: self.n_arms(), got: commands.len() });
        }
        self.begin_tick();
        let h = self.config.dt() / self.config.substeps as f64;
        for _ in 0..self.config.substeps {
            let wrenches: Vec<Wrench> = commands
                .iter()
                .zip(&self.arms)
                .zip(self.controllers.iter_mut())
                .map(|((cmd, arm), ctl)| impedance_wrench(&arm.pose, &arm.twist, &cmd.target, &cmd.stiffness, ctl))
                .collect();
            for (arm, cmd) in self.arms.iter_mut().zip(commands) {
                let g = cmd.gripper.clamp(0.0, 1.0);
                let max = self.config.gripper_rate * h;
                arm.gripper += (g - arm.gripper).clamp(-max, max);
            }
            self.substep(&wrenches, h);
        }
        self.end_tick()
    }

    fn substep(&mut self, applied: &[Wrench], h: f64) {
        let contacts = tasks::contact_wrenches(self, h);
        let c = self.config.controller;
        let drag = self.config.body_damping;
        for (arm, (a, contact)) in self.arms.iter_mut().zip(applied.iter().zip(contacts)) {
            arm.contact = contact.wrench;
            arm.normal_force = contact.normal;
            let f = a.force + contact.wrench.force;
            let t = a.torque + contact.wrench.torque;
            let mut v = Vector3::new(arm.twist[0], arm.twist[1], arm.twist[2]);
            let mut w = Vector3::new(arm.twist[3], arm.twist[4], arm.twist[5]);
            v += h * f / c.mass;
            w += h * t / c.inertia;
            if drag > 0.0 {
                v /= 1.0 + h * drag / c.mass;
                w /= 1.0 + h * drag / c.inertia;
            }
            arm.pose.position += h * v;
            if w != Vector3::zeros() {
                let dr = RotationMatrix::from_rotation_vector(&(h * w));
                arm.pose.rotation = RotationMatrix::renormalized((dr * arm.pose.rotation).matrix());
            }
            arm.twist = Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z);
        }
        tasks::update_task(self, h);
    }

    /// Current-tick observation frame for one arm.
    pub fn render_frame(&self, arm: usize) -> ObsFrame {
        let a = &self.arms[arm];
        let wrench = a.contact.to_array();
        ObsFrame { pose: a.pose.to_pose9(), wrench, grid: render_grid(self) }
    }

    /// `(t−1, t)` observation for one arm; at tick 0 both frames coincide.
    pub fn observe(&self, arm: usize) -> Observation {
        let current = self.render_frame(arm);
        let previous = self.previous_frames.as_ref().map(|f| f[arm].clone()).unwrap_or_else(|| current.clone());
        Observation { previous, current }
    }

    pub fn fine_fraction(&self) -> Option<f64> {
        match &self.task_state {
            TaskState::Grind { coarse, total } => Some(((total - coarse) / total).clamp(0.0, 1.0)),
            _ => None,
        }
    }

    pub fn erased_fraction(&self) -> Option<f64> {
        match &self.task_state {
            TaskState::Erase { marks, initial_total, .. } => {
                Some((1.0 - marks.iter().sum::<f64>() / initial_total).clamp(0.0, 1.0))
            }
            _ => None,
        }
    }

    pub fn damaged(&self) -> bool {
        matches!(self.task_state, TaskState::Erase { damaged: true, .. })
    }

    /// Peg at depth, laterally within clearance and released.
    pub fn task_insert_check(&self) -> bool {
        tasks::insert_success(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compliance::{default_presets, set_stiffness_mode, StiffnessMode};

    fn free_world() -> World {
        let mut w = World::new(TaskId::Grind, SimConfig::default(), 0);
        w.arms[0].pose = Pose::from_translation(0.0, 0.0, 0.2);
        w
    }

    #[test]
    fn zero_wrench_free_space() {
        let mut w = free_world();
        let before = w.arms.clone();
        w.step(&[Wrench::zero()]).unwrap();
        assert_eq!(w.arms, before);
        assert_eq!(w.tick, 1);
        assert!((w.time - 0.02).abs() < 1e-15);
    }

    #[test]
    fn settles_at_penalty_equilibrium() {
        let mut w = World::new(TaskId::Erase, SimConfig::default(), 0);
        w.arms[0].pose = Pose::from_translation(0.0, 0.0, 0.005);
        let f = 10.0;
        let push = Wrench { force: Vector3::new(0.0, 0.0, -f), torque: Vector3::zeros() };
        for _ in 0..200 {
            w.step(&[push]).unwrap();
        }
        let penetration = -w.arms[0].pose.position.z;
        let expect = f / w.config.contact_stiffness;
        assert!((penetration - expect).abs() / expect < 0.02, "{penetration} vs {expect}");
        assert!((w.arms[0].normal_force - f).abs() / f < 0.02);
    }

    #[test]
    fn damped_free_body_loses_energy() {
        let mut cfg = SimConfig::default();
        cfg.body_damping = 0.5;
        let mut w = World::new(TaskId::Grind, cfg, 0);
        w.arms[0].pose = Pose::from_translation(0.0, 0.0, 0.3);
        w.arms[0].twist = Vector6::new(0.3, -0.2, 0.1, 1.0, 0.5, -0.3);
        let mut e = w.kinetic_energy();
        for _ in 0..100 {
            w.step(&[Wrench::zero()]).unwrap();
            let e2 = w.kinetic_energy();
            assert!(e2 <= e);
            e = e2;
        }
    }

    #[test]
    fn divergence_detected() {
        let mut w = free_world();
        let shove = Wrench { force: Vector3::new(1e4, 0.0, 0.0), torque: Vector3::zeros() };
        assert!(matches!(w.step(&[shove]), Err(SimError::Diverged { .. })));
    }

    #[test]
    fn arm_count_checked() {
        let mut w = free_world();
        assert!(matches!(w.step(&[]), Err(SimError::ArmCount { .. })));
    }

    #[test]
    fn controller_holds_pose() {
        let mut w = free_world();
        let k = set_stiffness_mode(StiffnessMode::High, &default_presets(), TaskId::Grind, 0).unwrap();
        let cmds = w.hold_commands(&[k]);
        let start = w.arms[0].pose;
        for _ in 0..50 {
            w.step_controlled(&cmds).unwrap();
        }
        assert!((w.arms[0].pose.position - start.position).norm() < 1e-12);
    }

    #[test]
    fn observation_pairs_previous_frame() {
        let mut w = free_world();
        let o0 = w.observe(0);
        assert_eq!(o0.previous, o0.current);
        let k = StiffnessDiag::uniform(800.0, 150.0);
        let target = Pose::from_translation(0.05, 0.0, 0.2);
        w.step_controlled(&[ArmCommand { target, stiffness: k, gripper: 0.0 }]).unwrap();
        let o1 = w.observe(0);
        assert_eq!(o1.previous, o0.current);
        assert_ne!(o1.current.pose, o0.current.pose);
        assert!(o1.current.grid.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
