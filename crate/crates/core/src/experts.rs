//! Scripted demonstrators.
//!
//! Each expert is a timed sequence of segments per arm. A segment moves the
//! controller reference with smoothstep interpolation (or traces an orbit)
//! under one stiffness mode. Seeded noise perturbs waypoints and durations so
//! that episodes differ while sharing the same phase structure.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compliance::{default_presets, find_preset, ComplianceError, StiffnessMode, StiffnessPreset};
use crate::datastore::{Episode, EpisodeMeta, Outcome, EPISODE_VERSION};
use crate::geometry::{Pose, RotationMatrix};
use crate::sim::{ArmCommand, SimConfig, SimError, World};
use crate::types::{Action16, TaskId};

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("expert scripted for {expected} cannot drive a {got} world")]
    TaskMismatch { expected: TaskId, got: TaskId },
    #[error("expert episode {seed} failed: {reason}")]
    ExpertFailure { seed: u64, reason: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Compliance(#[from] ComplianceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub task: TaskId,
    /// Waypoint position noise std (m).
    pub position_noise: f64,
    /// Waypoint orientation noise std (rad).
    pub rotation_noise: f64,
    /// Segment durations are scaled by `1 + U(−j, j)`.
    pub timing_jitter: f64,
    pub presets: Vec<StiffnessPreset>,
    pub seed: u64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            task: TaskId::Grind,
            position_noise: 0.002,
            rotation_noise: 0.02,
            timing_jitter: 0.1,
            presets: default_presets(),
            seed: 0,
        }
    }
}

impl ExpertConfig {
    pub fn for_task(task: TaskId, seed: u64) -> Self {
        Self { task, seed, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Motion {
    Hold(Pose),
    /// Smoothstep from one pose to another.
    Move(Pose, Pose),
    /// Circle in the horizontal plane, starting at angle `phase`.
    Orbit { center: Vector3<f64>, radius: f64, turns: f64, phase: f64, rotation: RotationMatrix },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Segment {
    /// Phase name, useful when inspecting scripts.
    name: &'static str,
    start: f64,
    duration: f64,
    motion: Motion,
    mode: StiffnessMode,
    gripper: f64,
}

fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

fn interpolate(a: &Pose, b: &Pose, s: f64) -> Pose {
    let rel = (b.rotation * a.rotation.transpose()).log();
    Pose::new(a.position + s * (b.position - a.position), RotationMatrix::from_rotation_vector(&(s * rel)) * a.rotation)
}

impl Segment {
    fn target(&self, t: f64) -> Pose {
        let s = if self.duration > 0.0 { ((t - self.start) / self.duration).clamp(0.0, 1.0) } else { 1.0 };
        match self.motion {
            Motion::Hold(p) => p,
            Motion::Move(a, b) => interpolate(&a, &b, smoothstep(s)),
            Motion::Orbit { center, radius, turns, phase, rotation } => {
                let th = phase + std::f64::consts::TAU * turns * s;
                Pose::new(center + radius * Vector3::new(th.cos(), th.sin(), 0.0), rotation)
            }
        }
    }

    fn end_pose(&self) -> Pose {
        self.target(self.start + self.duration)
    }
}

/// Builds a segment list, tracking the running end time and pose.
struct Script<'a> {
    segments: Vec<Segment>,
    time: f64,
    pose: Pose,
    jitter: f64,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> Script<'a> {
    fn new(start: Pose, jitter: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self { segments: Vec::new(), time: 0.0, pose: start, jitter, rng }
    }

    fn jittered(&mut self, d: f64) -> f64 {
        if self.jitter > 0.0 { d * (1.0 + self.rng.gen_range(-self.jitter..=self.jitter)) } else { d }
    }

    fn push(&mut self, name: &'static str, duration: f64, motion: Motion, mode: StiffnessMode, gripper: f64) {
        let duration = self.jittered(duration);
        let seg = Segment { name, start: self.time, duration, motion, mode, gripper };
        self.pose = seg.end_pose();
        self.time += duration;
        self.segments.push(seg);
    }

    fn move_to(&mut self, name: &'static str, duration: f64, to: Pose, mode: StiffnessMode, gripper: f64) {
        let from = self.pose;
        self.push(name, duration, Motion::Move(from, to), mode, gripper);
    }

    fn hold(&mut self, name: &'static str, duration: f64, mode: StiffnessMode, gripper: f64) {
        let p = self.pose;
        self.push(name, duration, Motion::Hold(p), mode, gripper);
    }
}

/// Scripted demonstrator for one task, fixed at construction from the
/// initial world and the seed.
#[derive(Debug, Clone)]
pub struct Expert {
    config: ExpertConfig,
    presets: Vec<StiffnessPreset>,
    arms: Vec<Vec<Segment>>,
    dt: f64,
}

struct Noise {
    rng: ChaCha8Rng,
    pos: Option<Normal<f64>>,
    rot: Option<Normal<f64>>,
}

impl Noise {
    fn new(cfg: &ExpertConfig) -> Self {
        let normal = |s: f64| (s > 0.0).then(|| Normal::new(0.0, s).expect("finite std"));
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xE4E7),
            pos: normal(cfg.position_noise),
            rot: normal(cfg.rotation_noise),
        }
    }

    fn p(&mut self, scale: f64) -> f64 {
        self.pos.map_or(0.0, |n| scale * n.sample(&mut self.rng))
    }

    fn tilt(&mut self, scale: f64) -> RotationMatrix {
        let w = self.rot.map_or(Vector3::zeros(), |n| {
            Vector3::new(n.sample(&mut self.rng), n.sample(&mut self.rng), n.sample(&mut self.rng))
        });
        RotationMatrix::from_rotation_vector(&(scale * w))
    }
}

use StiffnessMode::{High, Low};

fn grind_script(world: &World, noise: &mut Noise, jitter: f64) -> Vec<Segment> {
    let horizon = world.config.episode_ticks(TaskId::Grind) as f64 * world.config.dt();
    let mut rng = ChaCha8Rng::seed_from_u64(noise.rng.gen());
    let mut s = Script::new(world.arms[0].pose, jitter, &mut rng);
    while s.time < horizon {
        let center = Vector3::new(noise.p(1.0), noise.p(1.0), 0.0);
        let radius = 0.025 + noise.p(1.0);
        let depth = 0.014 + noise.p(0.5);
        let rot = noise.tilt(1.0);
        let phase = noise.rng.gen_range(0.0..std::f64::consts::TAU);
        let turns = if noise.rng.gen_bool(0.5) { 3.0 } else { 4.0 };
        let start = center + radius * Vector3::new(phase.cos(), phase.sin(), 0.0);
        // Down the centre line, out to the circle while pressing, and back up
        // diagonally: descending and rising paths never share a corridor, and
        // the pause at the top is shorter than one action chunk.
        s.move_to("approach", 0.8, Pose::new(center + Vector3::new(0.0, 0.0, 0.01), rot), High, 0.0);
        s.move_to("press", 0.4, Pose::new(start - Vector3::new(0.0, 0.0, depth), rot), Low, 0.0);
        let orbit_center = center - Vector3::new(0.0, 0.0, depth);
        s.push("orbit", 1.6 * turns, Motion::Orbit { center: orbit_center, radius, turns, phase, rotation: rot }, Low, 0.0);
        s.move_to("retreat", 0.8, Pose::new(Vector3::new(0.0, 0.0, 0.08), rot), High, 0.0);
        s.hold("look", 0.4, High, 0.0);
    }
    s.segments
}

fn erase_script(world: &World, noise: &mut Noise, jitter: f64) -> Vec<Segment> {
    let horizon = world.config.episode_ticks(TaskId::Erase) as f64 * world.config.dt();
    let mut rng = ChaCha8Rng::seed_from_u64(noise.rng.gen());
    let mut s = Script::new(world.arms[0].pose, jitter, &mut rng);
    let (x_right, x_left) = (0.10, -0.10);
    while s.time < horizon {
        let y = 0.015 + noise.p(1.0);
        let depth = 0.008 + noise.p(0.5);
        let rot = noise.tilt(0.5);
        let dx = noise.p(1.0);
        s.move_to("ready", 0.6, Pose::new(Vector3::new(x_right + dx, y, 0.02), rot), High, 0.0);
        s.move_to("descend", 0.4, Pose::new(Vector3::new(x_right + dx, y, -depth), rot), Low, 0.0);
        s.move_to("stroke", 2.0, Pose::new(Vector3::new(x_left + dx, y, -depth), rot), Low, 0.0);
        s.move_to("lift", 0.4, Pose::new(Vector3::new(x_left + dx, y, 0.02), rot), High, 0.0);
        s.move_to("return", 1.6, Pose::new(Vector3::new(x_right + dx, y, 0.02), rot), High, 0.0);
    }
    s.segments
}

fn insert_scripts(world: &World, noise: &mut Noise, jitter: f64) -> Vec<Vec<Segment>> {
    let hole = world.arms[1].pose;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.rng.gen());
    // Alignment uses a quarter of the nominal noise so the expert succeeds.
    let lateral = Vector3::new(noise.p(0.25), noise.p(0.25), 0.0);
    let yaw = RotationMatrix::rot_z(hole.yaw()) * noise.tilt(0.1);
    let above = hole.position + lateral + Vector3::new(0.0, 0.0, 0.015);
    let seated = hole.position + lateral - Vector3::new(0.0, 0.0, 0.026 + noise.p(0.5).abs());

    let mut peg = Script::new(world.arms[0].pose, jitter, &mut rng);
    peg.move_to("approach", 2.0, Pose::new(above, yaw), High, 0.0);
    peg.hold("settle", 0.4, High, 0.0);
    peg.move_to("descend", 2.2, Pose::new(seated, yaw), Low, 0.0);
    peg.hold("release", 0.6, Low, 1.0);
    let up = Pose::new(seated + Vector3::new(0.0, 0.0, 0.07), yaw);
    peg.move_to("retreat", 1.6, up, High, 1.0);
    let peg_segments = peg.segments;
    let switch = peg_segments[2].start;

    let mut holder = Script::new(hole, 0.0, &mut rng);
    holder.hold("hold", switch, High, 0.0);
    holder.hold("yield", 100.0, Low, 0.0);
    vec![peg_segments, holder.segments]
}

impl Expert {
    pub fn new(world: &World, config: ExpertConfig) -> Result<Self, ExpertError> {
        if world.task != config.task {
            return Err(ExpertError::TaskMismatch { expected: config.task, got: world.task });
        }
        for arm in 0..world.n_arms() {
            find_preset(&config.presets, config.task, arm)?;
        }
        let mut noise = Noise::new(&config);
        let j = config.timing_jitter;
        let arms = match config.task {
            TaskId::Grind => vec![grind_script(world, &mut noise, j)],
            TaskId::Erase => vec![erase_script(world, &mut noise, j)],
            TaskId::RoundInsert | TaskId::CuboidInsert => insert_scripts(world, &mut noise, j),
        };
        Ok(Self { presets: config.presets.clone(), config, arms, dt: world.config.dt() })
    }

    pub fn config(&self) -> &ExpertConfig {
        &self.config
    }

    fn segment(&self, arm: usize, t: f64) -> &Segment {
        let segs = &self.arms[arm];
        segs.iter().rev().find(|s| s.start <= t).unwrap_or(&segs[0])
    }

    /// Phase name active for `arm` at `tick`.
    pub fn phase(&self, arm: usize, tick: usize) -> &'static str {
        self.segment(arm, tick as f64 * self.dt).name
    }

    /// Reference action of every arm at `tick`.
    pub fn expert_action(&self, tick: usize) -> Vec<Action16> {
        let t = tick as f64 * self.dt;
        (0..self.arms.len())
            .map(|arm| {
                let seg = self.segment(arm, t);
                let preset = find_preset(&self.presets, self.config.task, arm).expect("checked in new");
                Action16::new(&seg.target(t), seg.gripper, &preset.get(seg.mode).0)
            })
            .collect()
    }
}

/// Converts actions into controller references.
pub fn commands_from_actions(actions: &[Action16]) -> Vec<ArmCommand> {
    actions
        .iter()
        .map(|a| ArmCommand {
            target: a.pose().unwrap_or_default(),
            stiffness: crate::compliance::StiffnessDiag(a.stiffness()),
            gripper: a.gripper(),
        })
        .collect()
}

/// Task outcome of a finished world.
pub fn outcome(world: &World) -> Outcome {
    Outcome {
        fine_fraction: world.fine_fraction(),
        erased_fraction: world.erased_fraction(),
        inserted: world.task.is_insertion().then(|| world.task_insert_check()),
        damaged: world.damaged(),
    }
}

/// Whether an outcome passes the expert acceptance bar for its task.
pub fn expert_succeeded(task: TaskId, o: &Outcome) -> bool {
    match task {
        TaskId::Grind => o.fine_fraction.is_some_and(|f| f >= 0.7),
        TaskId::Erase => !o.damaged && o.erased_fraction.is_some_and(|f| f >= 0.99),
        TaskId::RoundInsert | TaskId::CuboidInsert => o.inserted == Some(true),
    }
}

/// Runs one expert episode in a fresh world, recording every tick.
pub fn run_expert_episode(sim: &SimConfig, cfg: &ExpertConfig) -> Result<(Episode, World), ExpertError> {
    let mut world = World::new(cfg.task, sim.clone(), cfg.seed);
    let expert = Expert::new(&world, cfg.clone())?;
    let meta = EpisodeMeta {
        version: EPISODE_VERSION,
        id: format!("{}-{:06}", cfg.task.name(), cfg.seed),
        task: cfg.task,
        seed: cfg.seed,
        control_rate: sim.control_rate,
        grid_size: sim.grid_size,
        presets: cfg.presets.clone(),
        date: String::new(),
        human: false,
        outcome: Outcome::default(),
    };
    let mut episode = Episode::new(meta, world.n_arms());
    for tick in 0..sim.episode_ticks(cfg.task) {
        let actions = expert.expert_action(tick);
        record_tick(&mut episode, &world, &actions);
        world.step_controlled(&commands_from_actions(&actions))?;
    }
    episode.meta.outcome = outcome(&world);
    Ok((episode, world))
}

/// Appends the current observation of every arm and the actions about to
/// be executed.
pub fn record_tick(episode: &mut Episode, world: &World, actions: &[Action16]) {
    let frames: Vec<_> = (0..world.n_arms()).map(|a| world.render_frame(a)).collect();
    let raw: Vec<_> = actions.iter().map(|a| a.0).collect();
    let normal: Vec<f64> = world.arms.iter().map(|a| a.normal_force).collect();
    episode.push(&frames, &raw, &normal);
}

/// Collects `n` successful expert episodes with seeds `seed, seed+1, …`.
/// A failed rollout aborts with `ExpertFailure`.
pub fn collect_demos(sim: &SimConfig, cfg: &ExpertConfig, n: usize) -> Result<Vec<Episode>, ExpertError> {
    (0..n)
        .map(|i| {
            let c = ExpertConfig { seed: cfg.seed + i as u64, ..cfg.clone() };
            let (ep, _) = run_expert_episode(sim, &c)?;
            if !expert_succeeded(c.task, &ep.meta.outcome) {
                return Err(ExpertError::ExpertFailure { seed: c.seed, reason: format!("{:?}", ep.meta.outcome) });
            }
            Ok(ep)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_mismatch() {
        let w = World::new(TaskId::Erase, SimConfig::default(), 0);
        assert!(matches!(Expert::new(&w, ExpertConfig::for_task(TaskId::Grind, 0)), Err(ExpertError::TaskMismatch { .. })));
    }

    #[test]
    fn grind_orbit_traces_circle_with_low_stiffness() {
        let w = World::new(TaskId::Grind, SimConfig::default(), 0);
        let cfg = ExpertConfig { position_noise: 0.0, rotation_noise: 0.0, timing_jitter: 0.0, ..ExpertConfig::for_task(TaskId::Grind, 0) };
        let e = Expert::new(&w, cfg).unwrap();
        let low = find_preset(&default_presets(), TaskId::Grind, 0).unwrap().low;
        let high = find_preset(&default_presets(), TaskId::Grind, 0).unwrap().high;
        let mut orbit_ticks = 0;
        for tick in 0..2000 {
            let a = e.expert_action(tick)[0];
            match e.phase(0, tick) {
                "orbit" => {
                    orbit_ticks += 1;
                    let p = a.pose().unwrap().position;
                    assert!((p.xy().norm() - 0.025).abs() < 1e-9);
                    assert_eq!(a.stiffness(), low.0);
                }
                "approach" | "retreat" | "look" => assert_eq!(a.stiffness(), high.0),
                _ => {}
            }
        }
        assert!(orbit_ticks > 500);
    }

    #[test]
    fn seeds_differ_with_same_phases() {
        let w = World::new(TaskId::Erase, SimConfig::default(), 0);
        let a = Expert::new(&w, ExpertConfig { timing_jitter: 0.0, ..ExpertConfig::for_task(TaskId::Erase, 1) }).unwrap();
        let b = Expert::new(&w, ExpertConfig { timing_jitter: 0.0, ..ExpertConfig::for_task(TaskId::Erase, 2) }).unwrap();
        let mut dist = 0.0;
        for t in 0..1200 {
            assert_eq!(a.phase(0, t), b.phase(0, t));
            let (x, y) = (a.expert_action(t)[0], b.expert_action(t)[0]);
            dist += x.0.iter().zip(y.0).map(|(p, q)| (p - q).abs()).sum::<f64>();
        }
        assert!(dist > 1e-3);
    }

    #[test]
    fn targets_continuous_per_tick() {
        for task in TaskId::ALL {
            let sim = SimConfig::default();
            let w = World::new(task, sim.clone(), 4);
            let e = Expert::new(&w, ExpertConfig::for_task(task, 4)).unwrap();
            let mut prev = e.expert_action(0);
            for t in 1..sim.episode_ticks(task) {
                let cur = e.expert_action(t);
                for (p, c) in prev.iter().zip(&cur) {
                    let d = (p.pose().unwrap().position - c.pose().unwrap().position).norm();
                    assert!(d < 0.005, "{task} tick {t}: {d}");
                }
                prev = cur;
            }
        }
    }

    #[test]
    fn stiffness_only_from_presets() {
        let presets = default_presets();
        for task in TaskId::ALL {
            let w = World::new(task, SimConfig::default(), 0);
            let e = Expert::new(&w, ExpertConfig::for_task(task, 0)).unwrap();
            for t in (0..400).step_by(7) {
                for (arm, a) in e.expert_action(t).iter().enumerate() {
                    let p = find_preset(&presets, task, arm).unwrap();
                    assert!(a.stiffness() == p.low.0 || a.stiffness() == p.high.0);
                }
            }
        }
    }

    #[test]
    fn zero_demos_is_empty() {
        let eps = collect_demos(&SimConfig::default(), &ExpertConfig::for_task(TaskId::Erase, 0), 0).unwrap();
        assert!(eps.is_empty());
    }
}
