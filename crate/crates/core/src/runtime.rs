//! Normalization, chunk scheduling and temporal ensembling: turning sampled
//! action chunks into a per-tick action stream.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compliance::{StiffnessBounds, StiffnessDiag};
use crate::autodiff::{Checkpoint, Tensor};
use crate::datastore::{DimStats, Episode, EpisodeMeta, NormalizationStats, EPISODE_VERSION};
use crate::denoiser::Denoiser;
use crate::diffusion::{build_schedule, sample, DiffusionError, NoiseSchedule, ScheduleKind};
use crate::experts::{commands_from_actions, outcome, record_tick};
use crate::geometry::Pose;
use crate::sim::{SimError, World};
use crate::types::{
    Action16, ActionChunk, NormalizedObservation, ObsFrame, Observation, ACTION_DIM, GRIPPER_INDEX, POSE_DIM,
    WRENCH_DIM,
};

/// Standard deviations or ranges below this mark a dimension constant.
pub const CONSTANT_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("normalization statistics missing for arm {0}")]
    MissingStats(usize),
    #[error("no chunk covers tick {0}")]
    NoCoverage(usize),
    #[error("environment terminated at tick {tick}: {source}")]
    EnvTerminated { tick: usize, source: SimError },
    #[error("inference failed: {0}")]
    InferenceFailure(String),
}

impl From<DiffusionError> for RuntimeError {
    fn from(e: DiffusionError) -> Self {
        RuntimeError::InferenceFailure(e.to_string())
    }
}

/// Maps raw observations and actions to network space and back. Pose and
/// wrench dimensions are z-scored; gripper and stiffness are min-max scaled
/// to [−1, 1]. Constant dimensions map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub stats: NormalizationStats,
    pub bounds: StiffnessBounds,
}

fn zscore(x: f64, mean: f64, std: f64) -> f64 {
    if std > CONSTANT_EPS { (x - mean) / std } else { 0.0 }
}

fn unzscore(y: f64, mean: f64, std: f64) -> f64 {
    if std > CONSTANT_EPS { y * std + mean } else { mean }
}

fn minmax(x: f64, min: f64, max: f64) -> f64 {
    if max - min > CONSTANT_EPS { 2.0 * (x - min) / (max - min) - 1.0 } else { 0.0 }
}

fn unminmax(y: f64, min: f64, max: f64) -> f64 {
    if max - min > CONSTANT_EPS { (y + 1.0) * 0.5 * (max - min) + min } else { min }
}

impl Normalizer {
    pub fn new(stats: NormalizationStats, bounds: StiffnessBounds) -> Self {
        Self { stats, bounds }
    }

    /// Whether action dimension `i` is z-scored (pose) or min-max (rest).
    fn action_zscored(i: usize) -> bool {
        i < POSE_DIM
    }

    fn frame(&self, f: &ObsFrame) -> ObsFrame {
        let s = &self.stats;
        ObsFrame {
            pose: std::array::from_fn(|i| zscore(f.pose[i], s.pose.mean[i], s.pose.std[i])),
            wrench: std::array::from_fn(|i| zscore(f.wrench[i], s.wrench.mean[i], s.wrench.std[i])),
            grid: f.grid.clone(),
        }
    }

    pub fn normalize_observation(&self, obs: &Observation) -> NormalizedObservation {
        NormalizedObservation(Observation { previous: self.frame(&obs.previous), current: self.frame(&obs.current) })
    }

    pub fn denormalize_frame(&self, f: &ObsFrame) -> ObsFrame {
        let s = &self.stats;
        ObsFrame {
            pose: std::array::from_fn(|i| unzscore(f.pose[i], s.pose.mean[i], s.pose.std[i])),
            wrench: std::array::from_fn(|i| unzscore(f.wrench[i], s.wrench.mean[i], s.wrench.std[i])),
            grid: f.grid.clone(),
        }
    }

    pub fn normalize_action(&self, a: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        let s = &self.stats.action;
        std::array::from_fn(|i| {
            if Self::action_zscored(i) {
                zscore(a[i], s.mean[i], s.std[i])
            } else {
                minmax(a[i], s.min[i], s.max[i])
            }
        })
    }

    /// Inverse of [`normalize_action`](Self::normalize_action) without any
    /// clamping.
    pub fn denormalize_action_raw(&self, y: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        let s = &self.stats.action;
        std::array::from_fn(|i| {
            if Self::action_zscored(i) {
                unzscore(y[i], s.mean[i], s.std[i])
            } else {
                unminmax(y[i], s.min[i], s.max[i])
            }
        })
    }

    /// Denormalized action with the stiffness clamped into bounds.
    pub fn denormalize_action(&self, y: &[f64; ACTION_DIM]) -> Action16 {
        let mut a = self.denormalize_action_raw(y);
        let mut k = [0.0; 6];
        k.copy_from_slice(&a[GRIPPER_INDEX + 1..]);
        a[GRIPPER_INDEX + 1..].copy_from_slice(&StiffnessDiag::clamped(k, self.bounds).0);
        Action16(a)
    }

    pub fn normalize_chunk(&self, c: &ActionChunk) -> ActionChunk {
        let actions: Vec<Action16> = c.actions().iter().map(|a| Action16(self.normalize_action(&a.0))).collect();
        ActionChunk::from_actions(&actions)
    }

    pub fn denormalize_chunk(&self, c: &ActionChunk) -> ActionChunk {
        let actions: Vec<Action16> = c.actions().iter().map(|a| self.denormalize_action(&a.0)).collect();
        ActionChunk::from_actions(&actions)
    }

    /// Dimensions (pose 0..9, wrench 9..15) whose statistics are degenerate.
    pub fn constant_observation_dims(&self) -> Vec<usize> {
        let s = &self.stats;
        let pose = (0..POSE_DIM).filter(|&i| s.pose.std[i] <= CONSTANT_EPS);
        let wrench = (0..WRENCH_DIM).filter(|&i| s.wrench.std[i] <= CONSTANT_EPS).map(|i| POSE_DIM + i);
        pose.chain(wrench).collect()
    }
}

/// Overlapping chunks with their birth ticks.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleBuffer {
    entries: VecDeque<(ActionChunk, usize)>,
    /// Exponential decay rate per tick of birth offset.
    pub decay: f64,
}

impl EnsembleBuffer {
    pub fn new(decay: f64) -> Self {
        Self { entries: VecDeque::new(), decay }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds a chunk born at `tick`, dropping chunks that can no longer
    /// cover `tick` or later.
    pub fn push(&mut self, chunk: ActionChunk, tick: usize) {
        self.entries.retain(|(c, birth)| birth + c.horizon() > tick);
        self.entries.push_back((chunk, tick));
    }

    /// Chunk and birth tick of entry `i`, as indexed by [`Self::weights`].
    pub fn entry(&self, i: usize) -> (&ActionChunk, usize) {
        let (c, b) = &self.entries[i];
        (c, *b)
    }

    /// Normalized weights of the chunks covering `tick`, oldest first, as
    /// `(entry index, weight)`.
    pub fn weights(&self, tick: usize) -> Vec<(usize, f64)> {
        let covering: Vec<usize> = (0..self.entries.len())
            .filter(|&i| {
                let (c, birth) = &self.entries[i];
                *birth <= tick && tick < birth + c.horizon()
            })
            .collect();
        let Some(oldest) = covering.iter().map(|&i| self.entries[i].1).min() else { return Vec::new() };
        // Older chunks weigh more: exp(−m·(birth − oldest birth)). Offset 0
        // always gets weight 1, which keeps m = ∞ well defined.
        let raw: Vec<f64> = covering
            .iter()
            .map(|&i| {
                let offset = (self.entries[i].1 - oldest) as f64;
                if offset == 0.0 { 1.0 } else { (-self.decay * offset).exp() }
            })
            .collect();
        let total: f64 = raw.iter().sum();
        covering.into_iter().zip(raw).map(|(i, w)| (i, w / total)).collect()
    }
}

/// Weighted average over all chunks covering `tick`.
pub fn ensemble_action(buffer: &EnsembleBuffer, tick: usize) -> Result<Action16, RuntimeError> {
    let weights = buffer.weights(tick);
    if weights.is_empty() {
        return Err(RuntimeError::NoCoverage(tick));
    }
    let mut out = [0.0; ACTION_DIM];
    for (i, w) in weights {
        let (chunk, birth) = &buffer.entries[i];
        let a = chunk.action(tick - birth);
        for (o, x) in out.iter_mut().zip(a.0) {
            *o += w * x;
        }
    }
    Ok(Action16(out))
}

/// Re-orthonormalizes the rotation columns and clamps gripper and stiffness.
pub fn sanitize_action(a: &Action16, bounds: StiffnessBounds) -> Action16 {
    let pose = a.pose().unwrap_or_else(|_| {
        let p = a.pose9();
        Pose::from_translation(p[0], p[1], p[2])
    });
    Action16::new(&pose, a.gripper().clamp(0.0, 1.0), &StiffnessDiag::clamped(a.stiffness(), bounds).0)
}

/// Anything that produces a denormalized action chunk from an observation.
pub trait ChunkPolicy {
    fn horizon(&self) -> usize;
    fn sample_chunk(&mut self, arm: usize, obs: &Observation, seed: u64) -> Result<ActionChunk, RuntimeError>;
}

/// One denoiser and its normalizer per arm.
#[derive(Debug, Clone)]
pub struct ArmModel {
    pub denoiser: Denoiser,
    pub normalizer: Normalizer,
}

#[derive(Debug, Clone)]
pub struct DiffusionPolicy {
    pub arms: Vec<ArmModel>,
    pub schedule: NoiseSchedule,
    pub n_infer_steps: usize,
}

impl ChunkPolicy for DiffusionPolicy {
    fn horizon(&self) -> usize {
        self.arms[0].denoiser.config().horizon
    }

    fn sample_chunk(&mut self, arm: usize, obs: &Observation, seed: u64) -> Result<ActionChunk, RuntimeError> {
        let m = self.arms.get(arm).ok_or(RuntimeError::MissingStats(arm))?;
        let nobs = m.normalizer.normalize_observation(obs);
        let tokens = m.denoiser.encode_observation(&nobs).map_err(|e| RuntimeError::InferenceFailure(e.to_string()))?;
        let chunk = sample(&m.denoiser, &tokens, &self.schedule, self.n_infer_steps, seed)?;
        if !chunk.is_finite() {
            return Err(RuntimeError::InferenceFailure("non-finite chunk".into()));
        }
        Ok(m.normalizer.denormalize_chunk(&chunk))
    }
}

impl ArmModel {
    /// Denoiser weights plus the normalization statistics as extra tensors.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.denoiser.to_checkpoint();
        let s = &self.normalizer.stats;
        for (name, dims) in [("pose", &s.pose), ("wrench", &s.wrench), ("action", &s.action)] {
            for (field, v) in [("mean", &dims.mean), ("std", &dims.std), ("min", &dims.min), ("max", &dims.max)] {
                ck.tensors.push((format!("norm.{name}.{field}"), Tensor::vector(v.clone())));
            }
        }
        let b = &self.normalizer.bounds;
        let bounds = vec![b.translational.0, b.translational.1, b.rotational.0, b.rotational.1];
        ck.tensors.push(("norm.bounds".into(), Tensor::vector(bounds)));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, RuntimeError> {
        let denoiser = Denoiser::from_checkpoint(ck).map_err(|e| RuntimeError::InferenceFailure(e.to_string()))?;
        let get = |name: String| -> Result<Vec<f64>, RuntimeError> {
            ck.get(&name).map(|t| t.data().to_vec()).ok_or(RuntimeError::MissingStats(0))
        };
        let dims = |name: &str| -> Result<DimStats, RuntimeError> {
            Ok(DimStats {
                mean: get(format!("norm.{name}.mean"))?,
                std: get(format!("norm.{name}.std"))?,
                min: get(format!("norm.{name}.min"))?,
                max: get(format!("norm.{name}.max"))?,
            })
        };
        let stats = NormalizationStats { pose: dims("pose")?, wrench: dims("wrench")?, action: dims("action")? };
        let b = get("norm.bounds".into())?;
        if b.len() != 4 || stats.pose.mean.len() != POSE_DIM || stats.action.mean.len() != ACTION_DIM {
            return Err(RuntimeError::MissingStats(0));
        }
        let bounds = StiffnessBounds { translational: (b[0], b[1]), rotational: (b[2], b[3]) };
        Ok(Self { denoiser, normalizer: Normalizer::new(stats, bounds) })
    }
}

/// Manifest of a saved multi-arm policy directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyManifest {
    pub task: crate::types::TaskId,
    pub schedule: ScheduleKind,
    /// Checkpoint file per arm, relative to the directory.
    pub arms: Vec<String>,
}

pub const POLICY_MANIFEST: &str = "policy.json";

/// Writes `policy.json` and one checkpoint per arm into `dir`.
pub fn save_policy(
    dir: &std::path::Path,
    task: crate::types::TaskId,
    schedule: ScheduleKind,
    arms: &[ArmModel],
) -> Result<(), crate::autodiff::AutodiffError> {
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for (i, a) in arms.iter().enumerate() {
        let name = format!("arm{i}.ckpt");
        a.to_checkpoint().save(&dir.join(&name))?;
        names.push(name);
    }
    let manifest = PolicyManifest { task, schedule, arms: names };
    std::fs::write(dir.join(POLICY_MANIFEST), serde_json::to_string_pretty(&manifest).expect("manifest"))?;
    Ok(())
}

/// Loads a directory written by [`save_policy`].
pub fn load_policy(
    dir: &std::path::Path,
    n_infer_steps: usize,
) -> Result<(crate::types::TaskId, DiffusionPolicy), RuntimeError> {
    let fail = |e: String| RuntimeError::InferenceFailure(format!("loading policy from {}: {e}", dir.display()));
    let text = std::fs::read_to_string(dir.join(POLICY_MANIFEST)).map_err(|e| fail(e.to_string()))?;
    let m: PolicyManifest = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
    let arms = m
        .arms
        .iter()
        .map(|name| ArmModel::from_checkpoint(&Checkpoint::load(&dir.join(name)).map_err(|e| fail(e.to_string()))?))
        .collect::<Result<Vec<_>, _>>()?;
    if arms.len() != m.task.n_arms() {
        return Err(fail(format!("{} arm checkpoints for task {}", arms.len(), m.task)));
    }
    let steps = arms[0].denoiser.config().n_diffusion_steps;
    let schedule = build_schedule(m.schedule, steps)?;
    Ok((m.task, DiffusionPolicy { arms, schedule, n_infer_steps }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub replan_interval: usize,
    pub ensemble_decay: f64,
    pub n_infer_steps: usize,
    /// Episode length; 0 uses the task default.
    pub ticks: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { replan_interval: 16, ensemble_decay: 0.1, n_infer_steps: 16, ticks: 0 }
    }
}

fn chunk_seed(seed: u64, tick: usize, arm: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((tick as u64) << 8) ^ arm as u64
}

/// Closed-loop rollout: every `replan_interval` ticks each arm samples a
/// chunk from its current observation; the executed action is the
/// ensemble over live chunks.
pub fn run_policy(
    policy: &mut impl ChunkPolicy,
    world: &mut World,
    cfg: &RolloutConfig,
    bounds: StiffnessBounds,
    seed: u64,
) -> Result<Episode, RuntimeError> {
    let n_arms = world.n_arms();
    let ticks = if cfg.ticks > 0 { cfg.ticks } else { world.config.episode_ticks(world.task) };
    let meta = EpisodeMeta {
        version: EPISODE_VERSION,
        id: format!("{}-rollout-{seed:06}", world.task.name()),
        task: world.task,
        seed,
        control_rate: world.config.control_rate,
        grid_size: world.config.grid_size,
        presets: Vec::new(),
        date: String::new(),
        human: false,
        outcome: Default::default(),
    };
    let mut episode = Episode::new(meta, n_arms);
    let mut buffers: Vec<EnsembleBuffer> = (0..n_arms).map(|_| EnsembleBuffer::new(cfg.ensemble_decay)).collect();
    let replan = cfg.replan_interval.max(1);
    for tick in 0..ticks {
        if tick % replan == 0 {
            for (arm, buf) in buffers.iter_mut().enumerate() {
                let chunk = policy.sample_chunk(arm, &world.observe(arm), chunk_seed(seed, tick, arm))?;
                buf.push(chunk, tick);
            }
        }
        let actions = buffers
            .iter()
            .map(|b| ensemble_action(b, tick).map(|a| sanitize_action(&a, bounds)))
            .collect::<Result<Vec<_>, _>>()?;
        record_tick(&mut episode, world, &actions);
        world
            .step_controlled(&commands_from_actions(&actions))
            .map_err(|source| RuntimeError::EnvTerminated { tick, source })?;
    }
    episode.meta.outcome = outcome(world);
    Ok(episode)
}
