//! Mini-batch training of the denoiser with the x₀ reconstruction loss, and
//! of the same network as a direct chunk regressor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, clip_grad_norm, AdamConfig, AdamState, AutodiffError, Graph, Tensor};
use crate::compliance::StiffnessBounds;
use crate::datastore::{compute_stats, sample_indices, DatastoreError, Episode};
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserError};
use crate::diffusion::{build_schedule, forward_noise, gaussian_chunk, DiffusionError, NoiseSchedule, ScheduleKind};
use crate::runtime::{ArmModel, Normalizer};
use crate::types::{ActionChunk, NormalizedObservation, ACTION_DIM};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DatastoreError),
    #[error(transparent)]
    Model(#[from] DenoiserError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub log_every: usize,
    pub seed: u64,
    pub schedule: ScheduleKind,
    pub optimizer: AdamConfig,
    pub model: DenoiserConfig,
    pub bounds: StiffnessBounds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            grad_clip: 1.0,
            log_every: 100,
            seed: 0,
            schedule: ScheduleKind::SquaredCosine,
            optimizer: AdamConfig { lr: 3e-4, ..AdamConfig::default() },
            model: DenoiserConfig::default(),
            bounds: StiffnessBounds::default(),
        }
    }
}

/// What the network is trained to output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Clean chunk from a noised chunk at a uniformly drawn step.
    Diffusion,
    /// Chunk regression from a zero input at step 0.
    Regression,
}

/// One normalized training example.
#[derive(Debug, Clone)]
pub struct Example {
    pub observation: NormalizedObservation,
    pub chunk: ActionChunk,
}

/// Normalized examples drawn uniformly over the recorded ticks of one arm.
pub fn draw_examples(
    episodes: &[Episode],
    arm: usize,
    normalizer: &Normalizer,
    horizon: usize,
    batch: usize,
    rng: &mut impl Rng,
) -> Vec<Example> {
    sample_indices(episodes, batch, rng)
        .into_iter()
        .map(|(e, t)| Example {
            observation: normalizer.normalize_observation(&episodes[e].observation(arm, t)),
            chunk: normalizer.normalize_chunk(&episodes[e].chunk(arm, t, horizon)),
        })
        .collect()
}

/// Forward, backward and Adam update on one batch; returns the loss.
pub fn train_step(
    model: &mut Denoiser,
    examples: &[Example],
    objective: Objective,
    schedule: &NoiseSchedule,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<f64, TrainError> {
    let h = model.config().horizon;
    let (inputs, steps): (Vec<ActionChunk>, Vec<usize>) = examples
        .iter()
        .map(|ex| match objective {
            Objective::Diffusion => {
                let n = rng.gen_range(1..=schedule.steps());
                let eps = gaussian_chunk(h, rng);
                (forward_noise(&ex.chunk, n, &eps, schedule).expect("same horizon"), n)
            }
            Objective::Regression => (ActionChunk::zeros(h), 0),
        })
        .unzip();
    let (loss, grads) = {
        let mut graph = Graph::new();
        let p = model.bind(&mut graph, true);
        let obs: Vec<&NormalizedObservation> = examples.iter().map(|e| &e.observation).collect();
        let memory = model.encode_graph(&mut graph, &p, &obs)?;
        let noisy: Vec<&ActionChunk> = inputs.iter().collect();
        let pred = model.decode_graph(&mut graph, &p, memory, &noisy, &steps)?;
        let target: Vec<f64> = examples.iter().flat_map(|e| e.chunk.data().iter().copied()).collect();
        let target = graph.constant(Tensor::matrix(examples.len() * h, ACTION_DIM, target)?);
        let loss = graph.mse(pred, target)?;
        let mut g = graph.backward(loss)?;
        let grads: Vec<Tensor> = p
            .vars()
            .iter()
            .zip(model.params())
            .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (graph.value(loss).item(), grads)
    };
    let mut grads = grads;
    if cfg.grad_clip > 0.0 {
        clip_grad_norm(&mut grads, cfg.grad_clip);
    }
    adam_step(model.params_mut(), &grads, adam, &cfg.optimizer);
    Ok(loss)
}

/// Result of fitting one arm.
#[derive(Debug, Clone)]
pub struct TrainedArm {
    pub model: ArmModel,
    /// Loss of every step.
    pub losses: Vec<f64>,
}

/// Fits a fresh network to one arm of the dataset. `log` receives
/// `(step, mean loss over the last log_every steps)`.
pub fn train_arm(
    episodes: &[Episode],
    arm: usize,
    cfg: &TrainConfig,
    objective: Objective,
    mut log: impl FnMut(usize, f64),
) -> Result<TrainedArm, TrainError> {
    let normalizer = Normalizer::new(compute_stats(episodes, arm)?, cfg.bounds);
    let model_cfg = DenoiserConfig { seed: cfg.model.seed ^ arm as u64, ..cfg.model.clone() };
    let mut model = Denoiser::new(model_cfg)?;
    let schedule = build_schedule(cfg.schedule, model.config().n_diffusion_steps)?;
    let mut adam = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(arm as u64 * 0x1000_0000));
    let mut losses = Vec::with_capacity(cfg.steps);
    let every = cfg.log_every.max(1);
    for step in 1..=cfg.steps {
        let batch = draw_examples(episodes, arm, &normalizer, model.config().horizon, cfg.batch_size, &mut rng);
        let loss = train_step(&mut model, &batch, objective, &schedule, &mut adam, cfg, &mut rng)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step, loss });
        }
        losses.push(loss);
        if step % every == 0 || step == cfg.steps {
            let from = losses.len().saturating_sub(every);
            let window = &losses[from..];
            log(step, window.iter().sum::<f64>() / window.len() as f64);
        }
    }
    Ok(TrainedArm { model: ArmModel { denoiser: model, normalizer }, losses })
}
