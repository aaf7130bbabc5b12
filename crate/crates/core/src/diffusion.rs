//! Noise schedules, forward noising and the deterministic DDIM sampler for
//! an x₀-predicting denoiser.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{Denoiser, DenoiserError, ObservationTokens};
use crate::types::{ActionChunk, ACTION_DIM};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("unknown schedule kind {0:?}")]
    UnknownScheduleKind(String),
    #[error("schedule needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("step {n} outside 0..={max}")]
    StepOutOfRange { n: usize, max: usize },
    #[error("ddim step requires n_prev < n, got n={n}, n_prev={n_prev}")]
    StepOrderViolation { n: usize, n_prev: usize },
    #[error("chunk shapes differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("inference steps must be in 1..={max}, got {got}")]
    InvalidInferenceSteps { got: usize, max: usize },
    #[error(transparent)]
    Model(#[from] DenoiserError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    SquaredCosine,
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = DiffusionError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "squared-cosine" | "cosine" => Ok(Self::SquaredCosine),
            "linear" => Ok(Self::Linear),
            other => Err(DiffusionError::UnknownScheduleKind(other.to_string())),
        }
    }
}

const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

/// Cumulative signal fractions `alpha_bar[0..=N]` with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bar[n]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, n: usize) -> Result<(), DiffusionError> {
        if n > self.steps() {
            return Err(DiffusionError::StepOutOfRange { n, max: self.steps() });
        }
        Ok(())
    }
}

pub fn build_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule, DiffusionError> {
    if steps < 2 {
        return Err(DiffusionError::TooFewSteps(steps));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::SquaredCosine => {
            let f = |t: f64| {
                let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            (1..=steps).map(|i| (1.0 - f(i as f64) / f((i - 1) as f64)).min(MAX_BETA)).collect()
        }
        ScheduleKind::Linear => {
            // the usual 1e-4..0.02 range over 1000 steps, rescaled to `steps`
            let scale = 1000.0 / steps as f64;
            let (lo, hi) = (1e-4 * scale, 0.02 * scale);
            (0..steps)
                .map(|i| (lo + (hi - lo) * i as f64 / (steps - 1) as f64).min(MAX_BETA))
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { alpha_bar })
}

/// A chunk of i.i.d. standard normal noise.
pub fn gaussian_chunk(horizon: usize, rng: &mut impl rand::Rng) -> ActionChunk {
    let data = (0..horizon * ACTION_DIM).map(|_| StandardNormal.sample(rng)).collect();
    ActionChunk::from_vec(horizon, data).expect("sized")
}

fn same_shape(a: &ActionChunk, b: &ActionChunk) -> Result<(), DiffusionError> {
    if a.horizon() != b.horizon() {
        return Err(DiffusionError::ShapeMismatch(a.horizon(), b.horizon()));
    }
    Ok(())
}

/// `√ᾱₙ·a⁰ + √(1−ᾱₙ)·ε`.
pub fn forward_noise(
    a0: &ActionChunk,
    n: usize,
    eps: &ActionChunk,
    sched: &NoiseSchedule,
) -> Result<ActionChunk, DiffusionError> {
    sched.check(n)?;
    same_shape(a0, eps)?;
    let ab = sched.alpha_bar(n);
    let (s, c) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = a0.data().iter().zip(eps.data()).map(|(x, e)| s * x + c * e).collect();
    Ok(ActionChunk::from_vec(a0.horizon(), data).expect("sized"))
}

/// One deterministic DDIM update from step `n` to `n_prev` given the
/// clean-sample estimate.
pub fn ddim_step(
    a_n: &ActionChunk,
    a0_hat: &ActionChunk,
    n: usize,
    n_prev: usize,
    sched: &NoiseSchedule,
) -> Result<ActionChunk, DiffusionError> {
    sched.check(n)?;
    if n_prev >= n {
        return Err(DiffusionError::StepOrderViolation { n, n_prev });
    }
    same_shape(a_n, a0_hat)?;
    let ab = sched.alpha_bar(n);
    let ab_prev = sched.alpha_bar(n_prev);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let data = a_n
        .data()
        .iter()
        .zip(a0_hat.data())
        .map(|(x, x0)| {
            let eps = (x - sa * x0) / sn;
            pa * x0 + pn * eps
        })
        .collect();
    Ok(ActionChunk::from_vec(a_n.horizon(), data).expect("sized"))
}

/// Anything that maps `(noisy chunk, step, observation tokens)` to a clean
/// chunk estimate.
pub trait CleanPredictor {
    fn horizon(&self) -> usize;
    fn predict_clean(
        &self,
        noisy: &ActionChunk,
        n: usize,
        tokens: &ObservationTokens,
    ) -> Result<ActionChunk, DiffusionError>;
}

impl CleanPredictor for Denoiser {
    fn horizon(&self) -> usize {
        self.config().horizon
    }

    fn predict_clean(
        &self,
        noisy: &ActionChunk,
        n: usize,
        tokens: &ObservationTokens,
    ) -> Result<ActionChunk, DiffusionError> {
        Ok(self.predict_clean_chunk(noisy, n, tokens)?)
    }
}

/// Mean squared error between `a0` and the model's estimate from the
/// noised input.
pub fn training_loss(
    a0: &ActionChunk,
    n: usize,
    eps: &ActionChunk,
    tokens: &ObservationTokens,
    model: &impl CleanPredictor,
    sched: &NoiseSchedule,
) -> Result<f64, DiffusionError> {
    let noisy = forward_noise(a0, n, eps, sched)?;
    let pred = model.predict_clean(&noisy, n, tokens)?;
    same_shape(a0, &pred)?;
    let sq: f64 = a0.data().iter().zip(pred.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / a0.data().len() as f64)
}

/// Evenly strided, strictly decreasing steps from `N` to 0 (inclusive).
pub fn inference_steps(total: usize, count: usize) -> Result<Vec<usize>, DiffusionError> {
    if count == 0 || count > total {
        return Err(DiffusionError::InvalidInferenceSteps { got: count, max: total });
    }
    Ok((0..=count).rev().map(|i| (total * i + count / 2) / count).collect())
}

/// DDIM sampling from pure noise; deterministic given `seed` and weights.
pub fn sample(
    model: &impl CleanPredictor,
    tokens: &ObservationTokens,
    sched: &NoiseSchedule,
    n_infer_steps: usize,
    seed: u64,
) -> Result<ActionChunk, DiffusionError> {
    let steps = inference_steps(sched.steps(), n_infer_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian_chunk(model.horizon(), &mut rng);
    for pair in steps.windows(2) {
        let (n, n_prev) = (pair[0], pair[1]);
        let x0 = model.predict_clean(&x, n, tokens)?;
        x = ddim_step(&x, &x0, n, n_prev, sched)?;
    }
    Ok(x)
}
