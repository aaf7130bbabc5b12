//! Diffusion versus regression on a two-mode toy problem: every chunk is
//! all +1 or all −1 for the same observation. DDIM sampling keeps both
//! modes; the regressor collapses to their average.
//!
//! `cargo run --release --example ddim_bimodal -- [steps]`

use compliant_diffusion::autodiff::{AdamConfig, AdamState};
use compliant_diffusion::denoiser::{Denoiser, DenoiserConfig};
use compliant_diffusion::diffusion::{build_schedule, sample, ScheduleKind};
use compliant_diffusion::train::{train_step, Example, Objective, TrainConfig};
use compliant_diffusion::types::{ActionChunk, NormalizedObservation, ObsFrame, Observation, ACTION_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn observation() -> NormalizedObservation {
    NormalizedObservation(Observation { previous: ObsFrame::zeros(4), current: ObsFrame::zeros(4) })
}

fn fit(objective: Objective, steps: usize) -> Denoiser {
    let model = DenoiserConfig {
        d_model: 32,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 2,
        horizon: 4,
        n_diffusion_steps: 50,
        patch_size: 2,
        grid_size: 4,
        ffn_mult: 2,
        ..DenoiserConfig::default()
    };
    let cfg = TrainConfig { optimizer: AdamConfig { lr: 2e-3, ..AdamConfig::default() }, model, ..TrainConfig::default() };
    let mut net = Denoiser::new(cfg.model.clone()).unwrap();
    let sched = build_schedule(ScheduleKind::SquaredCosine, 50).unwrap();
    let mut adam = AdamState::new(net.params());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for step in 1..=steps {
        let batch: Vec<Example> = (0..32)
            .map(|_| {
                let mode = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let data = (0..4 * ACTION_DIM).map(|_| mode + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
                Example { observation: observation(), chunk: ActionChunk::from_vec(4, data).unwrap() }
            })
            .collect();
        let loss = train_step(&mut net, &batch, objective, &sched, &mut adam, &cfg, &mut rng).unwrap();
        if step % 250 == 0 {
            println!("{objective:?} step {step} loss {loss:.4}");
        }
    }
    net
}

fn main() {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let diffusion = fit(Objective::Diffusion, steps);
    let regression = fit(Objective::Regression, steps);

    let sched = build_schedule(ScheduleKind::SquaredCosine, 50).unwrap();
    let tokens = diffusion.encode_observation(&observation()).unwrap();
    let mut hist = [0usize; 9];
    for seed in 0..200 {
        let c = sample(&diffusion, &tokens, &sched, 10, seed).unwrap();
        let m = c.data().iter().sum::<f64>() / c.data().len() as f64;
        hist[(((m + 1.125) / 0.25) as usize).min(8)] += 1;
    }
    println!("\nchunk means of 200 DDIM samples:");
    for (i, n) in hist.iter().enumerate() {
        println!("{:+.2} {}", -1.0 + 0.25 * i as f64, "#".repeat(n / 2));
    }
    let tokens = regression.encode_observation(&observation()).unwrap();
    let bc = regression.predict_clean_chunk(&ActionChunk::zeros(4), 0, &tokens).unwrap();
    println!("\nregression output mean: {:+.3}", bc.data().iter().sum::<f64>() / bc.data().len() as f64);
}
