//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to the
//! real stderr (bypassing test output capture) so a plain `cargo test` run
//! shows the verdicts.

mod common;

use std::io::Write as _;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use compliant_diffusion::autodiff::{AdamConfig, AdamState, Tensor};
use compliant_diffusion::compliance::{default_presets, StiffnessDiag, StiffnessMode};
use compliant_diffusion::datastore::Episode;
use compliant_diffusion::denoiser::{Denoiser, DenoiserConfig, ObservationTokens};
use compliant_diffusion::diffusion::{
    build_schedule, forward_noise, gaussian_chunk, sample, CleanPredictor, DiffusionError, ScheduleKind,
};
use compliant_diffusion::evalkit::{evaluate, force_profile, summarize, ERASE_SUCCESS};
use compliant_diffusion::experts::{collect_demos, run_expert_episode, ExpertConfig};
use compliant_diffusion::geometry::{encode_6d, rotation_log, sixd_to_rotmat, Pose, RotationMatrix};
use compliant_diffusion::runtime::{
    ensemble_action, run_policy, ArmModel, DiffusionPolicy, EnsembleBuffer, RolloutConfig,
};
use compliant_diffusion::sim::{ArmCommand, SimConfig, World};
use compliant_diffusion::train::{train_arm, train_step, Example, Objective, TrainConfig};
use compliant_diffusion::types::{ActionChunk, NormalizedObservation, ObsFrame, Observation, TaskId, ACTION_DIM};

type Verdict = Result<String, String>;

/// Prints the verdict line and fails the test on FAIL.
fn report(name: &str, budget: Duration, run: impl FnOnce() -> Verdict) {
    let start = Instant::now();
    let verdict = run();
    let elapsed = start.elapsed();
    let (ok, detail) = match verdict {
        Ok(d) if elapsed <= budget => (true, d),
        Ok(d) => (false, format!("{d}; took {elapsed:.1?}, budget {budget:?}")),
        Err(d) => (false, d),
    };
    let line = format!("acceptance | {name:<22} | {} | {detail} ({elapsed:.1?})\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{line}");
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn random_rotation(rng: &mut impl Rng) -> RotationMatrix {
    let q = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from_vector(q));
    RotationMatrix::new(q.to_rotation_matrix().into_inner()).expect("unit quaternion gives a rotation")
}

#[test]
fn rotation_codec() {
    report("rotation codec", Duration::from_secs(1), || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            let back = sixd_to_rotmat(&encode_6d(&r)).map_err(|e| e.to_string())?;
            worst = worst.max((back.matrix() - r.matrix()).amax());
            let m = back.matrix();
            let ortho = (m.transpose() * m - Matrix3::identity()).amax();
            check(ortho < 1e-12 && (m.determinant() - 1.0).abs() < 1e-12, || format!("ortho {ortho}"))?;
        }
        check(worst < 1e-9, || format!("round-trip error {worst:e}"))?;

        // A full turn about a fixed axis passes through angle π, where the
        // rotation vector flips sign; the 6D code moves smoothly.
        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        let steps = 2000;
        let dtheta = std::f64::consts::TAU / steps as f64;
        let (mut max6, mut max_aa): (f64, f64) = (0.0, 0.0);
        let mut prev: Option<([f64; 6], Vector3<f64>)> = None;
        for i in 0..=steps {
            let r = RotationMatrix::from_axis_angle(&axis, i as f64 * dtheta + 1e-4);
            let six = encode_6d(&r).0;
            let aa = rotation_log(r.matrix());
            if let Some((p6, paa)) = prev {
                let d6 = six.iter().zip(&p6).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                max6 = max6.max(d6);
                max_aa = max_aa.max((aa - paa).norm());
            }
            prev = Some((six, aa));
        }
        check(max6 <= 2.0 * dtheta, || format!("6D increment {max6:e} exceeds 2·Δθ"))?;
        check(max_aa > 1.0, || format!("axis-angle never jumped (max {max_aa})"))?;
        Ok(format!("max error {worst:.1e}, 6D step {max6:.1e} vs axis-angle jump {max_aa:.2}"))
    });
}

#[test]
fn autodiff_gradients() {
    report("autodiff gradients", Duration::from_secs(30), || {
        let cases = common::op_cases();
        let mut worst = (0.0, "");
        for case in &cases {
            for seed in 0..100 {
                let e = common::gradient_error(case, seed);
                if e > worst.0 {
                    worst = (e, case.name);
                }
            }
        }
        check(worst.0 < 1e-4, || format!("{}: relative error {:e}", worst.1, worst.0))?;
        Ok(format!("{} ops × 100 cases, worst {:.1e} ({})", cases.len(), worst.0, worst.1))
    });
}

/// Returns the true clean chunk whatever the input.
struct Oracle(ActionChunk);

impl CleanPredictor for Oracle {
    fn horizon(&self) -> usize {
        self.0.horizon()
    }
    fn predict_clean(&self, _: &ActionChunk, _: usize, _: &ObservationTokens) -> Result<ActionChunk, DiffusionError> {
        Ok(self.0.clone())
    }
}

#[test]
fn ddim_algebra() {
    report("ddim algebra", Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 16;
        let truth = ActionChunk::from_vec(h, (0..h * ACTION_DIM).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let sched = build_schedule(ScheduleKind::SquaredCosine, 100).map_err(|e| e.to_string())?;
        let tokens = ObservationTokens(Tensor::zeros(&[1, 1]));
        let oracle = Oracle(truth.clone());
        let mut worst: f64 = 0.0;
        for steps in [2, 10, 100] {
            let x = sample(&oracle, &tokens, &sched, steps, 11).map_err(|e| e.to_string())?;
            let err = x.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(err);
        }
        check(worst < 1e-9, || format!("oracle sampling error {worst:e}"))?;

        // Monte-Carlo variance of the forward process around √ᾱ·a⁰.
        let n_samples = 4000;
        let mut worst_var: f64 = 0.0;
        for n in [10, 50, 90] {
            let ab = sched.alpha_bar(n);
            let a0 = ActionChunk::from_vec(1, vec![1.0; ACTION_DIM]).unwrap();
            let (mut s1, mut s2, mut count) = (0.0, 0.0, 0.0);
            for _ in 0..n_samples {
                let eps = gaussian_chunk(1, &mut rng);
                let x = forward_noise(&a0, n, &eps, &sched).map_err(|e| e.to_string())?;
                for v in x.data() {
                    let c = v - ab.sqrt();
                    s1 += c;
                    s2 += c * c;
                    count += 1.0;
                }
            }
            let var = s2 / count - (s1 / count).powi(2);
            let rel = (var - (1.0 - ab)).abs() / (1.0 - ab);
            worst_var = worst_var.max(rel);
        }
        check(worst_var < 0.02, || format!("forward variance off by {:.2}%", worst_var * 100.0))?;
        Ok(format!("oracle error {worst:.1e}, variance within {:.2}%", worst_var * 100.0))
    });
}

fn toy_config() -> DenoiserConfig {
    DenoiserConfig {
        d_model: 32,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 2,
        horizon: 4,
        n_diffusion_steps: 50,
        patch_size: 2,
        grid_size: 4,
        ffn_mult: 2,
        seed: 5,
        ..DenoiserConfig::default()
    }
}

/// Constant observation; every chunk is ±1 (one mode per example) plus
/// noise 0.05.
fn bimodal_batch(rng: &mut impl Rng, batch: usize, horizon: usize) -> Vec<Example> {
    let obs = NormalizedObservation(Observation { previous: ObsFrame::zeros(4), current: ObsFrame::zeros(4) });
    (0..batch)
        .map(|_| {
            let mode = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let data = (0..horizon * ACTION_DIM).map(|_| mode + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
            Example { observation: obs.clone(), chunk: ActionChunk::from_vec(horizon, data).unwrap() }
        })
        .collect()
}

fn fit_toy(objective: Objective, steps: usize) -> Result<Denoiser, String> {
    let model_cfg = toy_config();
    let cfg = TrainConfig {
        optimizer: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
        model: model_cfg.clone(),
        ..TrainConfig::default()
    };
    let mut model = Denoiser::new(model_cfg).map_err(|e| e.to_string())?;
    let sched = build_schedule(ScheduleKind::SquaredCosine, model.config().n_diffusion_steps).map_err(|e| e.to_string())?;
    let mut adam = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..steps {
        let batch = bimodal_batch(&mut rng, 32, model.config().horizon);
        train_step(&mut model, &batch, objective, &sched, &mut adam, &cfg, &mut rng).map_err(|e| e.to_string())?;
    }
    Ok(model)
}

#[test]
fn multimodality() {
    report("multimodality", Duration::from_secs(300), || {
        let obs = NormalizedObservation(Observation { previous: ObsFrame::zeros(4), current: ObsFrame::zeros(4) });
        let diffusion = fit_toy(Objective::Diffusion, 1500)?;
        let sched = build_schedule(ScheduleKind::SquaredCosine, 50).map_err(|e| e.to_string())?;
        let tokens = diffusion.encode_observation(&obs).map_err(|e| e.to_string())?;
        let (mut plus, mut minus) = (0, 0);
        for seed in 0..200 {
            let c = sample(&diffusion, &tokens, &sched, 10, seed).map_err(|e| e.to_string())?;
            let m = c.data().iter().sum::<f64>() / c.data().len() as f64;
            if (m - 1.0).abs() < 0.5 {
                plus += 1;
            } else if (m + 1.0).abs() < 0.5 {
                minus += 1;
            }
        }
        let regression = fit_toy(Objective::Regression, 1500)?;
        let tokens = regression.encode_observation(&obs).map_err(|e| e.to_string())?;
        let bc = regression
            .predict_clean_chunk(&ActionChunk::zeros(4), 0, &tokens)
            .map_err(|e| e.to_string())?;
        let bc_dev = bc.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        check(plus >= 60 && minus >= 60, || format!("modes +1: {plus}, −1: {minus} of 200"))?;
        check(bc_dev <= 0.2, || format!("regression output strays {bc_dev:.3} from the mean"))?;
        Ok(format!("diffusion +1: {plus}, −1: {minus} of 200; regression max |a| {bc_dev:.3}"))
    });
}

/// Holds a target `depth` below the erase pad until the body settles and
/// returns the contact force.
fn wall_force(k: &StiffnessDiag, depth: f64) -> Result<(f64, Vec<f64>), String> {
    let mut w = World::new(TaskId::Erase, SimConfig::default(), 0);
    w.arms[0].pose = Pose::from_translation(0.0, 0.0, 0.01);
    w.arms[0].twist = Default::default();
    let cmd = ArmCommand { target: Pose::from_translation(0.0, 0.0, -depth), stiffness: *k, gripper: 0.0 };
    let mut energy = Vec::new();
    for _ in 0..150 {
        w.step_controlled(&[cmd]).map_err(|e| e.to_string())?;
        energy.push(mechanical_energy(&w, &cmd));
    }
    Ok((w.arms[0].normal_force, energy))
}

/// Kinetic energy plus the potentials of the controller spring and the
/// penalty contact.
fn mechanical_energy(w: &World, cmd: &ArmCommand) -> f64 {
    let a = &w.arms[0];
    let e = compliant_diffusion::geometry::pose_error(&a.pose, &cmd.target);
    let spring: f64 = (0..6).map(|i| 0.5 * cmd.stiffness.0[i] * e[i] * e[i]).sum();
    let pen = (-a.pose.position.z).max(0.0);
    w.kinetic_energy() + spring + 0.5 * w.config.contact_stiffness * pen * pen
}

#[test]
fn compliance_physics() {
    report("compliance physics", Duration::from_secs(10), || {
        let ks = SimConfig::default().contact_stiffness;
        let depth = 0.01;
        let mut worst: f64 = 0.0;
        let mut count = 0;
        for p in default_presets() {
            for mode in [StiffnessMode::Low, StiffnessMode::High] {
                let k = p.get(mode);
                let kz = k.0[2];
                let expect = kz * ks / (kz + ks) * depth;
                let (f, energy) = wall_force(&k, depth)?;
                let rel = (f - expect).abs() / expect;
                worst = worst.max(rel);
                check(rel < 0.02, || format!("{} arm {} {mode:?}: {f:.4} N vs {expect:.4} N", p.task, p.arm))?;
                let rises = energy.windows(2).filter(|w| w[1] > w[0] * (1.0 + 1e-9) + 1e-12).count();
                check(rises == 0, || format!("{} arm {} {mode:?}: energy rose {rises} times", p.task, p.arm))?;
                count += 1;
            }
        }
        Ok(format!("{count} preset/mode pairs, worst force error {:.3}%", worst * 100.0))
    });
}

fn constant_chunk(h: usize, v: f64) -> ActionChunk {
    ActionChunk::from_vec(h, vec![v; h * ACTION_DIM]).unwrap()
}

#[test]
fn temporal_ensemble() {
    report("temporal ensemble", Duration::from_secs(1), || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let h = rng.gen_range(2..20);
            let r = rng.gen_range(1..=h);
            let decay = rng.gen_range(0.0..2.0);
            let mut buf = EnsembleBuffer::new(decay);
            let mut births = Vec::new();
            for t in 0..3 * h {
                if t % r == 0 {
                    let data = (0..h * ACTION_DIM).map(|_| rng.gen_range(-5.0..5.0)).collect();
                    buf.push(ActionChunk::from_vec(h, data).unwrap(), t);
                    births.push(t);
                }
                let ws = buf.weights(t);
                let sum: f64 = ws.iter().map(|w| w.1).sum();
                check((sum - 1.0).abs() < 1e-12, || format!("weights sum to {sum}"))?;
                let a = ensemble_action(&buf, t).map_err(|e| e.to_string())?;
                for d in 0..ACTION_DIM {
                    // Every live chunk's value at this tick bounds the result.
                    let vals: Vec<f64> = ws.iter().map(|&(i, _)| buf_value(&buf, i, t, d)).collect();
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    check(a.0[d] >= lo - 1e-9 && a.0[d] <= hi + 1e-9, || "outside convex hull".into())?;
                }
            }
        }

        // Successive plans alternate between +1 and −1.
        let (h, r) = (16, 4);
        let mut buf = EnsembleBuffer::new(0.1);
        let mut latest = None;
        let (mut prev_e, mut prev_l): (Option<f64>, Option<f64>) = (None, None);
        let (mut jump_e, mut jump_l): (f64, f64) = (0.0, 0.0);
        for t in 0..64 {
            if t % r == 0 {
                let v = if (t / r) % 2 == 0 { 1.0 } else { -1.0 };
                buf.push(constant_chunk(h, v), t);
                latest = Some(v);
            }
            let e = ensemble_action(&buf, t).map_err(|e| e.to_string())?.0[0];
            let l = latest.unwrap();
            if let (Some(pe), Some(pl)) = (prev_e, prev_l) {
                jump_e = jump_e.max((e - pe).abs());
                jump_l = jump_l.max((l - pl).abs());
            }
            prev_e = Some(e);
            prev_l = Some(l);
        }
        check(jump_e <= jump_l, || format!("ensembled jump {jump_e} > raw jump {jump_l}"))?;
        Ok(format!("max jump {jump_e:.3} with ensembling vs {jump_l:.3} without"))
    });
}

/// Value of dimension `d` at tick `t` in the live chunk with index `i`.
fn buf_value(buf: &EnsembleBuffer, i: usize, t: usize, d: usize) -> f64 {
    let (chunk, birth) = buf.entry(i);
    chunk.action(t - birth).0[d]
}

/// Trains one model per arm on fresh expert demonstrations.
fn train_policy(task: TaskId, demos: usize) -> Result<(DiffusionPolicy, Vec<Episode>, Duration), String> {
    let sim = SimConfig::default();
    let eps = collect_demos(&sim, &ExpertConfig::for_task(task, 0), demos).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::default();
    let start = Instant::now();
    let arms = (0..task.n_arms())
        .map(|arm| train_arm(&eps, arm, &cfg, Objective::Diffusion, |_, _| {}).map(|t| t.model))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let schedule = build_schedule(cfg.schedule, cfg.model.n_diffusion_steps).map_err(|e| e.to_string())?;
    let n_infer_steps = RolloutConfig::default().n_infer_steps;
    Ok((DiffusionPolicy { arms, schedule, n_infer_steps }, eps, elapsed))
}

fn rollouts(policy: &mut DiffusionPolicy, task: TaskId, n: u64) -> Result<Vec<Episode>, String> {
    (0..n)
        .map(|i| {
            let mut world = World::new(task, SimConfig::default(), 1000 + i);
            run_policy(policy, &mut world, &RolloutConfig::default(), Default::default(), i).map_err(|e| e.to_string())
        })
        .collect()
}

const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);

#[test]
fn erase_end_to_end() {
    report("erase end-to-end", Duration::from_secs(45 * 60), || {
        let (mut policy, _, train_time) = train_policy(TaskId::Erase, 60)?;
        check(train_time <= TRAIN_BUDGET, || format!("training took {train_time:.0?}"))?;
        let rows: Vec<_> = rollouts(&mut policy, TaskId::Erase, 20)?.iter().map(evaluate).collect();
        let (mean, rate) = summarize(&rows).expect("20 rows");
        let summary = format!(
            "mean erased {mean:.3}, success (≥ {ERASE_SUCCESS}) {:.0}% over 20; training {train_time:.0?}",
            rate * 100.0
        );
        check(mean >= 0.70 && rate >= 0.5, || summary.clone())?;
        Ok(summary)
    });
}

#[test]
fn grind_end_to_end() {
    report("grind end-to-end", Duration::from_secs(45 * 60), || {
        let (mut policy, eps, train_time) = train_policy(TaskId::Grind, 40)?;
        check(train_time <= TRAIN_BUDGET, || format!("training took {train_time:.0?}"))?;
        let trained: Vec<_> = rollouts(&mut policy, TaskId::Grind, 10)?.iter().map(evaluate).collect();
        let (mean, _) = summarize(&trained).expect("10 rows");

        // Same architecture and normalization, untrained weights.
        let normalizer = policy.arms[0].normalizer.clone();
        let fresh = Denoiser::new(DenoiserConfig { seed: 12345, ..TrainConfig::default().model }).map_err(|e| e.to_string())?;
        let mut random = DiffusionPolicy { arms: vec![ArmModel { denoiser: fresh, normalizer }], ..policy };
        let baseline: Vec<_> = rollouts(&mut random, TaskId::Grind, 10)?.iter().map(evaluate).collect();
        let (base, _) = summarize(&baseline).expect("10 rows");
        let demo_mean = eps.iter().map(|e| e.meta.outcome.fine_fraction.unwrap_or(0.0)).sum::<f64>() / eps.len() as f64;
        let summary =
            format!("trained {mean:.3} vs untrained {base:.3} (demos {demo_mean:.3}); training {train_time:.0?}");
        check(mean >= 0.4 && mean >= 3.0 * base, || summary.clone())?;
        Ok(summary)
    });
}

fn tiny_policy_config() -> TrainConfig {
    TrainConfig {
        steps: 20,
        batch_size: 4,
        model: DenoiserConfig {
            d_model: 16,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            horizon: 8,
            n_diffusion_steps: 20,
            ..DenoiserConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn determinism_and_formats() {
    report("determinism & formats", Duration::from_secs(300), || {
        let sim = SimConfig::default();
        let cfg = ExpertConfig::for_task(TaskId::Erase, 21);
        let (a, _) = run_expert_episode(&sim, &cfg).map_err(|e| e.to_string())?;
        let (b, _) = run_expert_episode(&sim, &cfg).map_err(|e| e.to_string())?;
        let bytes = a.to_bytes().map_err(|e| e.to_string())?;
        check(bytes == b.to_bytes().map_err(|e| e.to_string())?, || "collection not reproducible".into())?;
        let back = Episode::from_bytes(&bytes).map_err(|e| e.to_string())?;
        check(back.to_bytes().map_err(|e| e.to_string())? == bytes, || "episode bytes changed on round trip".into())?;

        let eps = vec![a, run_expert_episode(&sim, &ExpertConfig { seed: 22, ..cfg.clone() }).map_err(|e| e.to_string())?.0];
        let tc = tiny_policy_config();
        let t1 = train_arm(&eps, 0, &tc, Objective::Diffusion, |_, _| {}).map_err(|e| e.to_string())?;
        let t2 = train_arm(&eps, 0, &tc, Objective::Diffusion, |_, _| {}).map_err(|e| e.to_string())?;
        check(t1.losses == t2.losses && t1.model.denoiser.params() == t2.model.denoiser.params(), || {
            "training not reproducible".into()
        })?;

        let schedule = build_schedule(tc.schedule, tc.model.n_diffusion_steps).map_err(|e| e.to_string())?;
        let mut policy = DiffusionPolicy { arms: vec![t1.model], schedule, n_infer_steps: 4 };
        let rc = RolloutConfig { ticks: 40, replan_interval: 4, ..RolloutConfig::default() };
        let run = |p: &mut DiffusionPolicy| -> Result<Vec<u8>, String> {
            let mut w = World::new(TaskId::Erase, sim.clone(), 5);
            let ep = run_policy(p, &mut w, &rc, Default::default(), 5).map_err(|e| e.to_string())?;
            ep.to_bytes().map_err(|e| e.to_string())
        };
        check(run(&mut policy)? == run(&mut policy)?, || "rollout not reproducible".into())?;

        // Independent recomputation of the force profile CSV.
        let refs: Vec<&Episode> = eps.iter().collect();
        let csv = force_profile(&refs, 0).map_err(|e| e.to_string())?.to_csv();
        let mut expected = String::from("tick,mean_N,std_N\n");
        for t in 0..eps[0].len().max(eps[1].len()) {
            let xs: Vec<f64> = eps.iter().filter(|e| t < e.len()).map(|e| e.arms[0].normal_force[t] as f64).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            expected.push_str(&format!("{t},{mean},{}\n", var.sqrt()));
        }
        check(csv == expected, || "force profile CSV differs from recomputation".into())?;
        Ok(format!("{} episode bytes; collect, train, rollout reproducible; CSV exact", bytes.len()))
    });
}
