//! The full loop on the erasing task: scripted demonstrations, diffusion
//! training, saving and reloading the policy, closed-loop rollouts with
//! temporal ensembling, and metrics.
//!
//! `cargo run --release --example erase_pipeline -- [demos] [steps] [rollouts]`
//!
//! The defaults take roughly ten minutes on one core.

use std::time::Instant;

use compliant_diffusion::evalkit::{evaluate, metrics_csv, summarize};
use compliant_diffusion::experts::{collect_demos, ExpertConfig};
use compliant_diffusion::runtime::{load_policy, run_policy, save_policy, RolloutConfig};
use compliant_diffusion::sim::{SimConfig, World};
use compliant_diffusion::train::{train_arm, Objective, TrainConfig};
use compliant_diffusion::types::TaskId;

fn main() {
    let arg = |i: usize, default: usize| std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let (demos, steps, n_rollouts) = (arg(1, 60), arg(2, 3000), arg(3, 5));
    let task = TaskId::Erase;
    let sim = SimConfig::default();

    let t = Instant::now();
    let episodes = collect_demos(&sim, &ExpertConfig::for_task(task, 0), demos).expect("expert demos");
    println!("collected {demos} demonstrations in {:.1?}", t.elapsed());

    let cfg = TrainConfig { steps, ..TrainConfig::default() };
    let t = Instant::now();
    let trained = train_arm(&episodes, 0, &cfg, Objective::Diffusion, |step, loss| {
        if step % 500 == 0 {
            println!("step {step:5}  loss {loss:.4}  {:.0?}", t.elapsed());
        }
    })
    .expect("training");

    let dir = std::env::temp_dir().join("erase_pipeline_policy");
    save_policy(&dir, task, cfg.schedule, &[trained.model]).expect("save");
    let rollout = RolloutConfig::default();
    let (_, mut policy) = load_policy(&dir, rollout.n_infer_steps).expect("load");
    println!("policy saved to and reloaded from {}", dir.display());

    let mut rows = Vec::new();
    for i in 0..n_rollouts as u64 {
        let mut world = World::new(task, sim.clone(), 1000 + i);
        let ep = run_policy(&mut policy, &mut world, &rollout, cfg.bounds, i).expect("rollout");
        let row = evaluate(&ep);
        println!("rollout {i}: erased {:.3} success {}", row.metric, row.success);
        rows.push(row);
    }
    let (mean, rate) = summarize(&rows).unwrap_or_default();
    println!("\nmean erased fraction {mean:.3}, success rate {rate:.2}\n\n{}", metrics_csv(&rows));
}
