//! Two-arm peg insertion with the scripted expert: the holding arm stays
//! stiff, the inserting arm switches to its compliant preset for the
//! descent, and the chamfer guides the peg into the jittered hole.
//!
//! `cargo run --release --example insertion_expert -- [seeds]`

use compliant_diffusion::experts::{run_expert_episode, Expert, ExpertConfig};
use compliant_diffusion::sim::{SimConfig, World};
use compliant_diffusion::types::TaskId;

fn main() {
    let n = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let sim = SimConfig::default();
    for task in [TaskId::RoundInsert, TaskId::CuboidInsert] {
        let cfg = ExpertConfig::for_task(task, 0);
        let expert = Expert::new(&World::new(task, sim.clone(), 0), cfg.clone()).unwrap();
        let mut phases = Vec::new();
        for tick in 0..sim.episode_ticks(task) {
            let p = expert.phase(0, tick);
            if phases.last().map(|(q, _)| *q) != Some(p) {
                phases.push((p, tick as f64 / sim.control_rate));
            }
        }
        let script: Vec<String> = phases.iter().map(|(p, t)| format!("{p}@{t:.1}s")).collect();
        println!("{task}: {}", script.join(" → "));
        let mut ok = 0;
        for seed in 0..n {
            let (ep, world) = run_expert_episode(&sim, &ExpertConfig { seed, ..cfg.clone() }).unwrap();
            let peak = ep.arms[0].normal_force.iter().cloned().fold(0.0f32, f32::max);
            let inserted = ep.meta.outcome.inserted == Some(true);
            ok += inserted as usize;
            println!("  seed {seed}: inserted {inserted:<5} peak force {peak:5.2} N  hole at {:?}", world.arms[1].pose.position.xy().as_slice());
        }
        println!("  {ok}/{n} inserted\n");
    }
}
