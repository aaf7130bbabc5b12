//! Runs the scripted experts across seeds and reports task outcomes, used to
//! pick the grinding and erasing rate constants.
//!
//! `cargo run --release --example calibrate_experts -- [episodes] [grind_rate] [erase_rate]`

use compliant_diffusion::experts::{expert_succeeded, run_expert_episode, ExpertConfig};
use compliant_diffusion::sim::SimConfig;
use compliant_diffusion::types::TaskId;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(10);
    let mut sim = SimConfig::default();
    if let Some(r) = args.get(1).and_then(|s| s.parse().ok()) {
        sim.grind.rate = r;
    }
    if let Some(r) = args.get(2).and_then(|s| s.parse().ok()) {
        sim.erase.rate = r;
    }
    println!("grind rate {} erase rate {}", sim.grind.rate, sim.erase.rate);
    for task in TaskId::ALL {
        let mut ok = 0;
        let mut metric = Vec::new();
        let mut peak = 0.0f32;
        for seed in 0..n {
            let (ep, _) = run_expert_episode(&sim, &ExpertConfig::for_task(task, seed)).expect("expert rollout");
            let o = ep.meta.outcome;
            ok += expert_succeeded(task, &o) as usize;
            metric.push(o.fine_fraction.or(o.erased_fraction).unwrap_or(o.inserted.map_or(0.0, f64::from)));
            if task == TaskId::Erase && seed == 0 {
                let g = ep.grid_cells();
                let ink = |t: usize| ep.grid[t * g..(t + 1) * g].iter().sum::<f32>();
                let per_cycle: Vec<String> =
                    (1..5).map(|c| format!("{:.3}", 1.0 - ink(c * 250) / ink(0))).collect();
                println!("  erase progress per 5 s cycle: {}", per_cycle.join(" "));
            }
            peak = ep.arms[0].normal_force.iter().fold(peak, |m, &f| m.max(f));
        }
        let mean = metric.iter().sum::<f64>() / metric.len() as f64;
        let min = metric.iter().cloned().fold(f64::INFINITY, f64::min);
        println!("{task:>14}: success {ok}/{n}  metric mean {mean:.4} min {min:.4}  peak normal {peak:.2} N");
    }
}
