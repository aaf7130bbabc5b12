//! Grinding demonstrations from the scripted expert and their normal-force
//! profile (mean ± std per tick), written as CSV.
//!
//! `cargo run --release --example grind_force_profile -- [episodes] [out.csv]`

use compliant_diffusion::evalkit::force_profile;
use compliant_diffusion::experts::{collect_demos, ExpertConfig};
use compliant_diffusion::sim::SimConfig;
use compliant_diffusion::types::TaskId;

fn main() {
    let n = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let out = std::env::args().nth(2).unwrap_or_else(|| "force_profile.csv".into());
    let sim = SimConfig::default();
    let eps = collect_demos(&sim, &ExpertConfig::for_task(TaskId::Grind, 0), n).expect("expert demos");
    for e in &eps {
        println!("{}: fine powder {:.3}", e.meta.id, e.meta.outcome.fine_fraction.unwrap_or(0.0));
    }
    let refs: Vec<_> = eps.iter().collect();
    let profile = force_profile(&refs, 0).expect("non-empty");
    profile.write_csv(out.as_ref()).expect("write csv");

    // One line per 4 s window: mean force and its spread across episodes.
    let window = (4.0 * sim.control_rate) as usize;
    println!("\n  t (s) | mean N | std N");
    for (i, (m, s)) in profile.mean.chunks(window).zip(profile.std.chunks(window)).enumerate() {
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!("  {:5.0} | {:6.2} | {:5.2}  {}", i as f64 * 4.0, avg(m), avg(s), "▮".repeat((avg(m) * 2.0) as usize));
    }
    println!("\nwrote {out}");
}
