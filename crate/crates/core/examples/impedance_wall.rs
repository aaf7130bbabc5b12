//! Presses the simulated end effector into the erase pad under each
//! stiffness preset and compares the settled contact force with two springs
//! in series: controller stiffness k and contact stiffness kₛ.
//!
//! `cargo run --example impedance_wall`

use compliant_diffusion::compliance::{default_presets, StiffnessMode};
use compliant_diffusion::geometry::Pose;
use compliant_diffusion::sim::{ArmCommand, SimConfig, World};
use compliant_diffusion::types::TaskId;

fn main() {
    let depth = 0.01;
    let ks = SimConfig::default().contact_stiffness;
    println!("target {depth} m below the surface, kₛ = {ks} N/m\n");
    println!("task          arm mode  k_z     sim F    k·kₛ/(k+kₛ)·d");
    for p in default_presets() {
        for mode in [StiffnessMode::Low, StiffnessMode::High] {
            let k = p.get(mode);
            let mut w = World::new(TaskId::Erase, SimConfig::default(), 0);
            w.arms[0].pose = Pose::from_translation(0.0, 0.0, 0.01);
            let cmd = ArmCommand { target: Pose::from_translation(0.0, 0.0, -depth), stiffness: k, gripper: 0.0 };
            for _ in 0..150 {
                w.step_controlled(&[cmd]).unwrap();
            }
            let kz = k.0[2];
            let expect = kz * ks / (kz + ks) * depth;
            println!(
                "{:<13} {}   {:<5} {kz:<7} {:<8.4} {expect:.4}",
                p.task.to_string(),
                p.arm,
                format!("{mode:?}"),
                w.arms[0].normal_force
            );
        }
    }
}
