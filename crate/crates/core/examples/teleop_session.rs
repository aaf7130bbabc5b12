//! The teleoperation protocol without a socket: JSON commands in, state
//! broadcasts out, and a recorded episode at the end. Pass `--serve` to
//! expose the same session on ws://127.0.0.1:8765 instead.
//!
//! `cargo run --example teleop_session [-- --serve]`

use compliant_diffusion::compliance::default_presets;
use compliant_diffusion::sim::{SimConfig, World};
use compliant_diffusion::teleop::{serve, Message, ServeOptions, TeleopSession};
use compliant_diffusion::types::TaskId;

fn main() {
    let world = World::new(TaskId::Erase, SimConfig::default(), 0);
    let mut session = TeleopSession::new(world, default_presets()).expect("presets cover the task");
    if std::env::args().any(|a| a == "--serve") {
        let opts = ServeOptions { port: 8765, out: "teleop-data".into(), max_ticks: None, realtime: true };
        serve(&mut session, &opts).expect("serve");
        return;
    }

    let frames = [
        r#"{"v":1,"type":"command","arm":0,"record":"start"}"#,
        r#"{"v":1,"type":"command","arm":0,"delta":{"translation":[0,0,-0.02]},"stiffness_toggle":true}"#,
        r#"{"v":1,"type":"command","arm":0,"delta":{"translation":[-0.004,0,-0.004]}}"#,
        r#"{"v":1,"type":"command","arm":3}"#,
        r#"{"v":1,"type":"command","arm":0,"gripper":"open"}"#,
    ];
    for (i, f) in frames.iter().enumerate() {
        println!("> {f}");
        if let Some(err) = session.handle_text(f) {
            println!("< {}", err.to_json());
        }
        for _ in 0..10 {
            if let Some(env) = session.tick().expect("sim step") {
                if let Message::State(s) = &env.message {
                    if s.tick % 10 == 0 || i == 0 {
                        let a = &s.arms[0];
                        println!(
                            "< state tick {} z {:+.4} m  F_z {:+.2} N  mode {:?} recording {}",
                            s.tick, a.position[2], a.wrench[2], a.stiffness_mode, s.recording
                        );
                    }
                }
            }
        }
    }
    println!("> stop");
    session.handle_text(r#"{"v":1,"type":"command","arm":0,"record":"stop"}"#);
    session.tick().expect("sim step");
    for ep in session.take_finished() {
        println!("recorded {} with {} ticks, human = {}", ep.meta.id, ep.len(), ep.meta.human);
    }
}
