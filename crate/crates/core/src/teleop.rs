//! Teleoperation protocol and server loop.
//!
//! [`TeleopSession`] is the I/O-free core: it parses client commands,
//! clamps and applies them to the controller references, steps the world,
//! records episodes and produces `state` broadcasts. [`serve`] wraps it with
//! a WebSocket server running the connection on its own thread; the two
//! sides exchange JSON text through a pair of channels only.
//!
//! Client → server:
//! ```json
//! {"v":1,"type":"command","arm":0,"delta":{"translation":[0.001,0,0],"rotation":[0,0,0]},
//!  "gripper":0.0,"stiffness_toggle":false,"record":"start"}
//! ```
//! Server → client: `{"v":1,"type":"state",...}` at 20 Hz and
//! `{"v":1,"type":"error","message":"..."}` for rejected input.

use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compliance::{find_preset, ComplianceError, StiffnessMode, StiffnessPreset};
use crate::datastore::{DatastoreError, Episode, EpisodeMeta, EPISODE_VERSION};
use crate::experts::{commands_from_actions, outcome, record_tick};
use crate::geometry::{Pose, RotationMatrix};
use crate::sim::{SimError, World};
use crate::types::{Action16, TaskId};

pub const PROTOCOL_VERSION: u32 = 1;
/// Per-message translation clamp (m).
pub const MAX_TRANSLATION_DELTA: f64 = 0.005;
/// Per-message rotation clamp (rad).
pub const MAX_ROTATION_DELTA: f64 = 0.05;
pub const BROADCAST_RATE: f64 = 20.0;

#[derive(Debug, Error)]
pub enum TeleopError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Compliance(#[from] ComplianceError),
    #[error(transparent)]
    Datastore(#[from] DatastoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordOp {
    Start,
    Stop,
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseDelta {
    pub translation: [f64; 3],
    /// Rotation vector applied in the world frame.
    pub rotation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Command {
    pub arm: usize,
    pub delta: PoseDelta,
    pub gripper: Option<f64>,
    pub stiffness_toggle: bool,
    pub record: Option<RecordOp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub position: [f64; 3],
    /// First two rotation-matrix columns.
    pub rotation6d: [f64; 6],
    pub wrench: [f64; 6],
    pub gripper: f64,
    pub stiffness_mode: StiffnessMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub tick: usize,
    pub task: TaskId,
    pub arms: Vec<ArmState>,
    pub grid_size: usize,
    /// Row-major `G×G` intensities.
    pub grid: Vec<f64>,
    pub recording: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Message {
    Command(Command),
    State(StateMessage),
    Error { message: String },
}

/// A versioned envelope around [`Message`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub v: u32,
    #[serde(flatten)]
    pub message: Message,
}

impl Envelope {
    pub fn new(message: Message) -> Self {
        Self { v: PROTOCOL_VERSION, message }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }

    pub fn error(message: impl Into<String>) -> Self {
        Self::new(Message::Error { message: message.into() })
    }
}

/// Parses a client frame into a command, or the error message to send back.
pub fn parse_command(text: &str) -> Result<Command, Envelope> {
    let env: Envelope = serde_json::from_str(text).map_err(|e| Envelope::error(format!("malformed message: {e}")))?;
    if env.v != PROTOCOL_VERSION {
        return Err(Envelope::error(format!("unsupported protocol version {}", env.v)));
    }
    match env.message {
        Message::Command(c) => Ok(c),
        _ => Err(Envelope::error("clients may only send commands")),
    }
}

fn clamp_vec(v: [f64; 3], max: f64) -> Vector3<f64> {
    let v = Vector3::from(v.map(|x| if x.is_finite() { x } else { 0.0 }));
    let n = v.norm();
    if n > max { v * (max / n) } else { v }
}

/// Clamped delta: translation norm ≤ 5 mm, rotation angle ≤ 0.05 rad.
pub fn clamp_delta(d: &PoseDelta) -> (Vector3<f64>, Vector3<f64>) {
    (clamp_vec(d.translation, MAX_TRANSLATION_DELTA), clamp_vec(d.rotation, MAX_ROTATION_DELTA))
}

/// Sim-side teleoperation state.
#[derive(Debug)]
pub struct TeleopSession {
    pub world: World,
    presets: Vec<StiffnessPreset>,
    targets: Vec<Pose>,
    grippers: Vec<f64>,
    modes: Vec<StiffnessMode>,
    /// Latest unapplied command per arm; newer commands overwrite older ones.
    pending: Vec<Option<Command>>,
    recording: Option<Episode>,
    finished: Vec<Episode>,
    next_episode: usize,
    broadcast_every: f64,
    last_broadcast: Option<usize>,
}

impl TeleopSession {
    pub fn new(world: World, presets: Vec<StiffnessPreset>) -> Result<Self, TeleopError> {
        let n = world.n_arms();
        for arm in 0..n {
            find_preset(&presets, world.task, arm)?;
        }
        let broadcast_every = world.config.control_rate / BROADCAST_RATE;
        Ok(Self {
            targets: world.arms.iter().map(|a| a.pose).collect(),
            grippers: world.arms.iter().map(|a| a.gripper).collect(),
            modes: vec![StiffnessMode::High; n],
            pending: vec![None; n],
            world,
            presets,
            recording: None,
            finished: Vec::new(),
            next_episode: 0,
            broadcast_every,
            last_broadcast: None,
        })
    }

    pub fn is_recording(&self) -> bool {
        self.recording.is_some()
    }

    pub fn mode(&self, arm: usize) -> StiffnessMode {
        self.modes[arm]
    }

    pub fn target(&self, arm: usize) -> Pose {
        self.targets[arm]
    }

    /// Queues a client frame; returns an error envelope for bad input.
    pub fn handle_text(&mut self, text: &str) -> Option<Envelope> {
        match parse_command(text) {
            Ok(c) => self.queue(c),
            Err(e) => Some(e),
        }
    }

    pub fn queue(&mut self, c: Command) -> Option<Envelope> {
        if c.arm >= self.pending.len() {
            return Some(Envelope::error(format!("arm {} out of range", c.arm)));
        }
        let arm = c.arm;
        self.pending[arm] = Some(c);
        None
    }

    fn apply(&mut self, c: Command) {
        let arm = c.arm;
        let (dp, dr) = clamp_delta(&c.delta);
        let t = &mut self.targets[arm];
        t.position += dp;
        if dr != Vector3::zeros() {
            t.rotation = RotationMatrix::from_rotation_vector(&dr) * t.rotation;
        }
        if let Some(g) = c.gripper.filter(|g| g.is_finite()) {
            self.grippers[arm] = g.clamp(0.0, 1.0);
        }
        if c.stiffness_toggle {
            self.modes[arm] = self.modes[arm].toggled();
        }
        match c.record {
            Some(RecordOp::Start) if self.recording.is_none() => {
                let meta = EpisodeMeta {
                    version: EPISODE_VERSION,
                    id: format!("{}-teleop-{:04}", self.world.task.name(), self.next_episode),
                    task: self.world.task,
                    seed: 0,
                    control_rate: self.world.config.control_rate,
                    grid_size: self.world.config.grid_size,
                    presets: self.presets.clone(),
                    date: String::new(),
                    human: true,
                    outcome: Default::default(),
                };
                self.next_episode += 1;
                self.recording = Some(Episode::new(meta, self.world.n_arms()));
            }
            Some(RecordOp::Stop) => {
                if let Some(mut ep) = self.recording.take() {
                    ep.meta.outcome = outcome(&self.world);
                    self.finished.push(ep);
                }
            }
            Some(RecordOp::Discard) => self.recording = None,
            _ => {}
        }
    }

    /// Current reference of every arm as actions.
    pub fn actions(&self) -> Vec<Action16> {
        (0..self.targets.len())
            .map(|arm| {
                let k = find_preset(&self.presets, self.world.task, arm).expect("checked in new").get(self.modes[arm]);
                Action16::new(&self.targets[arm], self.grippers[arm], &k.0)
            })
            .collect()
    }

    /// Applies pending commands, records, steps the world, and returns a
    /// state broadcast when one is due.
    pub fn tick(&mut self) -> Result<Option<Envelope>, TeleopError> {
        for arm in 0..self.pending.len() {
            if let Some(c) = self.pending[arm].take() {
                self.apply(c);
            }
        }
        let actions = self.actions();
        if let Some(ep) = self.recording.as_mut() {
            record_tick(ep, &self.world, &actions);
        }
        self.world.step_controlled(&commands_from_actions(&actions))?;
        let slot = ((self.world.tick - 1) as f64 / self.broadcast_every).floor() as usize;
        if self.last_broadcast != Some(slot) {
            self.last_broadcast = Some(slot);
            return Ok(Some(Envelope::new(Message::State(self.state()))));
        }
        Ok(None)
    }

    pub fn state(&self) -> StateMessage {
        let arms = self
            .world
            .arms
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let p9 = a.pose.to_pose9();
                ArmState {
                    position: [p9[0], p9[1], p9[2]],
                    rotation6d: std::array::from_fn(|k| p9[3 + k]),
                    wrench: a.contact.to_array(),
                    gripper: a.gripper,
                    stiffness_mode: self.modes[i],
                }
            })
            .collect();
        StateMessage {
            tick: self.world.tick,
            task: self.world.task,
            arms,
            grid_size: self.world.config.grid_size,
            grid: crate::sim::render_grid(&self.world),
            recording: self.is_recording(),
        }
    }

    /// Episodes finished with `record: stop` since the last call.
    pub fn take_finished(&mut self) -> Vec<Episode> {
        std::mem::take(&mut self.finished)
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub port: u16,
    /// Directory receiving recorded episodes (`<out>/<task>/<id>.ep`).
    pub out: PathBuf,
    /// Stop after this many ticks; `None` runs until the process ends.
    pub max_ticks: Option<usize>,
    /// Pace the loop at the control rate.
    pub realtime: bool,
}

/// One client at a time: forwards inbound text frames and writes outbound
/// frames. Runs until the listener fails.
fn connection_loop(listener: TcpListener, inbound: Sender<String>, outbound: Receiver<String>) {
    for stream in listener.incoming() {
        let Ok(stream) = stream else { continue };
        if let Err(e) = serve_client(stream, &inbound, &outbound) {
            log::info!("client disconnected: {e}");
        }
        if matches!(outbound.try_recv(), Err(TryRecvError::Disconnected)) {
            return;
        }
    }
}

fn serve_client(stream: TcpStream, inbound: &Sender<String>, outbound: &Receiver<String>) -> Result<(), String> {
    stream.set_read_timeout(Some(Duration::from_millis(5))).map_err(|e| e.to_string())?;
    let mut ws = tungstenite::accept(stream).map_err(|e| e.to_string())?;
    // Stale broadcasts from before the connection are dropped.
    while outbound.try_recv().is_ok() {}
    loop {
        loop {
            match outbound.try_recv() {
                Ok(text) => ws.send(tungstenite::Message::Text(text)).map_err(|e| e.to_string())?,
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return Ok(()),
            }
        }
        match ws.read() {
            Ok(tungstenite::Message::Text(t)) => {
                if inbound.send(t).is_err() {
                    return Ok(());
                }
            }
            Ok(tungstenite::Message::Close(_)) => return Err("closed by client".into()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(e) => return Err(e.to_string()),
        }
    }
}

/// Runs the simulator loop and the WebSocket endpoint. Returns the paths
/// of recorded episodes once `max_ticks` is reached.
pub fn serve(session: &mut TeleopSession, opts: &ServeOptions) -> Result<Vec<PathBuf>, TeleopError> {
    let listener = TcpListener::bind(("127.0.0.1", opts.port))?;
    log::info!("teleop listening on ws://{}", listener.local_addr()?);
    let (in_tx, in_rx) = mpsc::channel::<String>();
    let (out_tx, out_rx) = mpsc::channel::<String>();
    std::thread::spawn(move || connection_loop(listener, in_tx, out_rx));
    let period = Duration::from_secs_f64(session.world.config.dt());
    let mut written = Vec::new();
    let start = Instant::now();
    let mut ticks = 0usize;
    while opts.max_ticks.is_none_or(|m| ticks < m) {
        while let Ok(text) = in_rx.try_recv() {
            if let Some(err) = session.handle_text(&text) {
                let _ = out_tx.send(err.to_json());
            }
        }
        if let Some(state) = session.tick()? {
            let _ = out_tx.send(state.to_json());
        }
        for ep in session.take_finished() {
            written.push(ep.write(&opts.out)?);
        }
        ticks += 1;
        if opts.realtime {
            let due = start + period * ticks as u32;
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compliance::default_presets;
    use crate::sim::SimConfig;

    fn session(task: TaskId) -> TeleopSession {
        TeleopSession::new(World::new(task, SimConfig::default(), 0), default_presets()).unwrap()
    }

    #[test]
    fn idle_holds_pose() {
        let mut s = session(TaskId::Erase);
        let start = s.world.arms[0].pose;
        for _ in 0..20 {
            s.tick().unwrap();
        }
        assert_eq!(s.world.arms[0].pose, start);
    }

    #[test]
    fn deltas_clamped() {
        let mut s = session(TaskId::Erase);
        let start = s.target(0).position;
        s.handle_text(r#"{"v":1,"type":"command","delta":{"translation":[1.0,0,0],"rotation":[0,0,3.0]}}"#);
        s.tick().unwrap();
        let moved = s.target(0).position - start;
        assert!((moved.norm() - MAX_TRANSLATION_DELTA).abs() < 1e-15);
        let angle = s.target(0).rotation.log().norm();
        assert!((angle - MAX_ROTATION_DELTA).abs() < 1e-12);
    }

    #[test]
    fn malformed_rejected_unknown_fields_ignored() {
        let mut s = session(TaskId::Grind);
        let err = s.handle_text("{not json").unwrap();
        assert!(matches!(err.message, Message::Error { .. }));
        assert!(s.handle_text(r#"{"v":2,"type":"command"}"#).is_some());
        assert!(s.handle_text(r#"{"v":1,"type":"command","future_field":[1,2]}"#).is_none());
        assert!(s.handle_text(r#"{"v":1,"type":"command","arm":5}"#).is_some());
    }

    #[test]
    fn last_write_wins() {
        let mut s = session(TaskId::Erase);
        let start = s.target(0).position;
        s.handle_text(r#"{"v":1,"type":"command","delta":{"translation":[0.001,0,0]}}"#);
        s.handle_text(r#"{"v":1,"type":"command","delta":{"translation":[0,0.002,0]}}"#);
        s.tick().unwrap();
        let d = s.target(0).position - start;
        assert_eq!(d.x, 0.0);
        assert!((d.y - 0.002).abs() < 1e-15);
    }

    #[test]
    fn toggle_switches_preset() {
        let mut s = session(TaskId::Grind);
        assert_eq!(s.actions()[0].stiffness(), [800.0, 800.0, 800.0, 150.0, 150.0, 150.0]);
        s.handle_text(r#"{"v":1,"type":"command","stiffness_toggle":true}"#);
        let mut state = None;
        for _ in 0..3 {
            state = s.tick().unwrap().or(state);
        }
        let Some(Envelope { message: Message::State(st), .. }) = state else { panic!("no state") };
        assert_eq!(st.arms[0].stiffness_mode, StiffnessMode::Low);
        assert_eq!(s.actions()[0].stiffness(), [300.0, 300.0, 300.0, 100.0, 100.0, 100.0]);
    }

    #[test]
    fn broadcast_at_twenty_hz() {
        let mut s = session(TaskId::Erase);
        let n = (0..100).filter(|_| s.tick().unwrap().is_some()).count();
        assert_eq!(n, 40);
    }

    #[test]
    fn record_start_stop_discard() {
        let mut s = session(TaskId::Erase);
        s.handle_text(r#"{"v":1,"type":"command","record":"start"}"#);
        for _ in 0..5 {
            s.tick().unwrap();
        }
        assert!(s.is_recording());
        s.handle_text(r#"{"v":1,"type":"command","record":"stop"}"#);
        s.tick().unwrap();
        let eps = s.take_finished();
        assert_eq!(eps.len(), 1);
        assert_eq!(eps[0].len(), 5);
        assert!(eps[0].meta.human);
        let bytes = eps[0].to_bytes().unwrap();
        assert_eq!(Episode::from_bytes(&bytes).unwrap(), eps[0]);
        s.handle_text(r#"{"v":1,"type":"command","record":"start"}"#);
        s.tick().unwrap();
        s.handle_text(r#"{"v":1,"type":"command","record":"discard"}"#);
        s.tick().unwrap();
        assert!(!s.is_recording());
        assert!(s.take_finished().is_empty());
    }

    #[test]
    fn message_schema() {
        let json = Envelope::new(Message::Command(Command { gripper: Some(1.0), ..Default::default() })).to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["v"], 1);
        assert_eq!(v["type"], "command");
        let st = Envelope::new(Message::State(session(TaskId::Grind).state())).to_json();
        let v: serde_json::Value = serde_json::from_str(&st).unwrap();
        assert_eq!(v["type"], "state");
        assert_eq!(v["grid"].as_array().unwrap().len(), 24 * 24);
        assert_eq!(v["arms"][0]["stiffness_mode"], "high");
    }
}
