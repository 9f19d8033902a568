//! WebSocket teleoperation of the simulator, used to record the single
//! demonstration by hand.
//!
//! The session runs in lockstep: every accepted action advances the
//! simulation by exactly one step and is answered with one state message.

use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use demoaug_core::demo::{DemoSource, Recorder};
use demoaug_core::sim::{self, Action, SimState, TaskSpec, Vec3};
use futures_util::{SinkExt, StreamExt};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::Mutex;
use tokio_tungstenite::tungstenite::Message;

#[derive(Debug, Error)]
pub enum TeleopError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid task spec: {0}")]
    Spec(#[from] sim::SimError),
}

/// Client to server messages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Inbound {
    Reset,
    Action { d_pos: [f64; 3], d_gripper: f64 },
    StartRecording,
    StopRecording { save_path: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockView {
    pub pos: Vec3,
    pub grasped: bool,
}

/// Server to client messages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Outbound {
    State {
        ee: Vec3,
        width: f64,
        blocks: Vec<BlockView>,
        goals: Vec<Vec3>,
        step: usize,
        reward: f64,
        is_success: bool,
    },
    Ack {
        of: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        clamped: Option<bool>,
        #[serde(skip_serializing_if = "Option::is_none")]
        path: Option<String>,
    },
    Error { reason: String },
}

impl Outbound {
    fn error(reason: impl Into<String>) -> Self {
        Outbound::Error { reason: reason.into() }
    }

    fn ack(of: &str) -> Self {
        Outbound::Ack { of: of.into(), clamped: None, path: None }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }
}

/// One teleoperation session: the live environment and an optional
/// recording in progress.
#[derive(Debug)]
pub struct Session {
    spec: TaskSpec,
    state: SimState,
    reward: f64,
    is_success: bool,
    recorder: Recorder,
    rng: ChaCha8Rng,
    record_dir: PathBuf,
}

impl Session {
    /// Demonstrations are saved below `record_dir`.
    pub fn new(spec: TaskSpec, seed: u64, record_dir: impl Into<PathBuf>) -> Result<Self, sim::SimError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (state, obs) = sim::reset(&spec, None, &mut rng)?;
        let reward = sim::compute_reward(&obs.achieved_goal, &obs.desired_goal, &spec)?;
        Ok(Session {
            spec,
            state,
            reward,
            is_success: reward == 0.0,
            recorder: Recorder::new(),
            rng,
            record_dir: record_dir.into(),
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn is_recording(&self) -> bool {
        self.recorder.is_recording()
    }

    pub fn state_message(&self) -> Outbound {
        Outbound::State {
            ee: self.state.ee_pos,
            width: self.state.gripper_width,
            blocks: self
                .state
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| BlockView { pos: b.pos, grasped: self.state.grasped_block == Some(i) })
                .collect(),
            goals: self.state.goals.clone(),
            step: self.state.step_count,
            reward: self.reward,
            is_success: self.is_success,
        }
    }

    /// Parses and applies one text frame. Never fails: problems become
    /// error messages.
    pub fn handle_text(&mut self, text: &str) -> Vec<Outbound> {
        let value: Value = match serde_json::from_str(text) {
            Ok(v) => v,
            Err(e) => return vec![Outbound::error(format!("malformed message: {e}"))],
        };
        let kind = value.get("type").and_then(Value::as_str).map(str::to_owned);
        match kind.as_deref() {
            None => return vec![Outbound::error("malformed message: missing string field `type`")],
            Some("reset" | "action" | "start_recording" | "stop_recording") => {}
            Some(other) => return vec![Outbound::error(format!("unknown message type `{other}`"))],
        }
        match serde_json::from_value::<Inbound>(value) {
            Ok(msg) => self.handle_message(msg),
            Err(e) => vec![Outbound::error(format!("malformed {} message: {e}", kind.unwrap_or_default()))],
        }
    }

    pub fn handle_message(&mut self, msg: Inbound) -> Vec<Outbound> {
        match msg {
            Inbound::Reset => {
                if self.recorder.is_recording() {
                    warn!("reset during recording; recording discarded");
                    self.recorder.discard();
                }
                match sim::reset(&self.spec, None, &mut self.rng) {
                    Ok((state, obs)) => {
                        self.state = state;
                        self.reward = sim::compute_reward(&obs.achieved_goal, &obs.desired_goal, &self.spec)
                            .expect("observation goals match");
                        self.is_success = self.reward == 0.0;
                        vec![self.state_message()]
                    }
                    Err(e) => vec![Outbound::error(format!("reset failed: {e}"))],
                }
            }
            Inbound::Action { d_pos, d_gripper } => self.apply_action(d_pos, d_gripper),
            Inbound::StartRecording => {
                if self.recorder.is_recording() {
                    return vec![Outbound::error("already recording")];
                }
                if self.state.step_count != 0 {
                    return vec![Outbound::error("recording must start at step 0; send reset first")];
                }
                let inst = sim::TaskInstance {
                    block_starts: self.state.blocks.iter().map(|b| b.pos).collect(),
                    goals: self.state.goals.clone(),
                };
                self.recorder.start(self.spec.kind, &inst, DemoSource::HumanTeleop, "recorded by teleoperation");
                vec![Outbound::ack("start_recording")]
            }
            Inbound::StopRecording { save_path } => self.stop_recording(&save_path),
        }
    }

    fn apply_action(&mut self, d_pos: [f64; 3], d_gripper: f64) -> Vec<Outbound> {
        if !d_pos.iter().chain(std::iter::once(&d_gripper)).all(|v| v.is_finite()) {
            return vec![Outbound::error("action components must be finite numbers")];
        }
        if self.state.step_count >= self.spec.episode_length {
            return vec![Outbound::error("episode finished; send reset")];
        }
        let raw = Action { d_pos: Vec3::from(d_pos), d_gripper };
        let clamped = !raw.is_clamped();
        let action = raw.clamped();
        let (next, out) = match sim::step(&self.state, action, &self.spec) {
            Ok(r) => r,
            Err(e) => return vec![Outbound::error(format!("step failed: {e}"))],
        };
        self.state = next;
        self.reward = out.reward;
        self.is_success = out.is_success;
        if self.recorder.is_recording() {
            self.recorder.record_step(&self.state, &action).expect("recorder is active");
        }
        vec![
            Outbound::Ack { of: "action".into(), clamped: Some(clamped), path: None },
            self.state_message(),
        ]
    }

    fn stop_recording(&mut self, save_path: &str) -> Vec<Outbound> {
        if !self.recorder.is_recording() {
            return vec![Outbound::error("not recording")];
        }
        let target = match self.resolve(save_path) {
            Ok(p) => p,
            Err(reason) => return vec![Outbound::error(reason)],
        };
        let demo = self.recorder.finish().expect("recorder is active");
        if let Err(e) = demo.validate(&self.spec) {
            return vec![Outbound::error(format!("demonstration rejected: {e}"))];
        }
        if let Some(parent) = target.parent() {
            if let Err(e) = std::fs::create_dir_all(parent) {
                return vec![Outbound::error(format!("cannot create {}: {e}", parent.display()))];
            }
        }
        match demo.save_with_spec(&target, &self.spec) {
            Ok(()) => {
                info!("saved demonstration to {}", target.display());
                vec![Outbound::Ack {
                    of: "stop_recording".into(),
                    clamped: None,
                    path: Some(target.display().to_string()),
                }]
            }
            Err(e) => vec![Outbound::error(format!("cannot save demonstration: {e}"))],
        }
    }

    /// Save paths are relative and stay inside the record directory.
    fn resolve(&self, save_path: &str) -> Result<PathBuf, String> {
        let p = Path::new(save_path);
        let ok = !save_path.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)));
        if ok {
            Ok(self.record_dir.join(p))
        } else {
            Err(format!("save_path `{save_path}` must be a relative path without `..`"))
        }
    }

    /// Called when the controlling client goes away.
    pub fn client_disconnected(&mut self) {
        if self.recorder.is_recording() {
            warn!("client disconnected mid-recording; recording discarded");
            self.recorder.discard();
        }
    }
}

/// A bound teleoperation server. Call [`Server::run`] to serve clients.
pub struct Server {
    listener: TcpListener,
    session: Arc<Mutex<Session>>,
    busy: Arc<AtomicBool>,
}

impl Server {
    pub async fn bind(addr: &str, session: Session) -> Result<Self, TeleopError> {
        let listener = TcpListener::bind(addr)
            .await
            .map_err(|source| TeleopError::Bind { addr: addr.to_string(), source })?;
        Ok(Server { listener, session: Arc::new(Mutex::new(session)), busy: Arc::new(AtomicBool::new(false)) })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until the task is dropped. Only one client
    /// controls the session at a time; others are told so and closed.
    pub async fn run(self) -> Result<(), TeleopError> {
        loop {
            let (stream, peer) = self.listener.accept().await?;
            let session = Arc::clone(&self.session);
            let busy = Arc::clone(&self.busy);
            tokio::spawn(async move {
                if let Err(e) = serve_client(stream, peer, session, busy).await {
                    warn!("client {peer}: {e}");
                }
            });
        }
    }
}

async fn serve_client(
    stream: TcpStream,
    peer: SocketAddr,
    session: Arc<Mutex<Session>>,
    busy: Arc<AtomicBool>,
) -> Result<(), tokio_tungstenite::tungstenite::Error> {
    let mut ws = tokio_tungstenite::accept_async(stream).await?;
    if busy.swap(true, Ordering::SeqCst) {
        let msg = Outbound::error("another client is controlling this session");
        ws.send(Message::text(msg.to_json())).await?;
        return ws.close(None).await;
    }
    info!("client {peer} connected");
    let result = async {
        let hello = session.lock().await.state_message();
        ws.send(Message::text(hello.to_json())).await?;
        while let Some(frame) = ws.next().await {
            let replies = match frame? {
                Message::Text(t) => session.lock().await.handle_text(t.as_str()),
                Message::Binary(_) => vec![Outbound::error("binary frames are not supported; send UTF-8 JSON text")],
                Message::Close(_) => break,
                _ => continue,
            };
            for r in replies {
                ws.send(Message::text(r.to_json())).await?;
            }
        }
        Ok(())
    }
    .await;
    session.lock().await.client_disconnected();
    busy.store(false, Ordering::SeqCst);
    info!("client {peer} disconnected");
    result
}

/// Binds `addr` and serves until the process exits.
pub async fn serve(addr: &str, session: Session) -> Result<(), TeleopError> {
    let server = Server::bind(addr, session).await?;
    info!("teleop server listening on ws://{}", server.local_addr()?);
    server.run().await
}
