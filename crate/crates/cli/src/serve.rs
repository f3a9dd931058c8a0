//! Interactive steering sessions over newline-delimited JSON.
//!
//! Each connection owns one [`Session`]; the tokenizer and world model are
//! shared read-only across connections.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use stworld::model::{StateTokens, WorldModel};
use stworld::numerics::{mix_seed, Rng};
use stworld::pose_codec::{compose, detokenize_pose, tokenize_pose, Pose, PoseTokens, RelativePose};
use stworld::rollout::{encode_episode, predict_next_state, SamplingPolicy};
use stworld::tokenizer::Tokenizer;
use stworld::world::{generate_episode, Raster, WorldParams};

use crate::commands::ControlSpec;

/// Longest branch a client may request.
pub const MAX_BRANCH_HORIZON: usize = 256;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Reset { seed: u64 },
    Step { dtheta: f64, dx: f64, dy: f64 },
    Branch { controls: Vec<Option<ControlSpec>>, horizon: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Frame {
        step: u64,
        /// Raw raster bytes as stored in a DWEP frame, base64-encoded.
        raster_b64: String,
        pose: Pose,
        tokens: PoseTokens,
        /// Set on frames of a branch preview, which leave the session as it
        /// was.
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        branch: bool,
    },
    Error {
        msg: String,
    },
}

impl ServerMessage {
    fn error(msg: impl Into<String>) -> Self {
        Self::Error { msg: msg.into() }
    }

    fn frame(step: u64, raster: &Raster, pose: Pose, tokens: PoseTokens, branch: bool) -> Self {
        Self::Frame { step, raster_b64: B64.encode(&raster.pixels), pose, tokens, branch }
    }
}

/// Decodes a `raster_b64` field back into pixel bytes.
pub fn decode_raster_b64(s: &str) -> Result<Vec<u8>, base64::DecodeError> {
    B64.decode(s)
}

/// Frozen models and settings shared by every session.
pub struct ServeState {
    pub tokenizer: Tokenizer,
    pub model: WorldModel,
    pub world: WorldParams,
    pub sampling: SamplingPolicy,
    /// Ground-truth frames rendered on reset as the initial context.
    pub seed_frames: usize,
    /// Mixed with each reset seed to seed the session's sampler.
    pub base_seed: u64,
}

#[derive(Clone)]
struct Rollout {
    /// Most recent states, at most `T_ctx` of them.
    history: Vec<StateTokens>,
    pose: Pose,
    step: u64,
    rng: Rng,
}

pub struct Session {
    shared: Arc<ServeState>,
    current: Option<Rollout>,
}

impl Session {
    pub fn new(shared: Arc<ServeState>) -> Self {
        Self { shared, current: None }
    }

    /// Handles one client line and returns the replies to send.
    pub fn handle_line(&mut self, line: &str) -> Vec<ServerMessage> {
        let msg: ClientMessage = match serde_json::from_str(line) {
            Ok(m) => m,
            Err(e) => return vec![ServerMessage::error(format!("malformed message: {e}"))],
        };
        let result = match msg {
            ClientMessage::Reset { seed } => self.reset(seed),
            ClientMessage::Step { dtheta, dx, dy } => self.step(RelativePose::new(dtheta, dx, dy)),
            ClientMessage::Branch { controls, horizon } => self.branch(&controls, horizon),
        };
        result.unwrap_or_else(|e| vec![ServerMessage::error(e)])
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<ServerMessage>, String> {
        let s = &self.shared;
        let k = s.seed_frames.clamp(1, s.model.config.ctx_frames);
        let ep = generate_episode(seed, k.max(2), &s.world);
        let (frames, poses) = (&ep.frames[ep.frames.len() - k..], &ep.poses[ep.poses.len() - k..]);
        let history =
            encode_episode(&s.tokenizer, &s.model.config.binning, frames, poses).map_err(|e| e.to_string())?;
        let last = history.last().unwrap().pose();
        let pose = *poses.last().unwrap();
        self.current = Some(Rollout { history, pose, step: 0, rng: Rng::new(mix_seed(s.base_seed, seed)) });
        Ok(vec![ServerMessage::frame(0, frames.last().unwrap(), pose, last, false)])
    }

    fn step(&mut self, delta: RelativePose) -> Result<Vec<ServerMessage>, String> {
        let shared = Arc::clone(&self.shared);
        let r = self.current.as_mut().ok_or("no active session; send reset first")?;
        let tokens = control_tokens(&shared, &delta)?;
        let (msg, _) = advance(&shared, r, Some(tokens), false)?;
        Ok(vec![msg])
    }

    fn branch(&mut self, controls: &[Option<ControlSpec>], horizon: usize) -> Result<Vec<ServerMessage>, String> {
        let shared = Arc::clone(&self.shared);
        let current = self.current.as_ref().ok_or("no active session; send reset first")?;
        if horizon > MAX_BRANCH_HORIZON {
            return Err(format!("horizon {horizon} exceeds {MAX_BRANCH_HORIZON}"));
        }
        if controls.len() > horizon {
            return Err(format!("{} controls for horizon {horizon}", controls.len()));
        }
        let tokens = controls
            .iter()
            .map(|c| c.map(|c| control_tokens(&shared, &c.delta())).transpose())
            .collect::<Result<Vec<_>, _>>()?;
        let mut r = current.clone();
        let mut out = Vec::with_capacity(horizon);
        for i in 0..horizon {
            out.push(advance(&shared, &mut r, tokens.get(i).copied().flatten(), true)?.0);
        }
        Ok(out)
    }
}

fn control_tokens(s: &ServeState, delta: &RelativePose) -> Result<PoseTokens, String> {
    if ![delta.dtheta, delta.dx, delta.dy].iter().all(|v| v.is_finite()) {
        return Err("control values must be finite".into());
    }
    tokenize_pose(delta, &s.model.config.binning).map_err(|e| e.to_string())
}

/// Generates and decodes one state, moving `r` forward.
fn advance(
    s: &ServeState,
    r: &mut Rollout,
    control: Option<PoseTokens>,
    branch: bool,
) -> Result<(ServerMessage, StateTokens), String> {
    let next = predict_next_state(&s.model, &r.history, control, &s.sampling, &mut r.rng).map_err(|e| e.to_string())?;
    let delta = detokenize_pose(&next.pose(), &s.model.config.binning).map_err(|e| e.to_string())?;
    r.pose = compose(&r.pose, &delta);
    r.step += 1;
    r.history.push(next.clone());
    let t = s.model.config.ctx_frames;
    if r.history.len() > t {
        r.history.drain(..r.history.len() - t);
    }
    let (h, w) = s.tokenizer.config.grid();
    let clip = s.tokenizer.config.clip_len.max(1).min(r.history.len());
    let grids: Vec<_> = r.history[r.history.len() - clip..].iter().map(|st| st.to_grid(h, w)).collect();
    let frames = s.tokenizer.decode_clip(&grids).map_err(|e| e.to_string())?;
    let msg = ServerMessage::frame(r.step, frames.last().unwrap(), r.pose, next.pose(), branch);
    Ok((msg, next))
}

fn handle_connection(stream: TcpStream, shared: Arc<ServeState>) -> std::io::Result<()> {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    log::info!("session opened: {peer}");
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    let mut session = Session::new(shared);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        for reply in session.handle_line(&line) {
            let mut text = serde_json::to_string(&reply).expect("server messages serialize");
            text.push('\n');
            writer.write_all(text.as_bytes())?;
        }
        writer.flush()?;
    }
    log::info!("session closed: {peer}");
    Ok(())
}

/// Accepts connections forever, one thread per session.
pub fn serve(listener: TcpListener, shared: Arc<ServeState>) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let shared = Arc::clone(&shared);
        std::thread::spawn(move || {
            if let Err(e) = handle_connection(stream, shared) {
                log::warn!("session ended with error: {e}");
            }
        });
    }
    Ok(())
}
