//! Wire format of the `/session` WebSocket.
//!
//! Text frames carry a JSON envelope `{type, tick, payload}`. Binary frames
//! carry raw RGB pixels behind a 16-byte little-endian header.

use base64::Engine;
use lanepilot::data::{Source, SpawnPose};
use lanepilot::expert::OverlayGeometry;
use lanepilot::sim::{CameraId, Frame};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const FRAME_HEADER_LEN: usize = 16;
pub const MAX_SPEED: f64 = 3.0;
pub const MAX_STEP_TICKS: u32 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    #[serde(rename = "type")]
    pub kind: String,
    pub tick: u64,
    pub payload: Value,
}

impl Envelope {
    pub fn new(kind: &str, tick: u64, payload: Value) -> Self {
        Self { kind: kind.into(), tick, payload }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordAction {
    Start,
    Stop,
}

/// Who drives in the session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mode {
    Manual,
    Pd,
    Model(String),
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "manual" => Ok(Mode::Manual),
            "pd" => Ok(Mode::Pd),
            _ => match s.strip_prefix("model:") {
                Some(path) if !path.is_empty() => Ok(Mode::Model(path.to_string())),
                _ => Err(format!("unknown mode {s:?}; expected manual, pd or model:<checkpoint>")),
            },
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Manual => f.write_str("manual"),
            Mode::Pd => f.write_str("pd"),
            Mode::Model(p) => write!(f, "model:{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientMessage {
    Steer { degrees: f64 },
    Speed { mps: f64 },
    Record { action: RecordAction, source: Source },
    Mode(Mode),
    Reset(SpawnPose),
    /// Lockstep pacing only: advance this many ticks.
    Step { ticks: u32 },
}

impl ClientMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ClientMessage::Steer { .. } => "steer",
            ClientMessage::Speed { .. } => "speed",
            ClientMessage::Record { .. } => "record",
            ClientMessage::Mode(_) => "mode",
            ClientMessage::Reset(_) => "reset",
            ClientMessage::Step { .. } => "step",
        }
    }
}

/// A rejected client message: what could be read of its type, and why.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub kind: Option<String>,
    pub message: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SteerPayload {
    degrees: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpeedPayload {
    mps: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordPayload {
    action: RecordAction,
    #[serde(default = "human")]
    source: Source,
}

fn human() -> Source {
    Source::Human
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModePayload {
    mode: String,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ResetPayload {
    fraction: f64,
    lateral: f64,
    heading: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StepPayload {
    #[serde(default = "one")]
    ticks: u32,
}

fn one() -> u32 {
    1
}

fn payload<T: serde::de::DeserializeOwned>(kind: &str, v: Value) -> Result<T, Rejection> {
    serde_json::from_value(v).map_err(|e| Rejection { kind: Some(kind.into()), message: format!("bad {kind} payload: {e}") })
}

/// Parses and validates one text frame from the client.
pub fn parse_client(text: &str) -> Result<(u64, ClientMessage), Rejection> {
    let env: Envelope = serde_json::from_str(text).map_err(|e| {
        let kind = serde_json::from_str::<Value>(text).ok().and_then(|v| v["type"].as_str().map(String::from));
        Rejection { kind, message: format!("malformed envelope: {e}") }
    })?;
    let kind = env.kind.as_str();
    let reject = |message: String| Rejection { kind: Some(kind.into()), message };
    let msg = match kind {
        "steer" => {
            let p: SteerPayload = payload(kind, env.payload)?;
            if !p.degrees.is_finite() {
                return Err(reject("steering must be finite".into()));
            }
            ClientMessage::Steer { degrees: p.degrees }
        }
        "speed" => {
            let p: SpeedPayload = payload(kind, env.payload)?;
            if !(p.mps > 0.0 && p.mps <= MAX_SPEED) {
                return Err(reject(format!("speed must be in (0, {MAX_SPEED}] m/s, got {}", p.mps)));
            }
            ClientMessage::Speed { mps: p.mps }
        }
        "record" => {
            let p: RecordPayload = payload(kind, env.payload)?;
            ClientMessage::Record { action: p.action, source: p.source }
        }
        "mode" => {
            let p: ModePayload = payload(kind, env.payload)?;
            ClientMessage::Mode(Mode::parse(&p.mode).map_err(reject)?)
        }
        "reset" => {
            let p: ResetPayload = if env.payload.is_null() { ResetPayload::default() } else { payload(kind, env.payload)? };
            ClientMessage::Reset(SpawnPose { fraction: p.fraction, lateral: p.lateral, heading: p.heading })
        }
        "step" => {
            let p: StepPayload = if env.payload.is_null() { StepPayload { ticks: 1 } } else { payload(kind, env.payload)? };
            if p.ticks == 0 || p.ticks > MAX_STEP_TICKS {
                return Err(reject(format!("step ticks must be in 1..={MAX_STEP_TICKS}")));
            }
            ClientMessage::Step { ticks: p.ticks }
        }
        other => return Err(reject(format!("unknown message type {other:?}"))),
    };
    Ok((env.tick, msg))
}

/// Header of a binary pixel frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub tick: u32,
    pub width: u16,
    pub height: u16,
    pub camera: u8,
}

impl FrameHeader {
    pub fn encode(&self) -> [u8; FRAME_HEADER_LEN] {
        let mut b = [0u8; FRAME_HEADER_LEN];
        b[0..4].copy_from_slice(&self.tick.to_le_bytes());
        b[4..6].copy_from_slice(&self.width.to_le_bytes());
        b[6..8].copy_from_slice(&self.height.to_le_bytes());
        b[8] = self.camera;
        b
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < FRAME_HEADER_LEN {
            return None;
        }
        Some(Self {
            tick: u32::from_le_bytes(bytes[0..4].try_into().unwrap()),
            width: u16::from_le_bytes(bytes[4..6].try_into().unwrap()),
            height: u16::from_le_bytes(bytes[6..8].try_into().unwrap()),
            camera: bytes[8],
        })
    }
}

/// Header plus RGB rows. The tick wraps at 2³².
pub fn encode_binary_frame(tick: u64, frame: &Frame) -> Vec<u8> {
    let header = FrameHeader {
        tick: tick as u32,
        width: frame.width as u16,
        height: frame.height as u16,
        camera: frame.camera_id.code(),
    };
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + frame.pixels.len());
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(&frame.pixels);
    out
}

/// Splits a binary frame back into header and pixels, checking the length.
pub fn decode_binary_frame(bytes: &[u8]) -> Option<(FrameHeader, &[u8])> {
    let h = FrameHeader::decode(bytes)?;
    let pixels = &bytes[FRAME_HEADER_LEN..];
    (pixels.len() == h.width as usize * h.height as usize * 3).then_some((h, pixels))
}

/// JSON `frame` message with one base64 string per RGB row.
pub fn frame_message(tick: u64, frame: &Frame) -> Envelope {
    let engine = base64::engine::general_purpose::STANDARD;
    let rows: Vec<String> = frame.pixels.chunks(frame.width * 3).map(|r| engine.encode(r)).collect();
    Envelope::new(
        "frame",
        tick,
        json!({ "camera_id": frame.camera_id, "width": frame.width, "height": frame.height, "rows": rows }),
    )
}

/// Telemetry for one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePayload {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub cross_track_error: f64,
    /// Command applied on this tick, degrees.
    pub steering: f64,
    pub laps: u32,
    pub mode: String,
    pub recording: bool,
    pub recorded_samples: usize,
    /// Ticks whose processing exceeded one tick period.
    pub overruns: u64,
}

pub fn overlay_message(tick: u64, camera: CameraId, overlay: &OverlayGeometry) -> Envelope {
    let mut v = serde_json::to_value(overlay).expect("overlay serializes");
    v["camera_id"] = json!(camera);
    Envelope::new("overlay", tick, v)
}

pub fn error_message(tick: u64, rejection: &Rejection) -> Envelope {
    Envelope::new("error", tick, json!({ "request": rejection.kind, "message": rejection.message }))
}
