//! Drive-session server: one client steers, watches and records the car.
//!
//! The simulation loop runs on a blocking thread and owns all simulator
//! state. A reader task feeds it parsed client messages and a writer task
//! drains its outbound queue, both in order. With lockstep pacing the loop
//! only advances on `step` requests; with realtime pacing it ticks at 25 Hz
//! and never skips a tick when it falls behind, it only counts the overrun.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use lanepilot::data::{
    downscale_area, load_dataset, record_sample, run_ids, save_dataset, Dataset, SampleMeta, Sample, Source, SpawnPose,
    MODEL_HEIGHT, MODEL_WIDTH,
};
use lanepilot::eval::{Controller, LapCounter, ModelController, Observation};
use lanepilot::expert::{ExpertConfig, ExpertController, OverlayGeometry};
use lanepilot::models::load_weights;
use lanepilot::sim::{cross_track_error, render_camera, step_vehicle, CameraId, CameraSpec, Track, VehicleState, TICK_DT};
use serde_json::json;
use tokio::sync::mpsc;

use crate::protocol::*;
use crate::resolve_checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pacing {
    Lockstep,
    Realtime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameEncoding {
    Binary,
    Json,
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub track: Track,
    pub speed: f64,
    pub spawn: SpawnPose,
    /// Lenses streamed to the client and recorded.
    pub cameras: Vec<CameraId>,
    pub encoding: FrameEncoding,
    pub pacing: Pacing,
    /// Dataset directory that recordings are appended to; `None` disables
    /// recording.
    pub record_dir: Option<PathBuf>,
    pub expert: ExpertConfig,
}

struct App {
    config: SessionConfig,
    busy: AtomicBool,
}

/// Clears the one-client flag when the connection ends or never upgrades.
struct Occupied(Arc<App>);

impl Drop for Occupied {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::SeqCst);
    }
}

/// Binds `addr` and serves `/session` in the background.
pub async fn start(config: SessionConfig, addr: SocketAddr) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = Arc::new(App { config, busy: AtomicBool::new(false) });
    let router = Router::new().route("/session", get(upgrade)).with_state(app);
    let handle = tokio::spawn(async move {
        let _ = axum::serve(listener, router).await;
    });
    Ok((local, handle))
}

async fn upgrade(ws: WebSocketUpgrade, State(app): State<Arc<App>>) -> Response {
    if app.busy.swap(true, Ordering::SeqCst) {
        return (StatusCode::CONFLICT, "session already has a client").into_response();
    }
    let guard = Occupied(app);
    ws.on_upgrade(move |socket| serve_socket(socket, guard))
}

enum Outbound {
    Text(String),
    Binary(Vec<u8>),
}

type Inbound = Result<(u64, ClientMessage), Rejection>;

async fn serve_socket(socket: WebSocket, guard: Occupied) {
    let (mut sink, mut stream) = socket.split();
    let (in_tx, in_rx) = mpsc::unbounded_channel::<Inbound>();
    let (out_tx, mut out_rx) = mpsc::channel::<Outbound>(256);
    let config = guard.0.config.clone();
    let sim = tokio::task::spawn_blocking(move || SessionLoop::new(config, out_tx).run(in_rx));
    let writer = tokio::spawn(async move {
        while let Some(m) = out_rx.recv().await {
            let msg = match m {
                Outbound::Text(t) => Message::Text(t.into()),
                Outbound::Binary(b) => Message::Binary(b.into()),
            };
            if sink.send(msg).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    while let Some(Ok(msg)) = stream.next().await {
        let parsed = match msg {
            Message::Text(t) => parse_client(t.as_str()),
            Message::Binary(_) => Err(Rejection { kind: None, message: "binary messages are server-to-client only".into() }),
            Message::Close(_) => break,
            _ => continue,
        };
        if in_tx.send(parsed).is_err() {
            break;
        }
    }
    drop(in_tx);
    let _ = sim.await;
    let _ = writer.await;
    drop(guard);
}

enum Driving {
    Manual,
    Pd(ExpertController),
    Model { controller: ModelController, history: VecDeque<Arc<Observation>> },
}

struct Recording {
    source: Source,
    run_id: String,
    samples: Vec<Sample>,
}

struct SessionLoop {
    config: SessionConfig,
    out: mpsc::Sender<Outbound>,
    state: VehicleState,
    tick: u64,
    laps: LapCounter,
    manual: f64,
    mode: Mode,
    driving: Driving,
    perception: ExpertController,
    recording: Option<Recording>,
    overruns: u64,
    open: bool,
}

impl SessionLoop {
    fn new(config: SessionConfig, out: mpsc::Sender<Outbound>) -> Self {
        let state = config.spawn.place(&config.track, config.speed).expect("spawn validated at startup");
        let laps = LapCounter::new(config.track.length(), config.track.nearest(state.x, state.y).arclength);
        let perception = ExpertController::new(config.expert.clone()).expect("expert validated at startup");
        Self {
            config,
            out,
            state,
            tick: 0,
            laps,
            manual: 0.0,
            mode: Mode::Manual,
            driving: Driving::Manual,
            perception,
            recording: None,
            overruns: 0,
            open: true,
        }
    }

    fn send(&mut self, env: Envelope) {
        if self.open && self.out.blocking_send(Outbound::Text(env.to_text())).is_err() {
            self.open = false;
        }
    }

    fn send_binary(&mut self, bytes: Vec<u8>) {
        if self.open && self.out.blocking_send(Outbound::Binary(bytes)).is_err() {
            self.open = false;
        }
    }

    fn reject(&mut self, kind: &str, message: String) {
        let env = error_message(self.tick, &Rejection { kind: Some(kind.into()), message });
        self.send(env);
    }

    fn ack(&mut self, request: &str, mut details: serde_json::Value) {
        details["request"] = json!(request);
        let env = Envelope::new("ack", self.tick, details);
        self.send(env);
    }

    fn run(mut self, mut rx: mpsc::UnboundedReceiver<Inbound>) {
        let hello = json!({
            "track": self.config.track.spec(),
            "cameras": self.config.cameras,
            "encoding": self.config.encoding,
            "pacing": match self.config.pacing { Pacing::Lockstep => "lockstep", Pacing::Realtime => "realtime" },
            "recording_enabled": self.config.record_dir.is_some(),
            "mode": self.mode.to_string(),
            "speed": self.state.speed,
        });
        self.send(Envelope::new("hello", self.tick, hello));
        let period = Duration::from_secs_f64(TICK_DT);
        let mut pending = 0u64;
        let mut deadline = Instant::now() + period;
        while self.open {
            let realtime = self.config.pacing == Pacing::Realtime;
            if !realtime && pending == 0 {
                match rx.blocking_recv() {
                    Some(m) => pending += self.handle(m),
                    None => break,
                }
            }
            loop {
                match rx.try_recv() {
                    Ok(m) => pending += self.handle(m),
                    Err(mpsc::error::TryRecvError::Empty) => break,
                    Err(mpsc::error::TryRecvError::Disconnected) => {
                        self.open = false;
                        break;
                    }
                }
            }
            if !self.open {
                break;
            }
            if realtime || pending > 0 {
                let started = Instant::now();
                self.advance();
                pending = pending.saturating_sub(1);
                if started.elapsed() > period {
                    self.overruns += 1;
                }
                if realtime {
                    let now = Instant::now();
                    if now < deadline {
                        std::thread::sleep(deadline - now);
                        deadline += period;
                    } else {
                        deadline = now + period;
                    }
                }
            }
        }
        if self.recording.is_some() {
            let _ = self.finish_recording();
        }
    }

    /// Applies one client message; returns the ticks it asks to advance.
    fn handle(&mut self, msg: Inbound) -> u64 {
        let msg = match msg {
            Ok((_, m)) => m,
            Err(r) => {
                let env = error_message(self.tick, &r);
                self.send(env);
                return 0;
            }
        };
        match msg {
            ClientMessage::Steer { degrees } => self.manual = degrees,
            ClientMessage::Speed { mps } => {
                self.state.speed = mps;
                self.ack("speed", json!({ "speed": mps }));
            }
            ClientMessage::Step { ticks } => {
                if self.config.pacing == Pacing::Realtime {
                    self.reject("step", "step is only accepted with lockstep pacing".into());
                } else {
                    return ticks as u64;
                }
            }
            ClientMessage::Reset(spawn) => match spawn.place(&self.config.track, self.state.speed) {
                Ok(s) => {
                    self.state = s;
                    self.laps = LapCounter::new(self.config.track.length(), self.config.track.nearest(s.x, s.y).arclength);
                    self.manual = 0.0;
                    match &mut self.driving {
                        Driving::Manual => {}
                        Driving::Pd(e) => e.reset(),
                        Driving::Model { controller, history } => {
                            controller.reset();
                            history.clear();
                        }
                    }
                    self.ack("reset", json!({ "spawn": spawn }));
                }
                Err(e) => self.reject("reset", e.to_string()),
            },
            ClientMessage::Mode(mode) => match self.driving_for(&mode) {
                Ok(d) => {
                    self.driving = d;
                    self.mode = mode;
                    let m = self.mode.to_string();
                    self.ack("mode", json!({ "mode": m }));
                }
                Err(e) => self.reject("mode", e),
            },
            ClientMessage::Record { action: RecordAction::Start, source } => {
                if self.config.record_dir.is_none() {
                    self.reject("record", "recording is disabled in this session; use `collect`".into());
                } else if self.recording.is_some() {
                    self.reject("record", "already recording".into());
                } else {
                    let run_id = self.fresh_run_id();
                    self.ack("record", json!({ "recording": true, "run_id": run_id, "source": source }));
                    self.recording = Some(Recording { source, run_id, samples: Vec::new() });
                }
            }
            ClientMessage::Record { action: RecordAction::Stop, .. } => {
                if self.recording.is_none() {
                    self.reject("record", "not recording".into());
                } else {
                    match self.finish_recording() {
                        Ok(details) => self.ack("record", details),
                        Err(e) => self.reject("record", e),
                    }
                }
            }
        }
        0
    }

    fn driving_for(&self, mode: &Mode) -> Result<Driving, String> {
        Ok(match mode {
            Mode::Manual => Driving::Manual,
            Mode::Pd => Driving::Pd(ExpertController::new(self.config.expert.clone()).map_err(|e| e.to_string())?),
            Mode::Model(path) => {
                let file = resolve_checkpoint(Path::new(path));
                let params = load_weights(&file, None).map_err(|e| format!("cannot load model {}: {e}", file.display()))?;
                Driving::Model { controller: ModelController::new(Arc::new(params)).cached(), history: VecDeque::new() }
            }
        })
    }

    fn fresh_run_id(&self) -> String {
        let taken = self
            .config
            .record_dir
            .as_deref()
            .filter(|d| d.join("manifest.jsonl").exists())
            .and_then(|d| load_dataset(d).ok())
            .map(|ds| run_ids(&ds.samples))
            .unwrap_or_default();
        (0..).map(|k| format!("session-{k}")).find(|id| !taken.contains(id)).expect("unbounded ids")
    }

    fn finish_recording(&mut self) -> Result<serde_json::Value, String> {
        let rec = self.recording.take().expect("recording active");
        let dir = self.config.record_dir.clone().expect("recording enabled");
        let added = rec.samples.len();
        let total = append_samples(&dir, rec.samples)?;
        Ok(json!({ "recording": false, "run_id": rec.run_id, "samples_added": added, "dataset_samples": total }))
    }

    fn advance(&mut self) {
        let views = [CameraSpec::left(), CameraSpec::right()].map(|c| render_camera(&self.config.track, &self.state, &c));
        for cam in self.config.cameras.clone() {
            let f = &views[cam.code() as usize];
            match self.config.encoding {
                FrameEncoding::Binary => self.send_binary(encode_binary_frame(self.tick, f)),
                FrameEncoding::Json => self.send(frame_message(self.tick, f)),
            }
        }
        let primary = self.config.cameras.first().copied().unwrap_or(CameraId::Left);
        let seen = self.perception.perceive(&views[primary.code() as usize]);
        let overlay = OverlayGeometry::new(&seen, views[0].width, views[0].height);
        self.send(overlay_message(self.tick, primary, &overlay));

        let w = match &mut self.driving {
            Driving::Manual => self.manual,
            Driving::Pd(e) => e.step_views(&[&views[0], &views[1]]).steering,
            Driving::Model { controller, history } => {
                let window = controller.window();
                let mut left = views[0].clone();
                left.tick = self.tick;
                history.push_back(Arc::new(Observation { tick: self.tick, frames: vec![left] }));
                while history.len() > window {
                    history.pop_front();
                }
                while history.len() < window {
                    let first = history[0].clone();
                    history.push_front(first);
                }
                controller.steer(history.make_contiguous())
            }
        };
        let w = if w.is_finite() {
            w
        } else {
            self.reject("mode", "model produced a non-finite command; switched to manual".into());
            self.driving = Driving::Manual;
            self.mode = Mode::Manual;
            self.manual
        };
        let cmd = self.state.saturate(w);
        if let Some(rec) = &mut self.recording {
            for &cam in &self.config.cameras {
                let frame = downscale_area(&views[cam.code() as usize], MODEL_WIDTH, MODEL_HEIGHT);
                let meta = SampleMeta { tick: self.tick, camera_id: cam, source: rec.source, run_id: rec.run_id.clone() };
                if let Ok(s) = record_sample(Arc::new(frame), cmd, meta, self.state.steering_limit) {
                    rec.samples.push(s);
                }
            }
        }
        let cte = cross_track_error(&self.config.track, &self.state);
        let state = StatePayload {
            x: self.state.x,
            y: self.state.y,
            heading: self.state.heading,
            speed: self.state.speed,
            cross_track_error: cte,
            steering: cmd,
            laps: self.laps.laps(),
            mode: self.mode.to_string(),
            recording: self.recording.is_some(),
            recorded_samples: self.recording.as_ref().map_or(0, |r| r.samples.len()),
            overruns: self.overruns,
        };
        self.send(Envelope::new("state", self.tick, serde_json::to_value(&state).expect("state serializes")));
        match step_vehicle(&self.state, cmd, TICK_DT) {
            Ok(s) => self.state = s,
            Err(e) => self.reject("step", e.to_string()),
        }
        self.tick += 1;
        let bound = 0.5 * self.config.track.spec().usable_half_width;
        let near = self.config.track.nearest(self.state.x, self.state.y);
        self.laps.update(near.arclength, cross_track_error(&self.config.track, &self.state).abs() <= bound);
    }
}

/// Appends `samples` to the dataset in `dir`, creating it if needed, and
/// returns the new total.
pub fn append_samples(dir: &Path, samples: Vec<Sample>) -> Result<usize, String> {
    let mut all = if dir.join("manifest.jsonl").exists() {
        load_dataset(dir).map_err(|e| e.to_string())?.samples
    } else {
        Vec::new()
    };
    if samples.is_empty() {
        return Ok(all.len());
    }
    all.extend(samples);
    let ds = Dataset::new(all).map_err(|e| e.to_string())?;
    save_dataset(&ds, dir).map_err(|e| e.to_string())?;
    Ok(ds.samples.len())
}
