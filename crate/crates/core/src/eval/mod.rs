//! Closed-loop scoring: laps, cross-track error, smoothness and latency.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{downscale_area, zscore_normalize, SpawnPose};
use crate::expert::{ExpertConfig, ExpertController};
use crate::models::{ModelParams, Variant, STEERING_SCALE};
use crate::sim::{
    cross_track_error, render_camera, step_vehicle, CameraId, CameraSpec, Frame, Track, TrackSpec, TICK_DT,
};
use crate::train::Metrics;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{0}")]
    Model(#[from] crate::models::ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Ticks the car may stay beyond half the usable half-width.
pub const DNF_TICKS: u32 = 25;
pub const LATENCY_BUDGET_MS: f64 = 40.0;

/// Rendered lenses of one tick, in the controller's camera order.
#[derive(Debug, Clone)]
pub struct Observation {
    pub tick: u64,
    pub frames: Vec<Frame>,
}

/// Anything that turns camera frames into a steering command in degrees.
pub trait Controller {
    fn name(&self) -> String;
    /// Lenses to render each tick; empty means none.
    fn cameras(&self) -> Vec<CameraId>;
    /// Observations consumed per command.
    fn window(&self) -> usize {
        1
    }
    fn reset(&mut self) {}
    /// `history` holds exactly `window()` observations, oldest first.
    fn steer(&mut self, history: &[Arc<Observation>]) -> f64;
}

/// Fixed command, for baselines and tests.
pub struct ConstantController(pub f64);

impl Controller for ConstantController {
    fn name(&self) -> String {
        format!("constant({})", self.0)
    }
    fn cameras(&self) -> Vec<CameraId> {
        Vec::new()
    }
    fn steer(&mut self, _: &[Arc<Observation>]) -> f64 {
        self.0
    }
}

/// The PD line follower over both lenses.
pub struct ExpertDriver(pub ExpertController);

impl ExpertDriver {
    pub fn new(config: ExpertConfig) -> Result<Self> {
        ExpertController::new(config).map(Self).map_err(|e| EvalError::Contract(e.to_string()))
    }
}

impl Controller for ExpertDriver {
    fn name(&self) -> String {
        "pd".into()
    }
    fn cameras(&self) -> Vec<CameraId> {
        vec![CameraId::Left, CameraId::Right]
    }
    fn reset(&mut self) {
        self.0.reset();
    }
    fn steer(&mut self, history: &[Arc<Observation>]) -> f64 {
        let obs = history.last().expect("window of one");
        let views: Vec<&Frame> = obs.frames.iter().collect();
        self.0.step_views(&views).steering
    }
}

/// A trained network reading the left lens.
pub struct ModelController {
    pub params: Arc<ModelParams>,
    pub label: String,
    /// Backbone features of recent ticks, reused across sliding windows.
    cache: Option<VecDeque<(u64, Vec<f32>)>>,
}

impl ModelController {
    pub fn new(params: Arc<ModelParams>) -> Self {
        let label = match (params.variant(), params.meta.ode) {
            (Variant::CnnNode, Some(o)) => format!("cnn-node-{}", o.solver.as_str()),
            (v, _) => v.to_string(),
        };
        Self { params, label, cache: None }
    }

    /// Reuses per-tick backbone features between overlapping windows;
    /// commands are bit-identical to the uncached path.
    pub fn cached(mut self) -> Self {
        self.cache = Some(VecDeque::new());
        self
    }

    /// Downscales and normalizes one lens the way training frames were.
    pub fn preprocess(&self, frame: &Frame) -> crate::tensor::Tensor {
        let [_, h, w] = self.params.meta.input_shape;
        let small = if (frame.width, frame.height) == (w, h) { frame.clone() } else { downscale_area(frame, w, h) };
        zscore_normalize(&small, &self.params.meta.norm_stats)
    }
}

impl Controller for ModelController {
    fn name(&self) -> String {
        self.label.clone()
    }
    fn cameras(&self) -> Vec<CameraId> {
        vec![CameraId::Left]
    }
    fn window(&self) -> usize {
        self.params.variant().window()
    }
    fn reset(&mut self) {
        if let Some(c) = &mut self.cache {
            c.clear();
        }
    }
    fn steer(&mut self, history: &[Arc<Observation>]) -> f64 {
        let y = match self.cache.take() {
            None => {
                let xs: Vec<_> = history.iter().map(|o| self.preprocess(&o.frames[0])).collect();
                self.params.predict(&xs)
            }
            Some(mut cache) => {
                let feats: crate::models::Result<Vec<Vec<f32>>> = history
                    .iter()
                    .map(|o| match cache.iter().find(|(t, _)| *t == o.tick) {
                        Some((_, f)) => Ok(f.clone()),
                        None => {
                            let f = self.params.features(&self.preprocess(&o.frames[0]))?;
                            cache.push_back((o.tick, f.clone()));
                            if cache.len() > self.window() + 1 {
                                cache.pop_front();
                            }
                            Ok(f)
                        }
                    })
                    .collect();
                self.cache = Some(cache);
                feats.and_then(|f| self.params.predict_from_features(&f))
            }
        };
        match y {
            Ok(y) => y as f64 * STEERING_SCALE as f64,
            Err(_) => f64::NAN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalScenario {
    /// Built-in track name or path to a track JSON file.
    pub track: String,
    pub speed: f64,
    pub starts: Vec<SpawnPose>,
    pub max_ticks: u64,
    /// Stop an episode once this many laps are done.
    pub lap_target: Option<u32>,
    pub lighting_jitter: f32,
    pub seed: u64,
}

impl EvalScenario {
    /// Enough ticks for `laps` laps plus a 20 % margin.
    pub fn laps(track: &str, speed: f64, laps: u32, starts: Vec<SpawnPose>, seed: u64) -> Result<Self> {
        let t = resolve_track(track)?;
        let per_lap = t.length() / (speed * TICK_DT);
        Ok(Self {
            track: track.to_string(),
            speed,
            starts,
            max_ticks: (per_lap * laps as f64 * 1.2).ceil() as u64,
            lap_target: Some(laps),
            lighting_jitter: 0.0,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.starts.is_empty() || !(self.speed > 0.0) || self.max_ticks == 0 || !(0.0..1.0).contains(&self.lighting_jitter) {
            return Err(EvalError::Contract(format!("invalid scenario {self:?}")));
        }
        Ok(())
    }
}

pub fn resolve_track(name: &str) -> Result<Track> {
    let spec = match TrackSpec::builtin(name) {
        Some(s) => s,
        None => TrackSpec::load(Path::new(name)).map_err(|e| EvalError::Contract(format!("track {name}: {e}")))?,
    };
    Track::new(spec).map_err(|e| EvalError::Contract(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dnf {
    pub tick: u64,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapReport {
    pub start: SpawnPose,
    pub laps_completed: u32,
    pub ticks: u64,
    pub mean_abs_cte: f64,
    pub max_abs_cte: f64,
    /// Mean |Δw| between consecutive ticks, degrees.
    pub smoothness_deg: f64,
    pub dnf: Option<Dnf>,
}

/// Signed forward progress along the centerline, immune to the lap seam.
#[derive(Debug, Clone, Copy)]
pub struct LapCounter {
    length: f64,
    last: f64,
    progress: f64,
    laps: u32,
}

impl LapCounter {
    pub fn new(length: f64, start_arclength: f64) -> Self {
        Self { length, last: start_arclength, progress: 0.0, laps: 0 }
    }

    /// Feeds the next arclength; counts a lap on each new forward crossing
    /// of the start line made while `on_track`.
    pub fn update(&mut self, arclength: f64, on_track: bool) -> u32 {
        let mut d = arclength - self.last;
        if d > self.length / 2.0 {
            d -= self.length;
        } else if d < -self.length / 2.0 {
            d += self.length;
        }
        self.last = arclength;
        self.progress += d;
        if on_track && self.progress >= (self.laps + 1) as f64 * self.length {
            self.laps += 1;
        }
        self.laps
    }

    pub fn laps(&self) -> u32 {
        self.laps
    }
}

/// One episode from `start`.
pub fn run_episode(controller: &mut dyn Controller, track: &Track, scenario: &EvalScenario, start: &SpawnPose, seed: u64) -> Result<LapReport> {
    scenario.validate()?;
    controller.reset();
    let mut state = start.place(track, scenario.speed).map_err(|e| EvalError::Contract(e.to_string()))?;
    let cams: Vec<CameraSpec> = controller.cameras().into_iter().map(CameraSpec::for_id).collect();
    let window = controller.window().max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 0.5 * track.spec().usable_half_width;
    let mut laps = LapCounter::new(track.length(), track.nearest(state.x, state.y).arclength);
    let mut history: VecDeque<Arc<Observation>> = VecDeque::with_capacity(window);
    let (mut sum_cte, mut max_cte, mut sum_dw) = (0.0f64, 0.0f64, 0.0f64);
    let (mut outside, mut prev_cmd) = (0u32, None::<f64>);
    let mut dnf = None;
    let mut ticks = 0u64;
    while ticks < scenario.max_ticks {
        let light = if scenario.lighting_jitter > 0.0 {
            rng.gen_range(1.0 - scenario.lighting_jitter..=1.0 + scenario.lighting_jitter)
        } else {
            1.0
        };
        let frames = cams
            .iter()
            .map(|c| {
                let f = render_camera(track, &state, c);
                if light == 1.0 { f } else { f.scaled(light) }
            })
            .collect();
        let obs = Arc::new(Observation { tick: state.tick, frames });
        if history.len() == window {
            history.pop_front();
        }
        history.push_back(obs);
        while history.len() < window {
            // First ticks of a run: repeat the oldest frame.
            let first = history[0].clone();
            history.push_front(first);
        }
        let w = controller.steer(history.make_contiguous());
        if !w.is_finite() {
            dnf = Some(Dnf { tick: state.tick, cause: "controller-nan".into() });
            break;
        }
        let cmd = state.saturate(w);
        if let Some(p) = prev_cmd {
            sum_dw += (cmd - p).abs();
        }
        prev_cmd = Some(cmd);
        state = step_vehicle(&state, cmd, TICK_DT).map_err(|e| EvalError::Contract(e.to_string()))?;
        ticks += 1;
        let near = track.nearest(state.x, state.y);
        let cte = cross_track_error(track, &state).abs();
        sum_cte += cte;
        max_cte = max_cte.max(cte);
        outside = if cte > bound { outside + 1 } else { 0 };
        laps.update(near.arclength, cte <= bound);
        if outside >= DNF_TICKS {
            dnf = Some(Dnf { tick: state.tick, cause: "off-track".into() });
            break;
        }
        if scenario.lap_target.is_some_and(|n| laps.laps() >= n) {
            break;
        }
    }
    Ok(LapReport {
        start: *start,
        laps_completed: laps.laps(),
        ticks,
        mean_abs_cte: if ticks > 0 { sum_cte / ticks as f64 } else { 0.0 },
        max_abs_cte: max_cte,
        smoothness_deg: if ticks > 1 { sum_dw / (ticks - 1) as f64 } else { 0.0 },
        dnf,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub controller: String,
    pub scenario: EvalScenario,
    pub episodes: Vec<LapReport>,
}

impl ScenarioReport {
    pub fn all_completed(&self, laps: u32) -> bool {
        self.episodes.iter().all(|e| e.dnf.is_none() && e.laps_completed >= laps)
    }

    pub fn any_dnf(&self) -> bool {
        self.episodes.iter().any(|e| e.dnf.is_some())
    }

    pub fn min_laps(&self) -> u32 {
        self.episodes.iter().map(|e| e.laps_completed).min().unwrap_or(0)
    }

    pub fn max_abs_cte(&self) -> f64 {
        self.episodes.iter().map(|e| e.max_abs_cte).fold(0.0, f64::max)
    }
}

/// Every start pose of the scenario; episode `i` uses seed `seed + i`.
pub fn run_closed_loop(controller: &mut dyn Controller, scenario: &EvalScenario) -> Result<ScenarioReport> {
    scenario.validate()?;
    let track = resolve_track(&scenario.track)?;
    let episodes = scenario
        .starts
        .iter()
        .enumerate()
        .map(|(i, s)| run_episode(controller, &track, scenario, s, scenario.seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioReport { controller: controller.name(), scenario: scenario.clone(), episodes })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub samples: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub budget_ms: f64,
    pub pass: bool,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times `n` calls on cycling windows of `observations` after 10 warmup calls.
pub fn measure_latency(controller: &mut dyn Controller, observations: &[Arc<Observation>], n: usize) -> Result<LatencyReport> {
    let window = controller.window().max(1);
    if observations.len() < window || n == 0 {
        return Err(EvalError::Contract(format!(
            "latency needs at least {window} observations and one sample"
        )));
    }
    let windows = observations.len() - window + 1;
    let mut times = Vec::with_capacity(n);
    for i in 0..n + 10 {
        let k = i % windows;
        let t = Instant::now();
        let w = controller.steer(&observations[k..k + window]);
        let ms = t.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(w);
        if i >= 10 {
            times.push(ms);
        }
    }
    times.sort_by(f64::total_cmp);
    let p95 = percentile(&times, 0.95);
    Ok(LatencyReport {
        samples: n,
        p50_ms: percentile(&times, 0.5),
        p95_ms: p95,
        max_ms: *times.last().unwrap(),
        budget_ms: LATENCY_BUDGET_MS,
        pass: p95 <= LATENCY_BUDGET_MS,
    })
}

/// Renders `count` consecutive observations of the expert driving, for
/// latency measurement.
pub fn sample_observations(track: &Track, cameras: &[CameraId], speed: f64, count: usize) -> Result<Vec<Arc<Observation>>> {
    let mut expert = ExpertDriver::new(ExpertConfig::default())?;
    let mut state = SpawnPose::centered(0.0).place(track, speed).map_err(|e| EvalError::Contract(e.to_string()))?;
    let both = [CameraSpec::left(), CameraSpec::right()];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let views: Vec<Frame> = both.iter().map(|c| render_camera(track, &state, c)).collect();
        let w = expert.steer(&[Arc::new(Observation { tick: state.tick, frames: views.clone() })]);
        let frames = cameras.iter().map(|c| views[c.code() as usize].clone()).collect();
        out.push(Arc::new(Observation { tick: state.tick, frames }));
        state = step_vehicle(&state, w, TICK_DT).map_err(|e| EvalError::Contract(e.to_string()))?;
    }
    Ok(out)
}

/// Host description for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub cpu: String,
    pub logical_cores: usize,
    pub memory_mb: Option<u64>,
    pub os: String,
}

pub fn machine_info() -> MachineInfo {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|v| v.trim().to_string()))
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let memory_mb = std::fs::read_to_string("/proc/meminfo").ok().and_then(|s| {
        s.lines()
            .find(|l| l.starts_with("MemTotal:"))
            .and_then(|l| l.split_whitespace().nth(1))
            .and_then(|kb| kb.parse::<u64>().ok())
            .map(|kb| kb / 1024)
    });
    MachineInfo {
        cpu,
        logical_cores: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        memory_mb,
        os: std::env::consts::OS.to_string(),
    }
}

/// One controller's results for a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareEntry {
    pub name: String,
    pub report: ScenarioReport,
    pub metrics: Option<Metrics>,
    pub latency: Option<LatencyReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub name: String,
    pub mean_laps: f64,
    pub dnf_count: usize,
    pub mean_abs_cte: f64,
    pub max_abs_cte: f64,
    pub smoothness_deg: f64,
    pub mse_normalized: Option<f64>,
    pub mse_deg2: Option<f64>,
    pub within_5deg_fraction: Option<f64>,
    pub latency_p95_ms: Option<f64>,
    /// Differences to the first row: laps, mean cte, max cte, smoothness.
    pub delta: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub scenario: EvalScenario,
    pub rows: Vec<CompareRow>,
}

pub fn compare_models(entries: &[CompareEntry]) -> Result<Comparison> {
    if entries.len() < 2 {
        return Err(EvalError::Contract("comparison needs at least two reports".into()));
    }
    let scenario = &entries[0].report.scenario;
    if let Some(e) = entries.iter().find(|e| &e.report.scenario != scenario) {
        return Err(EvalError::Contract(format!(
            "report {} ran a different scenario ({} at {} m/s) than {} ({} at {} m/s)",
            e.name, e.report.scenario.track, e.report.scenario.speed, entries[0].name, scenario.track, scenario.speed
        )));
    }
    let mut rows: Vec<CompareRow> = entries
        .iter()
        .map(|e| {
            let eps = &e.report.episodes;
            let n = eps.len().max(1) as f64;
            CompareRow {
                name: e.name.clone(),
                mean_laps: eps.iter().map(|r| r.laps_completed as f64).sum::<f64>() / n,
                dnf_count: eps.iter().filter(|r| r.dnf.is_some()).count(),
                mean_abs_cte: eps.iter().map(|r| r.mean_abs_cte).sum::<f64>() / n,
                max_abs_cte: e.report.max_abs_cte(),
                smoothness_deg: eps.iter().map(|r| r.smoothness_deg).sum::<f64>() / n,
                mse_normalized: e.metrics.map(|m| m.mse_normalized),
                mse_deg2: e.metrics.map(|m| m.mse_deg2),
                within_5deg_fraction: e.metrics.map(|m| m.within_5deg_fraction),
                latency_p95_ms: e.latency.map(|l| l.p95_ms),
                delta: [0.0; 4],
            }
        })
        .collect();
    let base = rows[0].clone();
    for r in &mut rows {
        r.delta = [
            r.mean_laps - base.mean_laps,
            r.mean_abs_cte - base.mean_abs_cte,
            r.max_abs_cte - base.max_abs_cte,
            r.smoothness_deg - base.smoothness_deg,
        ];
    }
    Ok(Comparison { scenario: scenario.clone(), rows })
}

impl Comparison {
    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        let header = ["model", "laps", "dnf", "mean|cte|", "max|cte|", "|dw|", "mse", "mse deg2", "within5", "p95 ms"];
        let body: Vec<[String; 10]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.name.clone(),
                    format!("{:.1}", r.mean_laps),
                    r.dnf_count.to_string(),
                    format!("{:.4}", r.mean_abs_cte),
                    format!("{:.4}", r.max_abs_cte),
                    format!("{:.3}", r.smoothness_deg),
                    opt(r.mse_normalized, 6),
                    opt(r.mse_deg2, 3),
                    opt(r.within_5deg_fraction, 4),
                    opt(r.latency_p95_ms, 2),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: Vec<&str>| {
            cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
        };
        let mut out = format!(
            "{} at {} m/s, {} start(s)\n",
            self.scenario.track,
            self.scenario.speed,
            self.scenario.starts.len()
        );
        out.push_str(&line(header.to_vec()));
        out.push('\n');
        for row in &body {
            out.push_str(&line(row.iter().map(String::as_str).collect()));
            out.push('\n');
        }
        out
    }
}
