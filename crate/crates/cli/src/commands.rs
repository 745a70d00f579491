//! One function per subcommand. Each reads directories and JSON configs,
//! calls into the library and writes JSON reports. Wall-clock figures go to
//! `timing.json` so every `report.json` is reproducible byte for byte.

use std::collections::HashSet;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use lanepilot::data::*;
use lanepilot::eval::*;
use lanepilot::expert::ExpertConfig;
use lanepilot::models::{load_weights, save_weights, ModelParams, OdeConfig, Solver, Variant};
use lanepilot::sim::{CameraId, TICK_DT};
use lanepilot::train::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::session::{FrameEncoding, Pacing, SessionConfig};
use crate::{resolve_checkpoint, CliError, Result, WEIGHTS_FILE};

#[derive(Debug, Parser)]
#[command(name = "lanepilot", version, about = "Lane-following simulator, expert, imitation training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Drive the PD expert and write a dataset.
    Simulate(SimulateArgs),
    /// Serve a drive session that records demonstrations into --out.
    Collect(SessionArgs),
    /// Merge datasets and add brightness-scaled copies.
    Augment(AugmentArgs),
    /// Train a steering model.
    Train(TrainArgs),
    /// Score a checkpoint on a held-out dataset.
    Test(TestArgs),
    /// Closed-loop laps with the PD expert or a checkpoint.
    Eval(EvalArgs),
    /// Tabulate several eval runs of the same scenario.
    Compare(CompareArgs),
    /// Serve a drive session without recording.
    Serve(SessionArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value = "stadium")]
    pub track: String,
    #[arg(long, default_value_t = 0.6)]
    pub speed: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 10.0)]
    pub laps: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Dataset directories to merge.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directories.
    #[arg(required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long, default_value = "cnn")]
    pub variant: Variant,
    #[arg(long)]
    pub solver: Option<Solver>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint whose backbone (and normalization) initializes the model.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[arg(required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to test.json next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Weights file or training run directory; the PD expert drives when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "stadium")]
    pub track: String,
    #[arg(long, default_value_t = 0.6)]
    pub speed: f64,
    #[arg(long, default_value_t = 10)]
    pub laps: u32,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the checkpoint's solver for NODE models.
    #[arg(long)]
    pub solver: Option<Solver>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Eval output directories.
    #[arg(required = true, num_args = 2..)]
    pub runs: Vec<PathBuf>,
    /// JSON table; measured latencies go to `<stem>.timing.json` beside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SessionArgs {
    #[arg(long, default_value = "stadium")]
    pub track: String,
    #[arg(long, default_value_t = 0.6)]
    pub speed: f64,
    #[arg(long, default_value_t = 8765)]
    pub port: u16,
    /// Tick at 25 Hz wall clock instead of on client `step` requests.
    #[arg(long)]
    pub realtime: bool,
    /// Dataset directory for recordings (collect only).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Augment(a) => augment(&a),
        Command::Train(a) => train(&a),
        Command::Test(a) => test(&a),
        Command::Eval(a) => eval(&a),
        Command::Compare(a) => compare(&a),
        Command::Collect(a) => {
            let out = a.out.clone().ok_or_else(|| CliError::Contract("collect needs --out <dataset dir>".into()))?;
            serve(&a, Some(out))
        }
        Command::Serve(a) => {
            if a.out.is_some() {
                return Err(CliError::Contract("serve does not record; use collect --out".into()));
            }
            serve(&a, None)
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Contract(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Recursively overlays `patch` on `base`, rejecting keys `base` lacks.
fn merge(base: &mut Value, patch: &Value, at: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &here)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(CliError::Contract(format!("unknown config key {here:?}"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// Defaults overlaid with the `--config` file, if any.
fn configured<T: Serialize + DeserializeOwned>(defaults: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(defaults) };
    let patch: Value = read_json(path)?;
    let mut base = serde_json::to_value(&defaults).expect("config serializes");
    merge(&mut base, &patch, "")?;
    serde_json::from_value(base).map_err(|e| CliError::Contract(format!("{}: {e}", path.display())))
}

fn file_crc(path: &Path) -> Result<u32> {
    fs::read(path).map(|b| crc32fast::hash(&b)).map_err(|e| CliError::io(path, e))
}

fn refuse_existing_dataset(dir: &Path) -> Result<()> {
    if dir.join("manifest.jsonl").exists() {
        return Err(CliError::Contract(format!("{} already holds a dataset", dir.display())));
    }
    Ok(())
}

fn load_datasets(dirs: &[PathBuf]) -> Result<Vec<Sample>> {
    let mut all = Vec::new();
    let mut seen = HashSet::new();
    for d in dirs {
        for s in load_dataset(d)?.samples {
            if !seen.insert((s.run_id.clone(), s.camera_id, s.tick)) {
                return Err(CliError::Contract(format!(
                    "{}: run {} camera {} tick {} appears in more than one input",
                    d.display(),
                    s.run_id,
                    s.camera_id.as_str(),
                    s.tick
                )));
            }
            all.push(s);
        }
    }
    Ok(all)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriverKind {
    Expert,
    HumanProxy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub cameras: Vec<CameraId>,
    /// One run per spawn pose, seeded `seed + index`.
    pub spawns: Vec<SpawnPose>,
    pub driver: DriverKind,
    pub human_noise: HumanNoise,
    pub expert: ExpertConfig,
    pub lighting_jitter: f32,
    pub record_width: usize,
    pub record_height: usize,
    /// Ticks per run; derived from --laps when null.
    pub ticks: Option<u64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            cameras: vec![CameraId::Left, CameraId::Right],
            spawns: vec![SpawnPose::centered(0.0)],
            driver: DriverKind::Expert,
            human_noise: HumanNoise::default(),
            expert: ExpertConfig::default(),
            lighting_jitter: 0.0,
            record_width: MODEL_WIDTH,
            record_height: MODEL_HEIGHT,
            ticks: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub spawn: SpawnPose,
    pub seed: u64,
    pub samples: usize,
    pub max_abs_cte: f64,
    pub mean_abs_cte: f64,
    pub distance: f64,
    pub left_lane_at: Option<u64>,
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let cfg = configured(SimulateConfig::default(), a.config.as_deref())?;
    let seed = a.seed.unwrap_or(0);
    let track = resolve_track(&a.track)?;
    if !(a.speed > 0.0) || !(a.laps > 0.0) || cfg.spawns.is_empty() {
        return Err(CliError::Contract("speed and laps must be positive and at least one spawn given".into()));
    }
    refuse_existing_dataset(&a.out)?;
    let ticks = cfg.ticks.unwrap_or_else(|| (a.laps * track.length() / (a.speed * TICK_DT)).ceil() as u64);
    let driver = match cfg.driver {
        DriverKind::Expert => Driver::Expert(cfg.expert.clone()),
        DriverKind::HumanProxy => Driver::HumanProxy { expert: cfg.expert.clone(), noise: cfg.human_noise },
    };
    let mut samples = Vec::new();
    let mut runs = Vec::new();
    for (i, spawn) in cfg.spawns.iter().enumerate() {
        let run_seed = seed.wrapping_add(i as u64);
        let run_id = format!("{}-s{seed}-{i}", track.spec().name);
        let rc = RunConfig {
            run_id: run_id.clone(),
            speed: a.speed,
            ticks,
            spawn: *spawn,
            cameras: cfg.cameras.clone(),
            record_width: cfg.record_width,
            record_height: cfg.record_height,
            lighting_jitter: cfg.lighting_jitter,
            seed: run_seed,
        };
        let log = drive_run(&track, &rc, &driver)?;
        runs.push(RunSummary {
            run_id,
            spawn: *spawn,
            seed: run_seed,
            samples: log.samples.len(),
            max_abs_cte: log.max_abs_cte,
            mean_abs_cte: log.mean_abs_cte,
            distance: log.distance,
            left_lane_at: log.left_lane_at,
        });
        samples.extend(log.samples);
    }
    let ds = Dataset::new(samples)?;
    save_dataset(&ds, &a.out)?;
    let report = json!({
        "track": track.spec().name,
        "track_length": track.length(),
        "speed": a.speed,
        "seed": seed,
        "ticks_per_run": ticks,
        "config": cfg,
        "runs": runs,
        "samples": ds.samples.len(),
        "dataset_hash": ds.content_hash(),
    });
    write_json(&a.out.join("simulate.json"), &report)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub factors: Vec<f32>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { factors: vec![0.7, 1.0, 1.3] }
    }
}

pub fn augment(a: &AugmentArgs) -> Result<()> {
    let cfg = configured(AugmentConfig::default(), a.config.as_deref())?;
    refuse_existing_dataset(&a.out)?;
    let samples = load_datasets(&a.inputs)?;
    let inputs = a
        .inputs
        .iter()
        .map(|d| load_manifest(d).map(|m| json!({ "samples": m.entries.len() })))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let augmented = build_augmented_set(&samples, &cfg.factors)?;
    let ds = Dataset::new(augmented)?;
    save_dataset(&ds, &a.out)?;
    let report = json!({
        "inputs": inputs,
        "input_hash": Dataset::new(samples.clone())?.content_hash(),
        "factors": cfg.factors,
        "input_samples": samples.len(),
        "samples": ds.samples.len(),
        "dataset_hash": ds.content_hash(),
    });
    write_json(&a.out.join("augment.json"), &report)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

/// Everything `train` reads from `--config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCommandConfig {
    pub train: TrainConfig,
    pub split: SplitSpec,
    /// Lenses to train on; all recorded lenses when null. Defaults to the
    /// left lens, the one a model controller drives from.
    pub cameras: Option<Vec<CameraId>>,
}

fn select_cameras(samples: Vec<Sample>, cameras: Option<&[CameraId]>) -> Vec<Sample> {
    match cameras {
        Some(c) => samples.into_iter().filter(|s| c.contains(&s.camera_id)).collect(),
        None => samples,
    }
}

fn unique_frames(set: &ExampleSet) -> Vec<&lanepilot::sim::Frame> {
    let mut used: Vec<usize> = set.examples.iter().flat_map(|e| e.frames.iter().copied()).collect();
    used.sort_unstable();
    used.dedup();
    used.into_iter().map(|i| &*set.frames[i]).collect()
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(0);
    let defaults = TrainCommandConfig {
        train: TrainConfig { seed, ..TrainConfig::for_variant(a.variant) },
        split: SplitSpec { seed, ..SplitSpec::default() },
        cameras: Some(vec![CameraId::Left]),
    };
    let mut cfg = configured(defaults, a.config.as_deref())?;
    cfg.train.variant = a.variant;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.split.seed = s;
    }
    match (a.variant, a.solver) {
        (Variant::CnnNode, Some(solver)) => {
            let steps = cfg.train.ode.filter(|o| o.solver == solver).map(|o| o.steps);
            cfg.train.ode = Some(OdeConfig { steps: steps.unwrap_or(OdeConfig::new(solver).steps), ..OdeConfig::new(solver) });
        }
        (Variant::CnnNode, None) => {
            cfg.train.ode.get_or_insert(OdeConfig::new(Solver::Rk4));
        }
        (_, Some(_)) => return Err(CliError::Contract("--solver only applies to --variant cnn-node".into())),
        (_, None) => cfg.train.ode = None,
    }
    cfg.train.validate()?;

    let samples = select_cameras(load_datasets(&a.data)?, cfg.cameras.as_deref());
    let set = ExampleSet::for_variant(&samples, a.variant);
    if set.is_empty() {
        return Err(CliError::Contract(format!("no {} examples in the given datasets", a.variant)));
    }
    let (tr, va, te) = split_dataset(set.len(), &cfg.split)?;
    let (train_set, val_set, test_set) = (set.subset(&tr), set.subset(&va), set.subset(&te));
    let init = match &a.init {
        Some(p) => {
            let file = resolve_checkpoint(p);
            let source = load_weights(&file, None)?;
            let mut fresh = ModelParams::init(a.variant, cfg.train.ode, source.meta.norm_stats.clone(), cfg.train.seed)?;
            fresh.copy_backbone_from(&source)?;
            Some(fresh)
        }
        None => None,
    };
    let stats = match &init {
        Some(p) => p.meta.norm_stats.clone(),
        None => NormStats::compute(unique_frames(&train_set), &format!("train split of dataset {:08x}", set.content_hash()))?,
    };
    let (params, mut report) = train_model(&cfg.train, &stats, init, &train_set, &val_set)?;
    if !test_set.is_empty() {
        report.test = Some(evaluate_metrics(&params, &test_set)?);
    }
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    save_weights(&params, &a.out.join(WEIGHTS_FILE))?;
    write_json(&a.out.join("config.json"), &cfg)?;
    write_json(&a.out.join("report.json"), &report)?;
    write_json(&a.out.join("timing.json"), &json!({ "wall_time_s": report.wall_time_s, "machine": machine_info() }))?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

/// Training report of a checkpoint with its held-out metrics filled in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestReport {
    #[serde(flatten)]
    pub report: TrainReport,
    /// CRC32 of the weights file.
    pub checkpoint_crc: u32,
    pub test_dataset_hash: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestConfig {
    /// Same default as training: the left lens.
    pub cameras: Option<Vec<CameraId>>,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self { cameras: Some(vec![CameraId::Left]) }
    }
}

pub fn test(a: &TestArgs) -> Result<()> {
    let cfg = configured(TestConfig::default(), a.config.as_deref())?;
    let file = resolve_checkpoint(&a.checkpoint);
    let params = load_weights(&file, None)?;
    let run_dir = file.parent().unwrap_or(Path::new("."));
    let report_path = run_dir.join("report.json");
    let mut report: TrainReport = if report_path.is_file() {
        read_json(&report_path)?
    } else {
        return Err(CliError::Contract(format!("no training report at {}", report_path.display())));
    };
    let samples = select_cameras(load_datasets(&a.data)?, cfg.cameras.as_deref());
    let set = ExampleSet::for_variant(&samples, params.variant());
    report.test = Some(evaluate_metrics(&params, &set)?);
    let out = TestReport { report, checkpoint_crc: file_crc(&file)?, test_dataset_hash: set.content_hash() };
    let path = a.out.clone().unwrap_or_else(|| run_dir.join("test.json"));
    write_json(&path, &out)?;
    println!("{}", serde_json::to_string(&out).expect("report serializes"));
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Spawn poses; one episode each.
    pub starts: Vec<SpawnPose>,
    pub lighting_jitter: f32,
    /// Overrides the lap-derived tick budget.
    pub max_ticks: Option<u64>,
    /// Gains and perception of the PD controller when it drives.
    pub expert: ExpertConfig,
    pub latency_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            starts: vec![SpawnPose::centered(0.0)],
            lighting_jitter: 0.0,
            max_ticks: None,
            expert: ExpertConfig::default(),
            latency_samples: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub controller: String,
    /// CRC32 of the weights file that drove.
    pub checkpoint_crc: Option<u32>,
    pub laps_target: u32,
    pub completed: bool,
    pub scenario: ScenarioReport,
    /// Held-out metrics from the checkpoint's test.json, when present.
    pub metrics: Option<Metrics>,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = configured(EvalConfig::default(), a.config.as_deref())?;
    let seed = a.seed.unwrap_or(0);
    let mut scenario = EvalScenario::laps(&a.track, a.speed, a.laps, cfg.starts.clone(), seed)?;
    scenario.lighting_jitter = cfg.lighting_jitter;
    if let Some(m) = cfg.max_ticks {
        scenario.max_ticks = m;
    }
    scenario.validate()?;
    let (mut ctrl, mut timed, checkpoint, metrics): (Box<dyn Controller>, Box<dyn Controller>, _, _) = match &a.checkpoint {
        Some(p) => {
            let file = resolve_checkpoint(p);
            let mut params = load_weights(&file, None)?;
            if let Some(solver) = a.solver {
                match (params.variant(), params.meta.ode) {
                    (Variant::CnnNode, Some(o)) => params.meta.ode = Some(OdeConfig { solver, ..o }),
                    _ => return Err(CliError::Contract("--solver only applies to cnn-node checkpoints".into())),
                }
            }
            let test_path = file.parent().unwrap_or(Path::new(".")).join("test.json");
            let metrics = if test_path.is_file() { read_json::<TestReport>(&test_path)?.report.test } else { None };
            let params = Arc::new(params);
            (
                Box::new(ModelController::new(params.clone()).cached()),
                Box::new(ModelController::new(params)),
                Some(file_crc(&file)?),
                metrics,
            )
        }
        None => (Box::new(ExpertDriver::new(cfg.expert.clone())?), Box::new(ExpertDriver::new(cfg.expert.clone())?), None, None),
    };
    let started = Instant::now();
    let scenario_report = run_closed_loop(ctrl.as_mut(), &scenario)?;
    let loop_time = started.elapsed().as_secs_f64();
    let track = resolve_track(&a.track)?;
    let obs = sample_observations(&track, &timed.cameras(), a.speed, 16)?;
    let latency = measure_latency(timed.as_mut(), &obs, cfg.latency_samples.max(1))?;
    let report = EvalReport {
        controller: scenario_report.controller.clone(),
        checkpoint_crc: checkpoint,
        laps_target: a.laps,
        completed: scenario_report.all_completed(a.laps),
        scenario: scenario_report,
        metrics,
    };
    write_json(&a.out.join("report.json"), &report)?;
    write_json(
        &a.out.join("timing.json"),
        &json!({ "latency": latency, "machine": machine_info(), "closed_loop_wall_time_s": loop_time }),
    )?;
    for (i, e) in report.scenario.episodes.iter().enumerate() {
        println!(
            "{} start {i}: laps {} ticks {} mean|cte| {:.4} max|cte| {:.4} |dw| {:.3}{}",
            report.controller,
            e.laps_completed,
            e.ticks,
            e.mean_abs_cte,
            e.max_abs_cte,
            e.smoothness_deg,
            e.dnf.as_ref().map_or(String::new(), |d| format!(" dnf {} at tick {}", d.cause, d.tick))
        );
    }
    println!(
        "latency p50 {:.2} ms p95 {:.2} ms max {:.2} ms budget {} ms {}",
        latency.p50_ms,
        latency.p95_ms,
        latency.max_ms,
        latency.budget_ms,
        if latency.pass { "pass" } else { "FAIL" }
    );
    Ok(())
}

pub fn compare(a: &CompareArgs) -> Result<()> {
    let mut entries = Vec::new();
    for dir in &a.runs {
        let report: EvalReport = read_json(&dir.join("report.json"))?;
        let timing = dir.join("timing.json");
        let latency = if timing.is_file() {
            let v: Value = read_json(&timing)?;
            serde_json::from_value(v["latency"].clone()).ok()
        } else {
            None
        };
        entries.push(CompareEntry { name: report.controller.clone(), report: report.scenario, metrics: report.metrics, latency });
    }
    let names: Vec<String> = entries.iter().map(|e| e.name.clone()).collect();
    for (e, dir) in entries.iter_mut().zip(&a.runs) {
        if names.iter().filter(|n| **n == e.name).count() > 1 {
            e.name = dir.file_name().map_or(e.name.clone(), |f| f.to_string_lossy().into_owned());
        }
    }
    let mut table = compare_models(&entries)?;
    print!("{}", table.to_text());
    if let Some(out) = &a.out {
        let latency: serde_json::Map<String, Value> =
            table.rows.iter_mut().map(|r| (r.name.clone(), json!(r.latency_p95_ms.take()))).collect();
        write_json(out, &table)?;
        let stem = out.file_stem().map_or("compare".into(), |s| s.to_string_lossy().into_owned());
        write_json(&out.with_file_name(format!("{stem}.timing.json")), &json!({ "latency_p95_ms": latency }))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionFileConfig {
    pub cameras: Vec<CameraId>,
    pub encoding: FrameEncoding,
    pub spawn: SpawnPose,
    pub expert: ExpertConfig,
}

impl Default for SessionFileConfig {
    fn default() -> Self {
        Self {
            cameras: vec![CameraId::Left, CameraId::Right],
            encoding: FrameEncoding::Binary,
            spawn: SpawnPose::centered(0.0),
            expert: ExpertConfig::default(),
        }
    }
}

/// Validated server settings for `serve` and `collect`.
pub fn session_config(a: &SessionArgs, record_dir: Option<PathBuf>) -> Result<SessionConfig> {
    let cfg = configured(SessionFileConfig::default(), a.config.as_deref())?;
    let track = resolve_track(&a.track)?;
    if !(a.speed > 0.0 && a.speed <= crate::protocol::MAX_SPEED) {
        return Err(CliError::Contract(format!("speed must be in (0, {}] m/s", crate::protocol::MAX_SPEED)));
    }
    if cfg.cameras.is_empty() {
        return Err(CliError::Contract("at least one camera must be streamed".into()));
    }
    cfg.spawn.place(&track, a.speed)?;
    cfg.expert.validate().map_err(|e| CliError::Contract(e.to_string()))?;
    Ok(SessionConfig {
        track,
        speed: a.speed,
        spawn: cfg.spawn,
        cameras: cfg.cameras,
        encoding: cfg.encoding,
        pacing: if a.realtime { Pacing::Realtime } else { Pacing::Lockstep },
        record_dir,
        expert: cfg.expert,
    })
}

fn serve(a: &SessionArgs, record_dir: Option<PathBuf>) -> Result<()> {
    let config = session_config(a, record_dir)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Contract(format!("runtime: {e}")))?;
    runtime.block_on(async {
        let addr = SocketAddr::from(([0, 0, 0, 0], a.port));
        let (local, server) = crate::session::start(config, addr)
            .await
            .map_err(|e| CliError::Contract(format!("cannot listen on port {}: {e}", a.port)))?;
        eprintln!("listening on ws://{local}/session");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = server => {}
        }
        Ok(())
    })
}
