//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! writes the full report to `$CARGO_TARGET_TMPDIR/acceptance/report.json`.
//!
//! Criteria marked `claim` compare model variants with each other and may
//! not hold in this simulator; they are reported but do not fail the run.

#[path = "../../core/tests/support/gradcheck.rs"]
mod gradcheck;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use lanepilot::data::{
    build_augmented_set, drive_run, split_dataset, Driver, HumanNoise, NormStats, RunConfig, Sample, SpawnPose,
    SplitSpec, MODEL_HEIGHT, MODEL_WIDTH,
};
use lanepilot::eval::{
    machine_info, measure_latency, resolve_track, run_closed_loop, sample_observations, EvalScenario, ExpertDriver,
    ModelController, ScenarioReport,
};
use lanepilot::expert::{ExpertConfig, PdGains};
use lanepilot::models::{save_weights, ModelParams, OdeConfig, Solver, Variant};
use lanepilot::sim::CameraId;
use lanepilot::train::{evaluate_metrics, train_model, ExampleSet, Metrics, TrainConfig};
use serde_json::{json, Value};

const SEEDS: [u64; 3] = [0, 1, 2];
const SPEED_TRACK: &str = "s-curve";

struct Outcome {
    name: &'static str,
    pass: bool,
    /// Failing a claim is reported, not fatal.
    claim: bool,
    detail: String,
}

struct Run {
    outcomes: Vec<Outcome>,
    report: serde_json::Map<String, Value>,
    started: Instant,
}

impl Run {
    fn record(&mut self, name: &'static str, pass: bool, claim: bool, detail: String, data: Value) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag}  {name}: {detail}");
        self.report.insert(name.to_string(), json!({ "pass": pass, "detail": detail, "data": data }));
        self.outcomes.push(Outcome { name, pass, claim, detail });
    }

    fn progress(&self, what: &str) {
        eprintln!("[{:>7.1} s] {what}", self.started.elapsed().as_secs_f64());
    }
}

fn drive(prefix: &str, spawns: &[(&str, f64, f64, f64)], driver: &Driver, seed: u64) -> Vec<Sample> {
    let mut out = Vec::new();
    for (i, &(track, fraction, lateral, heading)) in spawns.iter().enumerate() {
        let cfg = RunConfig {
            run_id: format!("{prefix}{i}-{track}"),
            speed: 0.6,
            ticks: 500,
            spawn: SpawnPose { fraction, lateral, heading },
            cameras: vec![CameraId::Left, CameraId::Right],
            record_width: MODEL_WIDTH,
            record_height: MODEL_HEIGHT,
            lighting_jitter: 0.1,
            seed: seed + i as u64,
        };
        let log = drive_run(&resolve_track(track).unwrap(), &cfg, driver).unwrap();
        assert!(log.left_lane_at.is_none(), "{} left the lane", cfg.run_id);
        out.extend(log.samples);
    }
    out
}

fn left(samples: &[Sample]) -> Vec<Sample> {
    samples.iter().filter(|s| s.camera_id == CameraId::Left).cloned().collect()
}

fn starts() -> Vec<SpawnPose> {
    vec![
        SpawnPose::centered(0.0),
        SpawnPose { fraction: 0.33, lateral: 0.05, heading: 0.0 },
        SpawnPose { fraction: 0.66, lateral: -0.05, heading: 0.05 },
    ]
}

fn closed_loop(params: &Arc<ModelParams>, speed: f64, seed: u64) -> ScenarioReport {
    let scenario = EvalScenario::laps(SPEED_TRACK, speed, 10, starts(), seed).unwrap();
    run_closed_loop(&mut ModelController::new(params.clone()).cached(), &scenario).unwrap()
}

fn episodes_json(r: &ScenarioReport) -> Value {
    json!(r
        .episodes
        .iter()
        .map(|e| json!({ "laps": e.laps_completed, "dnf": e.dnf.as_ref().map(|d| (d.tick, d.cause.clone())), "max_abs_cte": e.max_abs_cte }))
        .collect::<Vec<_>>())
}

fn metrics_json(m: &Metrics) -> Value {
    serde_json::to_value(m).unwrap()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn gradient_suite(run: &mut Run) {
    let t = Instant::now();
    let results = gradcheck::run_suite(50);
    let secs = t.elapsed().as_secs_f64();
    let (worst_name, worst) = results.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let pass = results.iter().all(|(_, e)| *e < 1e-3) && secs < 120.0;
    let data = json!({ "seeds": 50, "seconds": secs, "worst": results.iter().map(|(n, e)| json!({ "op": n, "rel_error": e })).collect::<Vec<_>>() });
    run.record(
        "gradient suite",
        pass,
        false,
        format!("{} ops x 50 seeds, worst {worst:.2e} ({worst_name}), {secs:.1} s", results.len()),
        data,
    );
}

fn solver_order(run: &mut Run) {
    let steps = [2, 4, 8, 16, 32];
    let (euler_errs, euler) = gradcheck::convergence_slope(Solver::Euler, &steps);
    let (rk4_errs, rk4) = gradcheck::convergence_slope(Solver::Rk4, &steps);
    let pass = (3.7..=4.3).contains(&rk4) && (0.8..=1.2).contains(&euler);
    run.record(
        "solver order",
        pass,
        false,
        format!("rk4 slope {rk4:.3}, euler slope {euler:.3}"),
        json!({ "steps": steps, "euler_errors": euler_errs, "rk4_errors": rk4_errs, "euler_slope": euler, "rk4_slope": rk4 }),
    );
}

fn expert_viability(run: &mut Run) {
    let track = "stadium";
    let usable = resolve_track(track).unwrap().spec().usable_half_width;
    let limit = 0.5 * usable;
    let attempt = |gains: PdGains| {
        let cfg = ExpertConfig { pd: gains, ..ExpertConfig::default() };
        let scenario = EvalScenario::laps(track, 0.6, 10, vec![SpawnPose::centered(0.0)], 0).unwrap();
        let r = run_closed_loop(&mut ExpertDriver::new(cfg).unwrap(), &scenario).unwrap();
        let ok = r.all_completed(10) && r.max_abs_cte() < limit;
        (ok, r)
    };
    let (original_ok, original) = attempt(PdGains::original());
    let (retuned_ok, retuned) = attempt(PdGains::retuned());
    let gains = |g: PdGains| json!({ "kp": g.kp, "kd": g.kd, "ts": g.ts });
    let data = json!({
        "track": track,
        "speed": 0.6,
        "max_cte_limit": limit,
        "original": { "gains": gains(PdGains::original()), "completed": original_ok, "episodes": episodes_json(&original) },
        "retuned": { "gains": gains(PdGains::retuned()), "completed": retuned_ok, "episodes": episodes_json(&retuned) },
        "deviation": (!original_ok).then_some("original gains failed in this simulator; datasets use the retuned gains"),
    });
    let describe = |r: &ScenarioReport| format!("{} laps, max |cte| {:.3} m", r.min_laps(), r.max_abs_cte());
    let detail = if original_ok {
        format!("original gains: {}", describe(&original))
    } else {
        let g = PdGains::retuned();
        format!(
            "original gains failed ({}); retuned kp {} kd {} ts {}: {} (limit {limit:.2} m, deviation recorded)",
            describe(&original),
            g.kp,
            g.kd,
            g.ts,
            describe(&retuned)
        )
    };
    run.record("expert viability", original_ok || retuned_ok, false, detail, data);
}

struct Corpus {
    cnn_train: Vec<Sample>,
    cnn_test: ExampleSet,
    seq_train: ExampleSet,
    seq_test: ExampleSet,
}

fn collect() -> Corpus {
    let expert = Driver::Expert(ExpertConfig::default());
    let human = Driver::HumanProxy { expert: ExpertConfig::default(), noise: HumanNoise::default() };
    let expert_runs = drive(
        "expert",
        &[("stadium", 0.0, 0.1, 0.05), ("s-curve", 0.25, -0.1, -0.05), ("stadium", 0.5, 0.05, -0.05), ("s-curve", 0.75, -0.05, 0.05)],
        &expert,
        100,
    );
    let human_runs = drive(
        "human",
        &[("stadium", 0.2, 0.0, 0.0), ("s-curve", 0.45, 0.0, 0.0), ("stadium", 0.7, 0.0, 0.0), ("s-curve", 0.95, 0.0, 0.0)],
        &human,
        200,
    );
    let test_runs = drive("test", &[("stadium", 0.3, 0.02, 0.0), ("s-curve", 0.6, -0.02, 0.0)], &expert, 300);

    let cnn_train = build_augmented_set(&left(&expert_runs), &[0.7, 1.0, 1.3]).unwrap();
    let mut seq = left(&expert_runs);
    seq.extend(left(&human_runs));
    Corpus {
        cnn_train,
        cnn_test: ExampleSet::singles(&left(&test_runs)),
        seq_train: ExampleSet::sequences(&seq),
        seq_test: ExampleSet::sequences(&left(&test_runs)),
    }
}

struct Trained {
    params: Arc<ModelParams>,
    seconds: f64,
    best_epoch: usize,
}

fn train_cnn(corpus: &Corpus, seed: u64) -> Trained {
    let set = ExampleSet::singles(&corpus.cnn_train);
    let (tr, va, _) = split_dataset(set.len(), &SplitSpec { seed, ..SplitSpec::default() }).unwrap();
    let stats = NormStats::compute(tr.iter().map(|&i| &*corpus.cnn_train[i].frame), "train split").unwrap();
    let cfg = TrainConfig { seed, ..TrainConfig::for_variant(Variant::Cnn) };
    let (params, rep) = train_model(&cfg, &stats, None, &set.subset(&tr), &set.subset(&va)).unwrap();
    Trained { params: Arc::new(params), seconds: rep.wall_time_s, best_epoch: rep.best_epoch }
}

fn train_sequence(corpus: &Corpus, cnn: &ModelParams, variant: Variant, solver: Option<Solver>, seed: u64) -> Trained {
    let ode = solver.map(OdeConfig::new);
    let stats = cnn.meta.norm_stats.clone();
    let mut init = ModelParams::init(variant, ode, stats.clone(), seed).unwrap();
    init.copy_backbone_from(cnn).unwrap();
    let set = &corpus.seq_train;
    let (tr, va, _) = split_dataset(set.len(), &SplitSpec { seed, ..SplitSpec::default() }).unwrap();
    let cfg = TrainConfig { seed, ode, freeze_backbone: true, ..TrainConfig::for_variant(variant) };
    let (params, rep) = train_model(&cfg, &stats, Some(init), &set.subset(&tr), &set.subset(&va)).unwrap();
    Trained { params: Arc::new(params), seconds: rep.wall_time_s, best_epoch: rep.best_epoch }
}

fn il1(run: &mut Run, corpus: &Corpus, cnns: &[Trained]) {
    let metrics: Vec<Metrics> = cnns.iter().map(|c| evaluate_metrics(&c.params, &corpus.cnn_test).unwrap()).collect();
    let within: Vec<f64> = metrics.iter().map(|m| m.within_5deg_fraction).collect();
    let (mean, std) = mean_std(&within);
    let slowest = cnns.iter().map(|c| c.seconds).fold(0.0, f64::max);
    let all_strict = within.iter().all(|&w| w >= 0.90);
    let pass = (all_strict || mean >= 0.85) && slowest < 1800.0;
    let data = json!({
        "train_examples": corpus.cnn_train.len(),
        "test_examples": corpus.cnn_test.len(),
        "per_seed": SEEDS.iter().zip(&metrics).zip(cnns).map(|((s, m), c)| json!({ "seed": s, "metrics": metrics_json(m), "train_seconds": c.seconds, "best_epoch": c.best_epoch })).collect::<Vec<_>>(),
        "within_5deg_mean": mean,
        "within_5deg_std": std,
    });
    let shown: Vec<String> = within.iter().map(|w| format!("{w:.4}")).collect();
    run.record(
        "CNN within-5deg accuracy",
        pass,
        false,
        format!(
            "CNN on {} augmented frames, within-5deg [{}] mean {mean:.4} sd {std:.4}, slowest training {:.0} s",
            corpus.cnn_train.len(),
            shown.join(", "),
            slowest
        ),
        data,
    );
}

struct SeedModels {
    cnn: Trained,
    lstm: Trained,
    rk4: Trained,
}

fn table_one(run: &mut Run, corpus: &Corpus, models: &[SeedModels]) {
    let cnn_view = corpus.seq_test.last_frames();
    let mut rows = Vec::new();
    let (mut ordered, mut lstm_beats_cnn) = (0, 0);
    for (seed, m) in SEEDS.iter().zip(models) {
        let cnn = evaluate_metrics(&m.cnn.params, &cnn_view).unwrap().mse_normalized;
        let lstm = evaluate_metrics(&m.lstm.params, &corpus.seq_test).unwrap().mse_normalized;
        let node = evaluate_metrics(&m.rk4.params, &corpus.seq_test).unwrap().mse_normalized;
        ordered += (lstm < node && node < cnn) as usize;
        lstm_beats_cnn += (lstm < cnn) as usize;
        rows.push((seed, cnn, lstm, node));
    }
    let pass = ordered >= 2 && lstm_beats_cnn == 3;
    let shown: Vec<String> =
        rows.iter().map(|(s, c, l, n)| format!("seed {s}: lstm {l:.5} node {n:.5} cnn {c:.5}")).collect();
    let data = json!({
        "test_sequences": corpus.seq_test.len(),
        "rows": rows.iter().map(|(s, c, l, n)| json!({ "seed": s, "cnn": c, "cnn_lstm": l, "cnn_node_rk4": n })).collect::<Vec<_>>(),
        "full_ordering_seeds": ordered,
        "lstm_below_cnn_seeds": lstm_beats_cnn,
        "sequence_train_seconds": models.iter().map(|m| json!({ "lstm": m.lstm.seconds, "node_rk4": m.rk4.seconds })).collect::<Vec<_>>(),
    });
    run.record(
        "test MSE ordering",
        pass,
        true,
        format!("lstm<node<cnn in {ordered}/3, lstm<cnn in {lstm_beats_cnn}/3; {}", shown.join("; ")),
        data,
    );
}

fn speed_generalization(run: &mut Run, models: &[SeedModels]) -> (ScenarioReport, ScenarioReport) {
    let m = &models[0];
    let mut seq_ok = true;
    let mut seq_json = Vec::new();
    let mut seq_text = Vec::new();
    let mut rk4_reports = Vec::new();
    for (name, params) in [("cnn-lstm", &m.lstm.params), ("cnn-node-rk4", &m.rk4.params)] {
        for speed in [0.6, 1.2] {
            let r = closed_loop(params, speed, 7);
            seq_ok &= r.all_completed(10);
            seq_text.push(format!("{name}@{speed} {} laps", r.min_laps()));
            seq_json.push(json!({ "model": name, "speed": speed, "episodes": episodes_json(&r) }));
            if name == "cnn-node-rk4" {
                rk4_reports.push(r);
            }
        }
        run.progress(&format!("{name} closed loop done"));
    }
    let mut cnn_dnfs = 0;
    let mut cnn_json = Vec::new();
    for (seed, m) in SEEDS.iter().zip(models) {
        let r = closed_loop(&m.cnn.params, 1.2, 7);
        cnn_dnfs += r.any_dnf() as usize;
        cnn_json.push(json!({ "seed": seed, "speed": 1.2, "episodes": episodes_json(&r) }));
    }
    let cnn_slow = closed_loop(&m.cnn.params, 0.6, 7);
    let pass = seq_ok && cnn_dnfs >= 2;
    let data = json!({
        "track": SPEED_TRACK,
        "starts": serde_json::to_value(starts()).unwrap(),
        "sequence_models_seed0": seq_json,
        "cnn_at_1_2": cnn_json,
        "cnn_seed0_at_0_6": episodes_json(&cnn_slow),
    });
    run.record(
        "closed-loop speed generalization",
        pass,
        true,
        format!(
            "{} on {SPEED_TRACK} from 3 starts (min laps); cnn dnf at 1.2 m/s in {cnn_dnfs}/3 seeds (cnn seed 0 at 0.6: {} laps)",
            seq_text.join(", "),
            cnn_slow.min_laps()
        ),
        data,
    );
    let slow = rk4_reports.remove(0);
    (slow, rk4_reports.remove(0))
}

fn euler_vs_rk4(run: &mut Run, rk4: &[ScenarioReport; 2], euler: &Trained) {
    let mut pass = true;
    let mut text = Vec::new();
    let mut data = Vec::new();
    for (r, speed) in rk4.iter().zip([0.6, 1.2]) {
        let e = closed_loop(&euler.params, speed, 7);
        let laps = |s: &ScenarioReport| s.episodes.iter().map(|x| x.laps_completed).sum::<u32>();
        pass &= laps(r) >= laps(&e) && r.max_abs_cte() <= e.max_abs_cte();
        text.push(format!(
            "@{speed}: rk4 {} laps max {:.3} m vs euler {} laps max {:.3} m",
            laps(r),
            r.max_abs_cte(),
            laps(&e),
            e.max_abs_cte()
        ));
        data.push(json!({ "speed": speed, "rk4": episodes_json(r), "euler": episodes_json(&e) }));
    }
    run.record("Euler vs RK4 closed loop", pass, true, text.join("; "), json!(data));
}

fn latency(run: &mut Run, models: &[(&str, &Arc<ModelParams>)]) {
    let track = resolve_track(SPEED_TRACK).unwrap();
    let observations = sample_observations(&track, &[CameraId::Left], 0.6, 40).unwrap();
    let mut pass = true;
    let mut text = Vec::new();
    let mut rows = Vec::new();
    for (name, params) in models {
        let r = measure_latency(&mut ModelController::new((*params).clone()), &observations, 200).unwrap();
        pass &= r.pass;
        text.push(format!("{name} p95 {:.1} ms", r.p95_ms));
        rows.push(json!({ "model": name, "latency": serde_json::to_value(r).unwrap() }));
    }
    let machine = machine_info();
    text.push(format!("on {} ({} cores)", machine.cpu, machine.logical_cores));
    run.record("latency budget", pass, false, text.join(", "), json!({ "machine": machine, "models": rows }));
}

fn lanepilot(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_lanepilot")).args(args).output().expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if !path.to_string_lossy().ends_with("timing.json") {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(run: &mut Run, root: &Path) {
    let _ = fs::remove_dir_all(root);
    fs::create_dir_all(root).unwrap();
    let cfg = |name: &str, body: &str| {
        let p = root.join(name);
        fs::write(&p, body).unwrap();
        p.to_str().unwrap().to_string()
    };
    let sim = cfg("sim.json", r#"{"ticks":60,"lighting_jitter":0.1,"spawns":[{"fraction":0.0,"lateral":0.0,"heading":0.0},{"fraction":0.5,"lateral":0.05,"heading":0.0}]}"#);
    let cnn = cfg("cnn.json", r#"{"train":{"epochs":2,"batch_size":32}}"#);
    let seq = cfg("seq.json", r#"{"train":{"epochs":3,"batch_size":32,"freeze_backbone":true}}"#);
    let eval = cfg("eval.json", r#"{"max_ticks":40,"latency_samples":5,"lighting_jitter":0.1}"#);
    for round in ["a", "b"] {
        let d = root.join(round);
        let s = |n: &str| d.join(n).to_str().unwrap().to_string();
        lanepilot(&["simulate", "--track", "s-curve", "--seed", "5", "--config", &sim, "--out", &s("sim")]);
        lanepilot(&["augment", &s("sim"), "--out", &s("aug")]);
        lanepilot(&["train", &s("aug"), "--seed", "1", "--config", &cnn, "--out", &s("cnn")]);
        lanepilot(&["train", &s("sim"), "--variant", "cnn-lstm", "--init", &s("cnn"), "--seed", "1", "--config", &seq, "--out", &s("lstm")]);
        lanepilot(&["test", &s("sim"), "--checkpoint", &s("lstm")]);
        lanepilot(&["eval", "--checkpoint", &s("lstm"), "--track", "s-curve", "--laps", "1", "--config", &eval, "--out", &s("eval")]);
        lanepilot(&["eval", "--track", "s-curve", "--laps", "1", "--config", &eval, "--out", &s("eval-pd")]);
        lanepilot(&["compare", &s("eval"), &s("eval-pd"), "--out", &s("compare.json")]);
    }
    let (a, b) = (files(&root.join("a")), files(&root.join("b")));
    let differing: Vec<String> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    let pass = a.len() == b.len() && differing.is_empty();
    let bytes: usize = a.iter().map(|(_, d)| d.len()).sum();
    run.record(
        "determinism",
        pass,
        false,
        format!(
            "simulate/augment/train x2/test/eval/compare repeated: {} files, {bytes} bytes, {} differing",
            a.len(),
            differing.len() + a.len().abs_diff(b.len())
        ),
        json!({ "files": a.len(), "bytes": bytes, "differing": differing }),
    );
}

fn main() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&root).unwrap();
    let mut run = Run { outcomes: Vec::new(), report: serde_json::Map::new(), started: Instant::now() };

    gradient_suite(&mut run);
    solver_order(&mut run);
    expert_viability(&mut run);

    run.progress("collecting demonstrations");
    let corpus = collect();
    run.progress(&format!(
        "{} cnn frames, {} training sequences, {} test sequences",
        corpus.cnn_train.len(),
        corpus.seq_train.len(),
        corpus.seq_test.len()
    ));
    let mut models = Vec::new();
    for seed in SEEDS {
        let cnn = train_cnn(&corpus, seed);
        run.progress(&format!("cnn seed {seed} trained in {:.0} s", cnn.seconds));
        let lstm = train_sequence(&corpus, &cnn.params, Variant::CnnLstm, None, seed);
        let rk4 = train_sequence(&corpus, &cnn.params, Variant::CnnNode, Some(Solver::Rk4), seed);
        run.progress(&format!("sequence models seed {seed} trained in {:.0} + {:.0} s", lstm.seconds, rk4.seconds));
        models.push(SeedModels { cnn, lstm, rk4 });
    }
    let euler = train_sequence(&corpus, &models[0].cnn.params, Variant::CnnNode, Some(Solver::Euler), SEEDS[0]);
    let weights = root.join("models");
    fs::create_dir_all(&weights).unwrap();
    for (seed, m) in SEEDS.iter().zip(&models) {
        for (name, t) in [("cnn", &m.cnn), ("cnn-lstm", &m.lstm), ("cnn-node-rk4", &m.rk4)] {
            save_weights(&t.params, &weights.join(format!("{name}-s{seed}.lcw"))).unwrap();
        }
    }
    save_weights(&euler.params, &weights.join("cnn-node-euler-s0.lcw")).unwrap();

    let cnns: Vec<Trained> = models
        .iter()
        .map(|m| Trained { params: m.cnn.params.clone(), seconds: m.cnn.seconds, best_epoch: m.cnn.best_epoch })
        .collect();
    il1(&mut run, &corpus, &cnns);
    table_one(&mut run, &corpus, &models);
    let (slow, fast) = speed_generalization(&mut run, &models);
    euler_vs_rk4(&mut run, &[slow, fast], &euler);
    let m = &models[0];
    latency(
        &mut run,
        &[("cnn", &m.cnn.params), ("cnn-lstm", &m.lstm.params), ("cnn-node-rk4", &m.rk4.params), ("cnn-node-euler", &euler.params)],
    );
    determinism(&mut run, &root.join("determinism"));

    run.report.insert("machine".into(), serde_json::to_value(machine_info()).unwrap());
    run.report.insert("total_seconds".into(), json!(run.started.elapsed().as_secs_f64()));
    let path = root.join("report.json");
    fs::write(&path, serde_json::to_vec_pretty(&Value::Object(run.report)).unwrap()).unwrap();

    let passed = run.outcomes.iter().filter(|o| o.pass).count();
    println!("{passed}/{} criteria met; report at {}", run.outcomes.len(), path.display());
    let broken: Vec<&Outcome> = run.outcomes.iter().filter(|o| !o.pass && !o.claim).collect();
    for o in &run.outcomes {
        if !o.pass && o.claim {
            println!("note: '{}' is a reproduction claim and is reported without failing the run", o.name);
        }
    }
    if !broken.is_empty() {
        for o in broken {
            eprintln!("required criterion failed: {} ({})", o.name, o.detail);
        }
        std::process::exit(1);
    }
}
