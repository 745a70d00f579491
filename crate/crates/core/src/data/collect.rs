use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{downscale_area, record_sample, DataError, Result, Sample, SampleMeta, Source};
use crate::expert::{ExpertConfig, ExpertController};
use crate::sim::{
    cross_track_error, render_camera, spawn_pose, step_vehicle, CameraId, CameraSpec, Track,
    VehicleState, TICK_DT,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpawnPose {
    pub fraction: f64,
    pub lateral: f64,
    pub heading: f64,
}

impl SpawnPose {
    pub fn centered(fraction: f64) -> Self {
        Self { fraction, lateral: 0.0, heading: 0.0 }
    }

    pub fn place(&self, track: &Track, speed: f64) -> Result<VehicleState> {
        spawn_pose(track, self.fraction, self.lateral, self.heading)
            .map(|s| s.with_speed(speed))
            .map_err(|e| DataError::Contract(e.to_string()))
    }
}

/// One recording run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub speed: f64,
    pub ticks: u64,
    pub spawn: SpawnPose,
    /// Lenses whose frames are recorded.
    pub cameras: Vec<CameraId>,
    pub record_width: usize,
    pub record_height: usize,
    /// Per-tick brightness factor drawn from [1 − j, 1 + j]; 0 disables.
    pub lighting_jitter: f32,
    pub seed: u64,
}

/// Smooth steering perturbation of the scripted demonstrator: an AR(1)
/// process with stationary standard deviation `sigma_deg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanNoise {
    pub sigma_deg: f64,
    pub correlation: f64,
}

impl Default for HumanNoise {
    fn default() -> Self {
        Self { sigma_deg: 4.0, correlation: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Driver {
    Expert(ExpertConfig),
    /// Stand-in for manual driving when no console operator is available,
    /// tagged `source = human`. The car executes the expert command plus
    /// correlated noise; samples are labeled with the noise-free command.
    HumanProxy { expert: ExpertConfig, noise: HumanNoise },
}

impl Driver {
    fn source(&self) -> Source {
        match self {
            Driver::Expert(_) => Source::Expert,
            Driver::HumanProxy { .. } => Source::Human,
        }
    }

    fn expert(&self) -> &ExpertConfig {
        match self {
            Driver::Expert(c) | Driver::HumanProxy { expert: c, .. } => c,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunLog {
    pub samples: Vec<Sample>,
    pub max_abs_cte: f64,
    pub mean_abs_cte: f64,
    pub distance: f64,
    /// Tick at which the car left the usable lane, ending the run early.
    pub left_lane_at: Option<u64>,
}

/// Drives `cfg.ticks` steps with `driver`, recording one sample per
/// recorded camera per tick, labeled with the driver's intended command
/// (the applied one for the expert).
pub fn drive_run(track: &Track, cfg: &RunConfig, driver: &Driver) -> Result<RunLog> {
    if cfg.cameras.is_empty() {
        return Err(DataError::Contract("no cameras selected for recording".into()));
    }
    let mut expert =
        ExpertController::new(driver.expert().clone()).map_err(|e| DataError::Contract(e.to_string()))?;
    let limit = driver.expert().steering_limit;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = cfg.spawn.place(track, cfg.speed)?;
    let lenses = [CameraSpec::left(), CameraSpec::right()];
    let mut noise = 0.0f64;
    let mut samples = Vec::with_capacity(cfg.ticks as usize * cfg.cameras.len());
    let (mut max_cte, mut sum_cte) = (0.0f64, 0.0f64);
    let mut left_lane_at = None;
    for _ in 0..cfg.ticks {
        let light = if cfg.lighting_jitter > 0.0 {
            rng.gen_range(1.0 - cfg.lighting_jitter..=1.0 + cfg.lighting_jitter)
        } else {
            1.0
        };
        let views = lenses.map(|cam| {
            let f = render_camera(track, &state, &cam);
            if light == 1.0 { f } else { f.scaled(light) }
        });
        let step = expert.step_views(&[&views[0], &views[1]]);
        let label = step.steering.clamp(-limit, limit);
        let mut cmd = step.steering;
        if let Driver::HumanProxy { noise: n, .. } = driver {
            let xi: f64 = rng.sample(StandardNormal);
            noise = n.correlation * noise + n.sigma_deg * (1.0 - n.correlation.powi(2)).sqrt() * xi;
            cmd += noise;
        }
        let cmd = cmd.clamp(-limit, limit);
        for &cam in &cfg.cameras {
            let view = &views[cam.code() as usize];
            let frame = downscale_area(view, cfg.record_width, cfg.record_height);
            let meta = SampleMeta {
                tick: state.tick,
                camera_id: cam,
                source: driver.source(),
                run_id: cfg.run_id.clone(),
            };
            samples.push(record_sample(Arc::new(frame), label, meta, limit)?);
        }
        state = step_vehicle(&state, cmd, TICK_DT).map_err(|e| DataError::Contract(e.to_string()))?;
        let cte = cross_track_error(track, &state).abs();
        max_cte = max_cte.max(cte);
        sum_cte += cte;
        if cte > track.spec().usable_half_width {
            left_lane_at = Some(state.tick);
            break;
        }
    }
    let ticks = state.tick.max(1) as f64;
    Ok(RunLog {
        samples,
        max_abs_cte: max_cte,
        mean_abs_cte: sum_cte / ticks,
        distance: ticks * TICK_DT * cfg.speed,
        left_lane_at,
    })
}
