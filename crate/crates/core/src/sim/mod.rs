//! Deterministic 2-D closed-track world: track geometry, a kinematic bicycle
//! and a pinhole forward camera that renders the red lane line.

mod camera;
mod track;
mod vehicle;

pub use camera::{render_camera, CameraId, CameraSpec, Frame};
pub use track::{cross_track_error, spawn_pose, Piece, Track, TrackPoint, TrackSpec};
pub use vehicle::{step_vehicle, VehicleState, DEFAULT_STEERING_LIMIT_DEG, DEFAULT_WHEELBASE};

/// Simulation tick, locked to the 25 Hz camera rate.
pub const TICK_DT: f64 = 0.04;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SimError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid track: {0}")]
    InvalidTrack(String),
}

pub type Result<T> = std::result::Result<T, SimError>;
