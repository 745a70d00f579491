//! Classical lane follower: HSV segmentation of the red line, largest-blob
//! centroid, horizontal pixel error and a PD steering law.

mod color;
mod contour;
mod control;
mod overlay;

use serde::{Deserialize, Serialize};

pub use color::{dilate3, erode3, rgb_to_hsv, threshold_mask, Hsv, HsvBounds, Mask};
pub use contour::{largest_contour_centroid, ContourResult};
pub use control::{pd_control, saturate, PdGains, PdState};
pub use overlay::{render_debug_overlay, OverlayGeometry};

use crate::sim::{Frame, DEFAULT_STEERING_LIMIT_DEG};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ExpertError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("no line contour found")]
    TargetLost,
}

pub type Result<T> = std::result::Result<T, ExpertError>;

/// Pixel rectangle `[x, x + width) × [y, y + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Roi {
    pub fn full(width: usize, height: usize) -> Self {
        Self { x: 0, y: 0, width, height }
    }

    /// The lower `fraction` of the frame.
    pub fn lower(width: usize, height: usize, fraction: f64) -> Self {
        let rows = ((height as f64 * fraction).round() as usize).clamp(1, height);
        Self { x: 0, y: height - rows, width, height: rows }
    }
}

pub fn extract_roi(frame: &Frame, roi: Roi) -> Result<Frame> {
    if roi.width == 0
        || roi.height == 0
        || roi.x + roi.width > frame.width
        || roi.y + roi.height > frame.height
    {
        return Err(ExpertError::Contract(format!(
            "roi {roi:?} outside {}x{} frame",
            frame.width, frame.height
        )));
    }
    let mut pixels = Vec::with_capacity(roi.width * roi.height * 3);
    for y in roi.y..roi.y + roi.height {
        let start = (y * frame.width + roi.x) * 3;
        pixels.extend_from_slice(&frame.pixels[start..start + roi.width * 3]);
    }
    Ok(Frame { width: roi.width, height: roi.height, pixels, ..frame.clone() })
}

/// `e = centroid_x − frame_width/2`; positive when the line is right of center.
pub fn compute_error(result: &ContourResult, frame_width: usize) -> Result<f64> {
    if !result.found {
        return Err(ExpertError::TargetLost);
    }
    Ok(result.centroid_x as f64 - frame_width as f64 / 2.0)
}

/// Tunables of the expert, loadable from the session config JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub hsv: HsvBounds,
    pub pd: PdGains,
    /// Fraction of the frame, counted from the bottom, searched for the line.
    pub roi_lower_fraction: f64,
    /// Minimum blob area at 640×360; scaled with frame area.
    pub min_area: usize,
    pub steering_limit: f64,
    pub lost_hold_ticks: u32,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            hsv: HsvBounds::red(),
            pd: PdGains::retuned(),
            roi_lower_fraction: 0.6,
            min_area: 30,
            steering_limit: DEFAULT_STEERING_LIMIT_DEG,
            lost_hold_ticks: 10,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        self.hsv.validate().map_err(ExpertError::Contract)?;
        self.pd.validate().map_err(ExpertError::Contract)?;
        if !(self.roi_lower_fraction > 0.0 && self.roi_lower_fraction <= 1.0) {
            return Err(ExpertError::Contract(format!(
                "roi_lower_fraction {} outside (0, 1]",
                self.roi_lower_fraction
            )));
        }
        if !(self.steering_limit > 0.0 && self.steering_limit.is_finite()) {
            return Err(ExpertError::Contract("steering_limit must be positive".into()));
        }
        Ok(())
    }

    fn min_area_for(&self, width: usize, height: usize) -> usize {
        let scale = (width * height) as f64 / (640.0 * 360.0);
        ((self.min_area as f64 * scale).round() as usize).max(1)
    }
}

/// What the expert saw and did on one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertStep {
    /// Saturated command actually sent to the car, degrees.
    pub steering: f64,
    /// Raw PD output before sign flip and saturation.
    pub w: Option<f64>,
    pub error_px: Option<f64>,
    /// One result per view, in full-frame coordinates.
    pub contours: Vec<ContourResult>,
    pub lost_ticks: u32,
}

/// Stateful perception + PD loop.
///
/// With several views (the stereo pair) the pixel error is the mean over the
/// views that see the line, which servoes the car axis rather than one lens
/// onto the line. A line right of center (e > 0) needs a clockwise turn, so
/// the actuated command is `−w`. While the line is missing the last command
/// is held for `lost_hold_ticks`, then steering goes to 0; the derivative
/// memory is cleared so reacquisition starts proportional-only.
#[derive(Debug, Clone)]
pub struct ExpertController {
    config: ExpertConfig,
    pd: PdState,
    last_command: f64,
    lost_ticks: u32,
}

impl ExpertController {
    pub fn new(config: ExpertConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, pd: PdState::default(), last_command: 0.0, lost_ticks: 0 })
    }

    pub fn config(&self) -> &ExpertConfig {
        &self.config
    }

    pub fn reset(&mut self) {
        self.pd = PdState::default();
        self.last_command = 0.0;
        self.lost_ticks = 0;
    }

    /// Segmentation and centroid only, no controller state touched.
    pub fn perceive(&self, frame: &Frame) -> ContourResult {
        let roi = Roi::lower(frame.width, frame.height, self.config.roi_lower_fraction);
        let crop = extract_roi(frame, roi).expect("lower roi always fits");
        let mask = threshold_mask(&crop, &self.config.hsv);
        let min_area = self.config.min_area_for(frame.width, frame.height);
        largest_contour_centroid(&mask, min_area).offset(roi.x as i64, roi.y as i64)
    }

    pub fn step(&mut self, frame: &Frame) -> ExpertStep {
        self.step_views(&[frame])
    }

    pub fn step_views(&mut self, frames: &[&Frame]) -> ExpertStep {
        let contours: Vec<ContourResult> = frames.iter().map(|f| self.perceive(f)).collect();
        let errors: Vec<f64> = contours
            .iter()
            .zip(frames)
            .filter_map(|(c, f)| compute_error(c, f.width).ok())
            .collect();
        if errors.is_empty() {
            self.pd = PdState::default();
            self.lost_ticks = self.lost_ticks.saturating_add(1);
            if self.lost_ticks > self.config.lost_hold_ticks {
                self.last_command = 0.0;
            }
            return ExpertStep {
                steering: self.last_command,
                w: None,
                error_px: None,
                contours,
                lost_ticks: self.lost_ticks,
            };
        }
        let e = errors.iter().sum::<f64>() / errors.len() as f64;
        let (w, pd) = pd_control(e, self.pd, &self.config.pd);
        self.pd = pd;
        self.lost_ticks = 0;
        self.last_command = saturate(-w, self.config.steering_limit);
        ExpertStep { steering: self.last_command, w: Some(w), error_px: Some(e), contours, lost_ticks: 0 }
    }
}
