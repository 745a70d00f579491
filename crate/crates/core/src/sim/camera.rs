use serde::{Deserialize, Serialize};

use super::track::Track;
use super::vehicle::VehicleState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraId {
    Left,
    Right,
}

impl CameraId {
    pub fn as_str(self) -> &'static str {
        match self {
            CameraId::Left => "left",
            CameraId::Right => "right",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            CameraId::Left => 0,
            CameraId::Right => 1,
        }
    }
}

impl std::str::FromStr for CameraId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "left" => Ok(CameraId::Left),
            "right" => Ok(CameraId::Right),
            other => Err(format!("unknown camera id {other:?}")),
        }
    }
}

/// Pinhole camera rigidly mounted on the car, pitched down toward the floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub id: CameraId,
    pub image_width: usize,
    pub image_height: usize,
    pub horizontal_fov: f64,
    pub mount_height: f64,
    /// Downward pitch in degrees.
    pub pitch: f64,
    /// Signed offset to the left of the car axis, meters.
    pub lateral_offset: f64,
    /// Offset ahead of the rear axle, meters.
    pub forward_offset: f64,
    pub rate: f64,
}

/// Half of the stereo baseline between the two lenses.
pub const STEREO_HALF_BASELINE: f64 = 0.06;
const SKY_COLOR: [u8; 3] = [170, 190, 215];

impl CameraSpec {
    pub fn left() -> Self {
        Self {
            id: CameraId::Left,
            image_width: 640,
            image_height: 360,
            horizontal_fov: 90.0,
            mount_height: 0.2,
            pitch: 20.0,
            lateral_offset: STEREO_HALF_BASELINE,
            forward_offset: 0.25,
            rate: 25.0,
        }
    }

    pub fn right() -> Self {
        Self {
            id: CameraId::Right,
            lateral_offset: -STEREO_HALF_BASELINE,
            ..Self::left()
        }
    }

    pub fn for_id(id: CameraId) -> Self {
        match id {
            CameraId::Left => Self::left(),
            CameraId::Right => Self::right(),
        }
    }

    fn focal(&self) -> f64 {
        (self.image_width as f64 / 2.0) / (self.horizontal_fov.to_radians() / 2.0).tan()
    }

    fn center(&self) -> (f64, f64) {
        (self.image_width as f64 / 2.0, self.image_height as f64 / 2.0)
    }

    fn position(&self, state: &VehicleState) -> (f64, f64) {
        let (s, c) = state.heading.sin_cos();
        (
            state.x + c * self.forward_offset - s * self.lateral_offset,
            state.y + s * self.forward_offset + c * self.lateral_offset,
        )
    }

    /// Ground (z = 0) point seen through the center of pixel `(u, v)`,
    /// or `None` for rays at or above the horizon.
    pub fn unproject(&self, state: &VehicleState, u: f64, v: f64) -> Option<[f64; 2]> {
        let f = self.focal();
        let (cx, cy) = self.center();
        let (sp, cp) = self.pitch.to_radians().sin_cos();
        let (xo, yo) = ((u - cx) / f, (v - cy) / f);
        let forward = cp - yo * sp;
        let up = -yo * cp - sp;
        if up >= -1e-9 {
            return None;
        }
        let t = self.mount_height / -up;
        let (gf, gl) = (forward * t, -xo * t);
        let (px, py) = self.position(state);
        let (s, c) = state.heading.sin_cos();
        Some([px + c * gf - s * gl, py + s * gf + c * gl])
    }

    /// Continuous pixel coordinates of a ground point, `None` when the point
    /// is behind the camera.
    pub fn project(&self, state: &VehicleState, point: [f64; 2]) -> Option<(f64, f64)> {
        let f = self.focal();
        let (cx, cy) = self.center();
        let (sp, cp) = self.pitch.to_radians().sin_cos();
        let (px, py) = self.position(state);
        let (s, c) = state.heading.sin_cos();
        let (dx, dy) = (point[0] - px, point[1] - py);
        let gf = c * dx + s * dy;
        let gl = -s * dx + c * dy;
        let gu = -self.mount_height;
        // Vehicle frame (forward, left, up) into optical (right, down, depth).
        let depth = gf * cp - gu * sp;
        if depth <= 1e-9 {
            return None;
        }
        let right = -gl;
        let down = -gf * sp - gu * cp;
        Some((cx + f * right / depth, cy + f * down / depth))
    }
}

/// One RGB camera image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB bytes.
    pub pixels: Vec<u8>,
    pub camera_id: CameraId,
    pub tick: u64,
}

impl Frame {
    pub fn solid(width: usize, height: usize, color: [u8; 3]) -> Self {
        let pixels = color.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, pixels, camera_id: CameraId::Left, tick: 0 }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Multiplies every channel by `factor`, clamping to [0, 255].
    pub fn scaled(&self, factor: f32) -> Frame {
        let pixels = self
            .pixels
            .iter()
            .map(|&p| (p as f32 * factor).round().clamp(0.0, 255.0) as u8)
            .collect();
        Frame { pixels, ..self.clone() }
    }
}

/// Renders the floor, painted line and sky as seen by `camera`.
///
/// Every image row sees the floor along one line at a fixed forward
/// distance, so each painted segment (a capsule of radius line_width/2)
/// covers one interval of that row, found in closed form.
pub fn render_camera(track: &Track, state: &VehicleState, camera: &CameraSpec) -> Frame {
    let (w, h) = (camera.image_width, camera.image_height);
    let spec = track.spec();
    let mut frame = Frame::solid(w, h, SKY_COLOR);
    frame.camera_id = camera.id;
    frame.tick = state.tick;

    let f = camera.focal();
    let (cx, cy) = camera.center();
    let (sp, cp) = camera.pitch.to_radians().sin_cos();
    let (px, py) = camera.position(state);
    let (s, c) = state.heading.sin_cos();
    let r = spec.line_width / 2.0;

    // (row, forward distance, ground meters per unit of normalized x)
    let mut rows: Vec<(usize, f64, f64)> = Vec::with_capacity(h);
    for v in 0..h {
        let yo = (v as f64 + 0.5 - cy) / f;
        let up = -yo * cp - sp;
        if up >= -1e-9 {
            continue;
        }
        let t = camera.mount_height / -up;
        rows.push((v, (cp - yo * sp) * t, t));
    }
    if rows.is_empty() {
        return frame;
    }
    // Forward distance falls monotonically down the image.
    let mut spans: Vec<Vec<(f64, f64)>> = vec![Vec::new(); rows.len()];
    let local = |p: [f64; 2]| {
        let (dx, dy) = (p[0] - px, p[1] - py);
        (c * dx + s * dy, -s * dx + c * dy)
    };
    for seg in spec.centerline.windows(2) {
        let (fa, la) = local(seg[0]);
        let (fb, lb) = local(seg[1]);
        let (lo_f, hi_f) = (fa.min(fb) - r, fa.max(fb) + r);
        let first = rows.partition_point(|row| row.1 > hi_f);
        let last = rows.partition_point(|row| row.1 >= lo_f);
        for (k, row) in rows.iter().enumerate().take(last).skip(first) {
            if let Some(iv) = capsule_row_interval(fa, la, fb, lb, r, row.1) {
                spans[k].push(iv);
            }
        }
    }
    for (k, &(v, _, t)) in rows.iter().enumerate() {
        let mut row_px = vec![false; w];
        for &(lo, hi) in &spans[k] {
            // Lateral offset l maps to pixel center u + 0.5 = cx - l·f/t.
            let a = cx - hi * f / t - 0.5;
            let b = cx - lo * f / t - 0.5;
            let u0 = a.ceil().max(0.0);
            let u1 = b.floor().min(w as f64 - 1.0);
            if u0 <= u1 {
                row_px[u0 as usize..=u1 as usize].iter_mut().for_each(|p| *p = true);
            }
        }
        let out = &mut frame.pixels[v * w * 3..(v + 1) * w * 3];
        for (u, &on) in row_px.iter().enumerate() {
            let color = if on { spec.line_color } else { spec.floor_color };
            out[u * 3..u * 3 + 3].copy_from_slice(&color);
        }
    }
    frame
}

/// Lateral interval of the line `forward = g` within distance `r` of the
/// segment (fa, la)-(fb, lb).
fn capsule_row_interval(fa: f64, la: f64, fb: f64, lb: f64, r: f64, g: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (fe, le) in [(fa, la), (fb, lb)] {
        let d = g - fe;
        if d.abs() <= r {
            let half = (r * r - d * d).sqrt();
            lo = lo.min(le - half);
            hi = hi.max(le + half);
        }
    }
    let (df, dl) = (fb - fa, lb - la);
    let len2 = df * df + dl * dl;
    if len2 > 0.0 {
        let len = len2.sqrt();
        // Band of perpendicular distance ≤ r, in l.
        let band = if df.abs() > 1e-12 {
            let a = la + (dl * (g - fa) - r * len) / df;
            let b = la + (dl * (g - fa) + r * len) / df;
            Some((a.min(b), a.max(b)))
        } else if (dl * (g - fa)).abs() <= r * len {
            Some((f64::NEG_INFINITY, f64::INFINITY))
        } else {
            None
        };
        // Projection onto the segment within [0, 1], in l.
        let slab = if dl.abs() > 1e-12 {
            let a = la - (g - fa) * df / dl;
            let b = la + (len2 - (g - fa) * df) / dl;
            Some((a.min(b), a.max(b)))
        } else {
            let t = (g - fa) * df / len2;
            (0.0..=1.0).contains(&t).then_some((f64::NEG_INFINITY, f64::INFINITY))
        };
        if let (Some(p), Some(q)) = (band, slab) {
            let (a, b) = (p.0.max(q.0), p.1.min(q.1));
            if a <= b {
                lo = lo.min(a);
                hi = hi.max(b);
            }
        }
    }
    (lo <= hi).then_some((lo, hi))
}
