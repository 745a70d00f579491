use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vehicle::{wrap_angle, VehicleState};
use super::{Result, SimError};

/// Closed centerline track with a painted line.
///
/// `centerline` is a closed polyline (first point repeated at the end) in
/// meters. The red line is painted along it with `line_width`.
/// `usable_half_width` is the half-width of the drivable corridor used for
/// spawning and failure rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    pub name: String,
    pub centerline: Vec<[f64; 2]>,
    pub line_width: f64,
    pub line_color: [u8; 3],
    pub floor_color: [u8; 3],
    pub usable_half_width: f64,
    pub total_length: f64,
}

/// Piece of a turtle-built track. Arc angles are in degrees, positive = left.
#[derive(Debug, Clone, Copy)]
pub enum Piece {
    Straight(f64),
    Arc { radius: f64, degrees: f64 },
}

const ARC_SPACING: f64 = 0.02;
const STRAIGHT_SPACING: f64 = 0.25;

impl TrackSpec {
    /// Builds a closed track from turtle pieces starting at the origin
    /// heading along +x.
    pub fn from_pieces(name: &str, pieces: &[Piece]) -> Result<Self> {
        let mut pts = vec![[0.0, 0.0]];
        let (mut x, mut y, mut h) = (0.0f64, 0.0f64, 0.0f64);
        for piece in pieces {
            match *piece {
                Piece::Straight(len) => {
                    let n = (len / STRAIGHT_SPACING).ceil().max(1.0) as usize;
                    let (x0, y0) = (x, y);
                    for i in 1..=n {
                        let d = len * i as f64 / n as f64;
                        pts.push([x0 + d * h.cos(), y0 + d * h.sin()]);
                    }
                    x = x0 + len * h.cos();
                    y = y0 + len * h.sin();
                }
                Piece::Arc { radius, degrees } => {
                    let sweep = degrees.to_radians();
                    let side = sweep.signum();
                    // Center lies on the turning side.
                    let (cx, cy) = (x - side * radius * h.sin(), y + side * radius * h.cos());
                    let start = h - side * PI / 2.0;
                    let step = (ARC_SPACING / radius).min(1f64.to_radians());
                    let n = (sweep.abs() / step).ceil().max(1.0) as usize;
                    for i in 1..=n {
                        let a = start + sweep * i as f64 / n as f64;
                        pts.push([cx + radius * a.cos(), cy + radius * a.sin()]);
                    }
                    let a = start + sweep;
                    x = cx + radius * a.cos();
                    y = cy + radius * a.sin();
                    h += sweep;
                }
            }
        }
        let gap = (x * x + y * y).sqrt();
        if gap > 1e-6 {
            return Err(SimError::InvalidTrack(format!(
                "pieces of {name} do not close (gap {gap:.3e} m)"
            )));
        }
        *pts.last_mut().expect("non-empty") = [0.0, 0.0];
        Self::from_points(name, pts)
    }

    /// Wraps explicit points with default line and floor styling.
    pub fn from_points(name: &str, centerline: Vec<[f64; 2]>) -> Result<Self> {
        let total_length = polyline_length(&centerline);
        let spec = Self {
            name: name.to_string(),
            centerline,
            line_width: 0.05,
            line_color: [200, 30, 30],
            floor_color: [118, 112, 104],
            usable_half_width: 0.4,
            total_length,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Two 2.5 m straights joined by two 180° arcs of radius 1.25 m,
    /// driven counterclockwise.
    pub fn stadium() -> Self {
        use Piece::*;
        Self::from_pieces(
            "stadium",
            &[
                Straight(2.5),
                Arc { radius: 1.25, degrees: 180.0 },
                Straight(2.5),
                Arc { radius: 1.25, degrees: 180.0 },
            ],
        )
        .expect("stadium geometry is valid")
    }

    /// Counterclockwise loop whose upper side has an inward S-shaped dent:
    /// two outer left turns and a 120° right turn, all at 1.0 m radius.
    pub fn s_curve() -> Self {
        use Piece::*;
        let dent_span = 4.0 * 60f64.to_radians().sin();
        Self::from_pieces(
            "s-curve",
            &[
                Straight(2.0),
                Arc { radius: 1.25, degrees: 180.0 },
                Arc { radius: 1.0, degrees: 60.0 },
                Arc { radius: 1.0, degrees: -120.0 },
                Arc { radius: 1.0, degrees: 60.0 },
                Arc { radius: 1.25, degrees: 180.0 },
                Straight(dent_span - 2.0),
            ],
        )
        .expect("s-curve geometry is valid")
    }

    /// Named built-in track.
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "stadium" => Some(Self::stadium()),
            "s-curve" => Some(Self::s_curve()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pts = &self.centerline;
        if pts.len() < 4 {
            return Err(SimError::InvalidTrack("centerline needs at least 4 points".into()));
        }
        if pts.first() != pts.last() {
            return Err(SimError::InvalidTrack("centerline is not closed".into()));
        }
        if pts.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SimError::InvalidTrack("non-finite centerline point".into()));
        }
        if !(self.line_width > 0.0 && self.usable_half_width > 0.0) {
            return Err(SimError::InvalidTrack("widths must be positive".into()));
        }
        let sum = polyline_length(pts);
        if (sum - self.total_length).abs() > 1e-6 {
            return Err(SimError::InvalidTrack(format!(
                "total_length {} differs from segment sum {sum}",
                self.total_length
            )));
        }
        let n = pts.len() - 1;
        for i in 0..n {
            if pts[i] == pts[i + 1] {
                return Err(SimError::InvalidTrack(format!("zero-length segment {i}")));
            }
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                if segments_intersect(pts[i], pts[i + 1], pts[j], pts[j + 1]) {
                    return Err(SimError::InvalidTrack(format!(
                        "segments {i} and {j} intersect"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Same geometry driven in the opposite direction.
    pub fn reversed(&self) -> Self {
        let mut spec = self.clone();
        spec.centerline.reverse();
        spec.name = format!("{}-reversed", self.name);
        spec.total_length = polyline_length(&spec.centerline);
        spec
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: Self = serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        spec.validate()
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(spec)
    }
}

fn polyline_length(pts: &[[f64; 2]]) -> f64 {
    pts.windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
        .sum()
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn segments_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

/// Projection of a point onto the centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub segment: usize,
    /// Arclength of the foot point from the first centerline point.
    pub arclength: f64,
    /// Signed distance; positive = left of the travel direction.
    pub signed_distance: f64,
}

/// A validated track with precomputed lookup structures.
#[derive(Debug, Clone)]
pub struct Track {
    spec: TrackSpec,
    cumulative: Vec<f64>,
    grid: SegmentGrid,
}

#[derive(Debug, Clone)]
struct SegmentGrid {
    min_x: f64,
    min_y: f64,
    cell: f64,
    cols: usize,
    rows: usize,
    cells: Vec<Vec<u32>>,
}

impl SegmentGrid {
    fn build(pts: &[[f64; 2]], reach: f64) -> Self {
        let cell = 0.1f64;
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in pts {
            min_x = min_x.min(p[0]);
            min_y = min_y.min(p[1]);
            max_x = max_x.max(p[0]);
            max_y = max_y.max(p[1]);
        }
        // Coarser cells for very large tracks keep the grid bounded.
        let area = (max_x - min_x + 2.0 * reach) * (max_y - min_y + 2.0 * reach);
        let cell = cell.max((area / 250_000.0).sqrt());
        let margin = reach + cell;
        let (min_x, min_y) = (min_x - margin, min_y - margin);
        let cols = ((max_x + margin - min_x) / cell).ceil() as usize + 1;
        let rows = ((max_y + margin - min_y) / cell).ceil() as usize + 1;
        let mut cells = vec![Vec::new(); cols * rows];
        for (i, w) in pts.windows(2).enumerate() {
            let lo_x = w[0][0].min(w[1][0]) - reach;
            let hi_x = w[0][0].max(w[1][0]) + reach;
            let lo_y = w[0][1].min(w[1][1]) - reach;
            let hi_y = w[0][1].max(w[1][1]) + reach;
            let c0 = ((lo_x - min_x) / cell).floor() as usize;
            let c1 = ((hi_x - min_x) / cell).floor() as usize;
            let r0 = ((lo_y - min_y) / cell).floor() as usize;
            let r1 = ((hi_y - min_y) / cell).floor() as usize;
            for r in r0..=r1.min(rows - 1) {
                for c in c0..=c1.min(cols - 1) {
                    cells[r * cols + c].push(i as u32);
                }
            }
        }
        Self { min_x, min_y, cell, cols, rows, cells }
    }

    fn candidates(&self, x: f64, y: f64) -> &[u32] {
        let c = ((x - self.min_x) / self.cell).floor();
        let r = ((y - self.min_y) / self.cell).floor();
        if c < 0.0 || r < 0.0 || c as usize >= self.cols || r as usize >= self.rows {
            return &[];
        }
        &self.cells[r as usize * self.cols + c as usize]
    }
}

impl Track {
    pub fn new(spec: TrackSpec) -> Result<Self> {
        spec.validate()?;
        let mut cumulative = Vec::with_capacity(spec.centerline.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in spec.centerline.windows(2) {
            acc += ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cumulative.push(acc);
        }
        let grid = SegmentGrid::build(&spec.centerline, spec.line_width / 2.0);
        Ok(Self { spec, cumulative, grid })
    }

    pub fn spec(&self) -> &TrackSpec {
        &self.spec
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().expect("non-empty")
    }

    pub fn segment_count(&self) -> usize {
        self.spec.centerline.len() - 1
    }

    fn segment_distance(&self, i: usize, x: f64, y: f64) -> (f64, f64, f64) {
        let a = self.spec.centerline[i];
        let b = self.spec.centerline[i + 1];
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        let t = (((x - a[0]) * dx + (y - a[1]) * dy) / len2).clamp(0.0, 1.0);
        let (fx, fy) = (a[0] + t * dx, a[1] + t * dy);
        let dist = ((x - fx).powi(2) + (y - fy).powi(2)).sqrt();
        let side = dx * (y - a[1]) - dy * (x - a[0]);
        (dist, t, if side >= 0.0 { 1.0 } else { -1.0 })
    }

    /// Nearest centerline point by exhaustive segment search.
    pub fn nearest(&self, x: f64, y: f64) -> TrackPoint {
        let mut best = (f64::INFINITY, 0usize, 0.0f64, 1.0f64);
        for i in 0..self.segment_count() {
            let (d, t, s) = self.segment_distance(i, x, y);
            if d < best.0 {
                best = (d, i, t, s);
            }
        }
        let (d, i, t, s) = best;
        let seg_len = self.cumulative[i + 1] - self.cumulative[i];
        TrackPoint {
            segment: i,
            arclength: self.cumulative[i] + t * seg_len,
            signed_distance: s * d,
        }
    }

    /// Whether a ground point is painted.
    pub fn on_line(&self, x: f64, y: f64) -> bool {
        let half = self.spec.line_width / 2.0;
        self.grid
            .candidates(x, y)
            .iter()
            .any(|&i| self.segment_distance(i as usize, x, y).0 <= half)
    }

    /// Position and tangent heading at an arclength (wrapped into the lap).
    pub fn point_at(&self, arclength: f64) -> ([f64; 2], f64) {
        let s = arclength.rem_euclid(self.length());
        let i = match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.segment_count() - 1),
            Err(i) => i - 1,
        };
        let a = self.spec.centerline[i];
        let b = self.spec.centerline[i + 1];
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let t = (s - self.cumulative[i]) / seg;
        let pos = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
        (pos, (b[1] - a[1]).atan2(b[0] - a[0]))
    }
}

/// Signed perpendicular distance to the nearest centerline segment;
/// positive = left of the travel direction.
pub fn cross_track_error(track: &Track, state: &VehicleState) -> f64 {
    track.nearest(state.x, state.y).signed_distance
}

/// Pose at a fraction of the lap, offset to the left by `lateral_offset`
/// meters and rotated by `heading_offset` radians from the tangent.
pub fn spawn_pose(
    track: &Track,
    arclength_fraction: f64,
    lateral_offset: f64,
    heading_offset: f64,
) -> Result<VehicleState> {
    if !(0.0..1.0).contains(&arclength_fraction) {
        return Err(SimError::Contract(format!(
            "arclength fraction {arclength_fraction} outside [0, 1)"
        )));
    }
    if !lateral_offset.is_finite() || lateral_offset.abs() >= track.spec.usable_half_width {
        return Err(SimError::Contract(format!(
            "lateral offset {lateral_offset} outside usable half-width {}",
            track.spec.usable_half_width
        )));
    }
    let ([px, py], tangent) = track.point_at(arclength_fraction * track.length());
    let (s, c) = tangent.sin_cos();
    let (mut x, mut y) = (px - lateral_offset * s, py + lateral_offset * c);
    // On the inner side of a polyline vertex the neighbouring segment can be
    // slightly closer; slide along its normal onto the true offset curve.
    for _ in 0..4 {
        let near = track.nearest(x, y);
        let miss = lateral_offset - near.signed_distance;
        if miss.abs() < 1e-12 {
            break;
        }
        let a = track.spec.centerline[near.segment];
        let b = track.spec.centerline[near.segment + 1];
        let h = (b[1] - a[1]).atan2(b[0] - a[0]);
        x -= miss * h.sin();
        y += miss * h.cos();
    }
    Ok(VehicleState::new(x, y, wrap_angle(tangent + heading_offset)))
}
