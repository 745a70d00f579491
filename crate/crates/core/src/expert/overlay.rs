use serde::{Deserialize, Serialize};

use super::contour::ContourResult;
use crate::sim::Frame;

pub const OVERLAY_RED: [u8; 3] = [255, 0, 0];
pub const OVERLAY_GREEN: [u8; 3] = [0, 255, 0];
pub const OVERLAY_WHITE: [u8; 3] = [255, 255, 255];
pub const OVERLAY_PURPLE: [u8; 3] = [160, 32, 240];
pub const CENTROID_RADIUS: i64 = 5;

/// Annotation geometry in full-frame pixel coordinates, shared with clients
/// that draw the overlay themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayGeometry {
    pub width: usize,
    pub height: usize,
    pub found: bool,
    pub centroid: Option<[i64; 2]>,
    pub contour: Vec<[i64; 2]>,
    /// x0, y0, x1, y1
    pub center_line: [i64; 4],
    pub error_segment: Option<[i64; 4]>,
    pub error_px: Option<f64>,
}

impl OverlayGeometry {
    pub fn new(result: &ContourResult, width: usize, height: usize) -> Self {
        let cx = (width / 2) as i64;
        let centroid = result.found.then_some([result.centroid_x, result.centroid_y]);
        Self {
            width,
            height,
            found: result.found,
            centroid,
            contour: if result.found { result.contour.clone() } else { Vec::new() },
            center_line: [cx, 0, cx, height as i64 - 1],
            error_segment: centroid.map(|[x, y]| [cx, y, x, y]),
            error_px: centroid.map(|[x, _]| x as f64 - width as f64 / 2.0),
        }
    }
}

fn put(frame: &mut Frame, x: i64, y: i64, rgb: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < frame.width && (y as usize) < frame.height {
        frame.set_pixel(x as usize, y as usize, rgb);
    }
}

fn line(frame: &mut Frame, [x0, y0, x1, y1]: [i64; 4], rgb: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(frame, x, y, rgb);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Draws the contour (green), error segment (purple), center line (white)
/// and a filled centroid disc (red), in that order.
pub fn render_debug_overlay(frame: &Frame, result: &ContourResult) -> Frame {
    let mut out = frame.clone();
    let g = OverlayGeometry::new(result, frame.width, frame.height);
    for p in &g.contour {
        put(&mut out, p[0], p[1], OVERLAY_GREEN);
    }
    if let Some(seg) = g.error_segment {
        line(&mut out, seg, OVERLAY_PURPLE);
    }
    line(&mut out, g.center_line, OVERLAY_WHITE);
    if let Some([x, y]) = g.centroid {
        let r = CENTROID_RADIUS;
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    put(&mut out, x + dx, y + dy, OVERLAY_RED);
                }
            }
        }
    }
    out
}
