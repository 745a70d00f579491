use serde::{Deserialize, Serialize};

use super::color::Mask;

/// Largest 8-connected blob of a mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourResult {
    pub found: bool,
    pub centroid_x: i64,
    pub centroid_y: i64,
    pub area: usize,
    /// Ordered outer boundary, clockwise in image coordinates.
    pub contour: Vec<[i64; 2]>,
}

impl ContourResult {
    pub fn not_found() -> Self {
        Self { found: false, centroid_x: 0, centroid_y: 0, area: 0, contour: Vec::new() }
    }

    /// Shifts coordinates from a cropped region back into the full frame.
    pub fn offset(mut self, dx: i64, dy: i64) -> Self {
        if self.found {
            self.centroid_x += dx;
            self.centroid_y += dy;
            for p in &mut self.contour {
                p[0] += dx;
                p[1] += dy;
            }
        }
        self
    }
}

// Clockwise (image y grows downward) starting from west.
const DIRS: [(i64, i64); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

/// Labels 8-connected components and reports the largest one.
///
/// Ties keep the component met first in raster order. Components smaller
/// than `min_area` count as absent.
pub fn largest_contour_centroid(mask: &Mask, min_area: usize) -> ContourResult {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut stack = Vec::new();
    // (area, sum_x, sum_y, first pixel index)
    let mut best: Option<(usize, u64, u64, usize)> = None;
    for start in 0..w * h {
        if seen[start] || mask.data[start] == 0 {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut area, mut sx, mut sy) = (0usize, 0u64, 0u64);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            area += 1;
            sx += x as u64;
            sy += y as u64;
            for (dx, dy) in DIRS {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !seen[j] && mask.data[j] != 0 {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if best.is_none_or(|b| area > b.0) {
            best = Some((area, sx, sy, start));
        }
    }
    let Some((area, sx, sy, start)) = best else {
        return ContourResult::not_found();
    };
    if area < min_area {
        return ContourResult::not_found();
    }
    ContourResult {
        found: true,
        centroid_x: (sx as f64 / area as f64).round() as i64,
        centroid_y: (sy as f64 / area as f64).round() as i64,
        area,
        contour: trace_boundary(mask, start, area),
    }
}

/// Moore-neighbour tracing from the component's first raster pixel.
fn trace_boundary(mask: &Mask, start: usize, area: usize) -> Vec<[i64; 2]> {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let on = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && mask.get(x as usize, y as usize);
    let start = [start as i64 % w, start as i64 / w];
    let mut contour = vec![start];
    let mut cur = start;
    // The west neighbour of the first raster pixel is background.
    let mut back = 0usize;
    let start_back = back;
    let limit = 4 * area + 8;
    for _ in 0..limit {
        let mut next = None;
        for k in 1..=8 {
            let d = (back + k) % 8;
            let (nx, ny) = (cur[0] + DIRS[d].0, cur[1] + DIRS[d].1);
            if on(nx, ny) {
                next = Some((d, [nx, ny]));
                break;
            }
        }
        let Some((d, q)) = next else {
            break; // isolated pixel
        };
        let prev_bg = DIRS[(d + 7) % 8];
        let rel = (cur[0] + prev_bg.0 - q[0], cur[1] + prev_bg.1 - q[1]);
        back = DIRS.iter().position(|&dir| dir == rel).expect("adjacent background pixel");
        if q == start && back == start_back {
            break;
        }
        cur = q;
        if cur == start {
            continue;
        }
        contour.push(cur);
    }
    contour
}
