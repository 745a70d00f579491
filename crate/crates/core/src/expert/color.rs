use serde::{Deserialize, Serialize};

use crate::sim::Frame;

/// Hue in degrees [0, 360), saturation and value in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hsv {
    pub h: f32,
    pub s: f32,
    pub v: f32,
}

/// Hexcone RGB to HSV. Gray pixels get hue 0.
pub fn rgb_to_hsv(rgb: [u8; 3]) -> Hsv {
    let [r, g, b] = rgb.map(|c| c as f32 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let h = if h < 0.0 { h + 360.0 } else { h };
    Hsv { h: if h >= 360.0 { 0.0 } else { h }, s, v: max }
}

/// Inclusive HSV box. When `lower.h > upper.h` the hue range wraps through
/// 0°, which `hue_wraps` must state explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsvBounds {
    pub lower: [f32; 3],
    pub upper: [f32; 3],
    #[serde(default)]
    pub hue_wraps: bool,
}

impl HsvBounds {
    /// Red line bounds: H in [350°, 10°], S ≥ 0.5, V ≥ 0.3.
    pub fn red() -> Self {
        Self {
            lower: [350.0, 0.5, 0.3],
            upper: [10.0, 1.0, 1.0],
            hue_wraps: true,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let [lh, ls, lv] = self.lower;
        let [uh, us, uv] = self.upper;
        let hue_ok = |h: f32| (0.0..360.0).contains(&h);
        let unit = |x: f32| (0.0..=1.0).contains(&x);
        if !(hue_ok(lh) && hue_ok(uh) && unit(ls) && unit(us) && unit(lv) && unit(uv)) {
            return Err(format!("HSV bounds out of range: {self:?}"));
        }
        if ls > us || lv > uv {
            return Err(format!("HSV lower bound exceeds upper bound: {self:?}"));
        }
        if (lh > uh) != self.hue_wraps {
            return Err(format!(
                "hue range {lh}..{uh} requires hue_wraps = {}",
                lh > uh
            ));
        }
        Ok(())
    }

    pub fn contains(&self, hsv: Hsv) -> bool {
        let hue_in = if self.hue_wraps {
            hsv.h >= self.lower[0] || hsv.h <= self.upper[0]
        } else {
            hsv.h >= self.lower[0] && hsv.h <= self.upper[0]
        };
        hue_in
            && hsv.s >= self.lower[1]
            && hsv.s <= self.upper[1]
            && hsv.v >= self.lower[2]
            && hsv.v <= self.upper[2]
    }
}

/// Binary image, row-major, one byte per pixel (0 or 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

fn morph(mask: &Mask, erode: bool) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let mut out = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut hit = erode;
            'nb: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    // Outside the image counts as background.
                    let on = nx >= 0
                        && ny >= 0
                        && (nx as usize) < w
                        && (ny as usize) < h
                        && mask.get(nx as usize, ny as usize);
                    if erode && !on {
                        hit = false;
                        break 'nb;
                    }
                    if !erode && on {
                        hit = true;
                        break 'nb;
                    }
                }
            }
            out.set(x, y, hit);
        }
    }
    out
}

pub fn erode3(mask: &Mask) -> Mask {
    morph(mask, true)
}

pub fn dilate3(mask: &Mask) -> Mask {
    morph(mask, false)
}

/// Per-pixel HSV range test followed by one 3×3 opening.
pub fn threshold_mask(frame: &Frame, bounds: &HsvBounds) -> Mask {
    let mut mask = Mask::new(frame.width, frame.height);
    for (i, px) in frame.pixels.chunks_exact(3).enumerate() {
        mask.data[i] = bounds.contains(rgb_to_hsv([px[0], px[1], px[2]])) as u8;
    }
    dilate3(&erode3(&mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference_hsv(rgb: [u8; 3]) -> (f64, f64, f64) {
        let [r, g, b] = rgb.map(|c| c as f64 / 255.0);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let d = max - min;
        let mut h = if d == 0.0 {
            0.0
        } else if max == r {
            60.0 * (((g - b) / d).rem_euclid(6.0))
        } else if max == g {
            60.0 * ((b - r) / d + 2.0)
        } else {
            60.0 * ((r - g) / d + 4.0)
        };
        if h >= 360.0 {
            h -= 360.0;
        }
        (h, if max == 0.0 { 0.0 } else { d / max }, max)
    }

    #[test]
    fn pure_red_and_gray() {
        assert_eq!(rgb_to_hsv([255, 0, 0]), Hsv { h: 0.0, s: 1.0, v: 1.0 });
        let g = rgb_to_hsv([128, 128, 128]);
        assert_eq!((g.h, g.s), (0.0, 0.0));
        assert!((g.v - 128.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn matches_double_precision_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..256 {
            let px = [rng.gen(), rng.gen(), rng.gen()];
            let got = rgb_to_hsv(px);
            let (h, s, v) = reference_hsv(px);
            let dh = (got.h as f64 - h).abs();
            let dh = dh.min(360.0 - dh);
            // Hue compared on its normalized [0, 1) scale.
            assert!(dh / 360.0 < 1e-4, "{px:?}: {} vs {h}", got.h);
            assert!((got.s as f64 - s).abs() < 1e-4, "{px:?}");
            assert!((got.v as f64 - v).abs() < 1e-4, "{px:?}");
        }
    }

    #[test]
    fn hue_wrap_range() {
        let b = HsvBounds::red();
        b.validate().unwrap();
        let probe = |h| Hsv { h, s: 0.9, v: 0.9 };
        assert!(b.contains(probe(5.0)));
        assert!(b.contains(probe(355.0)));
        assert!(!b.contains(probe(180.0)));

        let mut unflagged = b;
        unflagged.hue_wraps = false;
        assert!(unflagged.validate().is_err());
    }

    #[test]
    fn floor_frame_has_empty_mask() {
        let f = Frame::solid(40, 30, [118, 112, 104]);
        assert_eq!(threshold_mask(&f, &HsvBounds::red()).count(), 0);
    }

    #[test]
    fn solid_red_keeps_interior() {
        let f = Frame::solid(20, 12, [200, 30, 30]);
        let m = threshold_mask(&f, &HsvBounds::red());
        for y in 1..11 {
            for x in 1..19 {
                assert!(m.get(x, y));
            }
        }
    }

    #[test]
    fn isolated_pixel_is_removed() {
        let mut f = Frame::solid(9, 9, [118, 112, 104]);
        f.set_pixel(4, 4, [220, 20, 20]);
        assert_eq!(threshold_mask(&f, &HsvBounds::red()).count(), 0);
    }
}
