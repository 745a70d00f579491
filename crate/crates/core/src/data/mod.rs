//! Demonstration datasets: recording, brightness augmentation, z-score
//! normalization, 3-frame sequence assembly, splitting and persistence.

mod collect;
mod store;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use collect::{drive_run, Driver, HumanNoise, RunConfig, RunLog, SpawnPose};
pub use store::{
    load_dataset, load_manifest, read_ppm, save_dataset, write_ppm, Dataset, DatasetManifest, ManifestEntry,
    MANIFEST_VERSION,
};

use crate::sim::{CameraId, Frame};
use crate::tensor::Tensor;

/// Model input resolution.
pub const MODEL_WIDTH: usize = 200;
pub const MODEL_HEIGHT: usize = 66;
pub const STD_EPSILON: f32 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("unsupported dataset version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Expert,
    Human,
}

/// One labeled camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frame: Arc<Frame>,
    /// Degrees, already saturated.
    pub steering: f32,
    pub tick: u64,
    pub camera_id: CameraId,
    pub source: Source,
    pub run_id: String,
}

/// Three consecutive frames of one run and camera, labeled by the last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceSample {
    /// Indices into the sample list, oldest first.
    pub frames: [usize; 3],
    pub last_tick: u64,
}

/// Identity of one recording run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMeta {
    pub tick: u64,
    pub camera_id: CameraId,
    pub source: Source,
    pub run_id: String,
}

/// Saturates the command and attaches it to the frame.
pub fn record_sample(frame: Arc<Frame>, steering: f64, meta: SampleMeta, limit: f64) -> Result<Sample> {
    if !steering.is_finite() {
        return Err(DataError::Contract(format!("non-finite steering at tick {}", meta.tick)));
    }
    Ok(Sample {
        frame,
        steering: steering.clamp(-limit, limit) as f32,
        tick: meta.tick,
        camera_id: meta.camera_id,
        source: meta.source,
        run_id: meta.run_id,
    })
}

pub fn augment_brightness(frame: &Frame, factor: f32) -> Result<Frame> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(DataError::Contract(format!("brightness factor must be positive, got {factor}")));
    }
    Ok(frame.scaled(factor))
}

/// Run id of the block produced with `factor`; 1.0 keeps the original.
pub fn augmented_run_id(run_id: &str, factor: f32) -> String {
    if factor == 1.0 {
        run_id.to_string()
    } else {
        format!("{run_id}-b{factor:.2}")
    }
}

/// One block per factor, each in input order. Every block gets its own run
/// id so sequences never mix brightness levels.
pub fn build_augmented_set(samples: &[Sample], factors: &[f32]) -> Result<Vec<Sample>> {
    if !factors.contains(&1.0) {
        return Err(DataError::Contract("augmentation factors must include 1.0".into()));
    }
    let mut out = Vec::with_capacity(samples.len() * factors.len());
    for &factor in factors {
        for s in samples {
            let frame = if factor == 1.0 {
                Arc::clone(&s.frame)
            } else {
                Arc::new(augment_brightness(&s.frame, factor)?)
            };
            out.push(Sample { frame, run_id: augmented_run_id(&s.run_id, factor), ..s.clone() });
        }
    }
    Ok(out)
}

/// Per-channel mean and standard deviation of pixel/255.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
    /// Which entries the statistics were computed from.
    pub provenance: String,
}

impl NormStats {
    pub fn identity() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3], provenance: "identity".into() }
    }

    /// Population statistics over `frames`, two passes in f64.
    pub fn compute<'a, I>(frames: I, provenance: &str) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Frame>,
        I::IntoIter: Clone,
    {
        let frames = frames.into_iter();
        let mut sum = [0.0f64; 3];
        let mut n = 0u64;
        for f in frames.clone() {
            for px in f.pixels.chunks_exact(3) {
                for c in 0..3 {
                    sum[c] += px[c] as f64;
                }
            }
            n += (f.width * f.height) as u64;
        }
        if n == 0 {
            return Err(DataError::Contract("normalization statistics over zero frames".into()));
        }
        let mean = sum.map(|s| s / n as f64);
        let mut sq = [0.0f64; 3];
        for f in frames {
            for px in f.pixels.chunks_exact(3) {
                for c in 0..3 {
                    let d = px[c] as f64 - mean[c];
                    sq[c] += d * d;
                }
            }
        }
        Ok(Self {
            mean: mean.map(|m| (m / 255.0) as f32),
            std: [0, 1, 2].map(|c| ((sq[c] / n as f64).sqrt() / 255.0) as f32),
            provenance: provenance.into(),
        })
    }
}

/// `[3,H,W]` tensor of `(pixel/255 − mean) / max(std, 1e-6)`.
pub fn zscore_normalize(frame: &Frame, stats: &NormStats) -> Tensor {
    let plane = frame.width * frame.height;
    let mut data = vec![0.0f32; 3 * plane];
    let inv = stats.std.map(|s| 1.0 / s.max(STD_EPSILON));
    for (i, px) in frame.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (px[c] as f32 / 255.0 - stats.mean[c]) * inv[c];
        }
    }
    Tensor::new(vec![3, frame.height, frame.width], data).expect("frame dimensions are positive")
}

/// Sliding 3-tick windows within each (run, camera) stream.
pub fn assemble_sequences(samples: &[Sample]) -> Vec<SequenceSample> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&samples[a], &samples[b]);
        (&x.run_id, x.camera_id, x.tick).cmp(&(&y.run_id, y.camera_id, y.tick))
    });
    let mut out = Vec::new();
    for w in order.windows(3) {
        let [a, b, c] = [w[0], w[1], w[2]].map(|i| &samples[i]);
        let same_stream = a.run_id == c.run_id
            && b.run_id == c.run_id
            && a.camera_id == c.camera_id
            && b.camera_id == c.camera_id;
        if same_stream && b.tick == a.tick + 1 && c.tick == b.tick + 1 {
            out.push(SequenceSample { frames: [w[0], w[1], w[2]], last_tick: c.tick });
        }
    }
    out
}

/// Fractions of a split. Train and validation must be in (0, 1); the test
/// fraction may be 0 when a separately recorded test set is used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.85, val_fraction: 0.15, test_fraction: 0.0, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let open = |f: f64| f > 0.0 && f < 1.0;
        let sum = self.train_fraction + self.val_fraction + self.test_fraction;
        if !open(self.train_fraction)
            || !open(self.val_fraction)
            || !(0.0..1.0).contains(&self.test_fraction)
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(DataError::Contract(format!("invalid split fractions {self:?}")));
        }
        Ok(())
    }
}

/// Seeded shuffle of `count` units (sequences or frames), cut into
/// train/val/test index lists.
pub fn split_dataset(count: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    if count == 0 {
        return Err(DataError::Contract("cannot split an empty dataset".into()));
    }
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = (count as f64 * spec.train_fraction).round() as usize;
    let n_val = ((count as f64 * spec.val_fraction).round() as usize).min(count - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok((idx, val, test))
}

/// Area-average resampling, the exact box integral of the source image.
pub fn downscale_area(frame: &Frame, width: usize, height: usize) -> Frame {
    if frame.width == width && frame.height == height {
        return frame.clone();
    }
    let xw = area_weights(frame.width, width);
    let yw = area_weights(frame.height, height);
    let norm = (frame.width as f32 / width as f32) * (frame.height as f32 / height as f32);
    // Horizontal pass into f32 rows, then vertical.
    let mut rows = vec![0.0f32; frame.height * width * 3];
    for y in 0..frame.height {
        let src = &frame.pixels[y * frame.width * 3..(y + 1) * frame.width * 3];
        for (ox, taps) in xw.iter().enumerate() {
            let mut acc = [0.0f32; 3];
            for &(sx, w) in taps {
                for c in 0..3 {
                    acc[c] += w * src[sx * 3 + c] as f32;
                }
            }
            rows[(y * width + ox) * 3..(y * width + ox) * 3 + 3].copy_from_slice(&acc);
        }
    }
    let mut pixels = vec![0u8; width * height * 3];
    for (oy, taps) in yw.iter().enumerate() {
        for ox in 0..width {
            let mut acc = [0.0f32; 3];
            for &(sy, w) in taps {
                for c in 0..3 {
                    acc[c] += w * rows[(sy * width + ox) * 3 + c];
                }
            }
            for c in 0..3 {
                pixels[(oy * width + ox) * 3 + c] = (acc[c] / norm).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Frame { width, height, pixels, ..frame.clone() }
}

/// Source taps and overlap lengths for each output cell along one axis.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut taps = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < src {
                let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)) as f32;
                if overlap > 1e-7 {
                    taps.push((s, overlap));
                }
                s += 1;
            }
            taps
        })
        .collect()
}

/// Distinct run ids in first-seen order.
pub fn run_ids(samples: &[Sample]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    samples
        .iter()
        .filter(|s| seen.insert(s.run_id.clone()))
        .map(|s| s.run_id.clone())
        .collect()
}
