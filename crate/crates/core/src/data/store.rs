use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{DataError, NormStats, Result, Sample, Source};
use crate::sim::{CameraId, Frame};

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.jsonl";

/// One manifest line per sample; `path` is relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub steering: f32,
    pub tick: u64,
    pub camera_id: CameraId,
    pub source: Source,
    pub run_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    version: u32,
    image_width: usize,
    image_height: usize,
    normalization_stats: Option<NormStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub image_width: usize,
    pub image_height: usize,
    pub entries: Vec<ManifestEntry>,
    pub normalization_stats: Option<NormStats>,
}

/// Samples held in memory together with their normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_width: usize,
    pub image_height: usize,
    pub samples: Vec<Sample>,
    pub stats: Option<NormStats>,
}

fn frame_path(run_id: &str, camera: CameraId, tick: u64) -> String {
    format!("frames/{run_id}/{}/{tick}.ppm", camera.as_str())
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let (w, h) = samples
            .first()
            .map(|s| (s.frame.width, s.frame.height))
            .ok_or_else(|| DataError::Contract("dataset has no samples".into()))?;
        if let Some(s) = samples.iter().find(|s| (s.frame.width, s.frame.height) != (w, h)) {
            return Err(DataError::Contract(format!(
                "mixed frame sizes: {}x{} vs {}x{} at {} tick {}",
                w, h, s.frame.width, s.frame.height, s.run_id, s.tick
            )));
        }
        Ok(Self { image_width: w, image_height: h, samples, stats: None })
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            version: MANIFEST_VERSION,
            image_width: self.image_width,
            image_height: self.image_height,
            entries: self
                .samples
                .iter()
                .map(|s| ManifestEntry {
                    path: frame_path(&s.run_id, s.camera_id, s.tick),
                    steering: s.steering,
                    tick: s.tick,
                    camera_id: s.camera_id,
                    source: s.source,
                    run_id: s.run_id.clone(),
                })
                .collect(),
            normalization_stats: self.stats.clone(),
        }
    }

    /// CRC32 over labels, metadata and pixels, for reports and determinism checks.
    pub fn content_hash(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for s in &self.samples {
            h.update(s.run_id.as_bytes());
            h.update(&s.tick.to_le_bytes());
            h.update(&[s.camera_id.code(), s.source as u8]);
            h.update(&s.steering.to_le_bytes());
            h.update(&s.frame.pixels);
        }
        h.finalize()
    }
}

pub fn write_ppm(path: &Path, frame: &Frame) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    buf.extend_from_slice(&frame.pixels);
    fs::write(path, buf).map_err(|e| DataError::io(path, e))
}

/// Binary P6 with maxval 255; `#` comments in the header are skipped.
pub fn read_ppm(path: &Path) -> Result<Frame> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let bad = |message: &str| DataError::Format { path: path.display().to_string(), message: message.into() };
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM dimension"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 || w == 0 || h == 0 {
        return Err(bad("unsupported PPM maxval or size"));
    }
    let data = &bytes[i + 1..];
    if data.len() != w * h * 3 {
        return Err(bad(&format!("expected {} pixel bytes, found {}", w * h * 3, data.len())));
    }
    Ok(Frame { width: w, height: h, pixels: data.to_vec(), camera_id: CameraId::Left, tick: 0 })
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let manifest = dataset.manifest();
    let mut seen = HashSet::new();
    for e in &manifest.entries {
        if !seen.insert(&e.path) {
            return Err(DataError::Contract(format!("duplicate sample {}", e.path)));
        }
    }
    for (s, e) in dataset.samples.iter().zip(&manifest.entries) {
        let path = dir.join(&e.path);
        let parent = path.parent().expect("frame path has a parent");
        fs::create_dir_all(parent).map_err(|err| DataError::io(parent, err))?;
        write_ppm(&path, &s.frame)?;
    }
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&path).map_err(|e| DataError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let header = ManifestHeader {
        version: manifest.version,
        image_width: manifest.image_width,
        image_height: manifest.image_height,
        normalization_stats: manifest.normalization_stats.clone(),
    };
    let io = |e| DataError::io(&path, e);
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
    for e in &manifest.entries {
        writeln!(w, "{}", serde_json::to_string(e).expect("entry serializes")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(|e| DataError::io(&path, e))?;
    let mut lines = BufReader::new(file).lines();
    let fmt = |line: usize, message: String| DataError::Format {
        path: format!("{}:{line}", path.display()),
        message,
    };
    let first = lines
        .next()
        .ok_or_else(|| fmt(1, "empty manifest".into()))?
        .map_err(|e| DataError::io(&path, e))?;
    let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| fmt(1, e.to_string()))?;
    if header.version != MANIFEST_VERSION {
        return Err(DataError::Version { found: header.version, expected: MANIFEST_VERSION });
    }
    let mut entries = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| DataError::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line).map_err(|e| fmt(n + 2, e.to_string()))?);
    }
    Ok(DatasetManifest {
        version: header.version,
        image_width: header.image_width,
        image_height: header.image_height,
        entries,
        normalization_stats: header.normalization_stats,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for e in manifest.entries {
        let path = dir.join(&e.path);
        if !path.is_file() {
            return Err(DataError::Format {
                path: path.display().to_string(),
                message: "frame referenced by manifest is missing".into(),
            });
        }
        let mut frame = read_ppm(&path)?;
        if (frame.width, frame.height) != (manifest.image_width, manifest.image_height) {
            return Err(DataError::Format {
                path: path.display().to_string(),
                message: format!(
                    "frame is {}x{}, manifest says {}x{}",
                    frame.width, frame.height, manifest.image_width, manifest.image_height
                ),
            });
        }
        frame.camera_id = e.camera_id;
        frame.tick = e.tick;
        samples.push(Sample {
            frame: Arc::new(frame),
            steering: e.steering,
            tick: e.tick,
            camera_id: e.camera_id,
            source: e.source,
            run_id: e.run_id,
        });
    }
    Ok(Dataset {
        image_width: manifest.image_width,
        image_height: manifest.image_height,
        samples,
        stats: manifest.normalization_stats,
    })
}
