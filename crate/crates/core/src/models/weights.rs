//! `LCW1` weights files: magic, u16 version, length-prefixed JSON metadata,
//! tensor records, trailing CRC32 over everything before it.

use std::path::Path;

use super::{ModelError, ModelMeta, ModelParams, Result, Variant};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"LCW1";
pub const WEIGHTS_VERSION: u16 = 1;

pub fn encode(params: &ModelParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&params.meta).map_err(|e| ModelError::Contract(e.to_string()))?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in &params.tensors {
        if !t.all_finite() {
            return Err(ModelError::Numerical { step: 0, message: format!("parameter {name} is not finite") });
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn corrupt(path: &str, message: impl Into<String>) -> ModelError {
    ModelError::Corrupt { path: path.to_string(), message: message.into() }
}

pub fn decode(bytes: &[u8], path: &str) -> Result<ModelParams> {
    if bytes.len() < 4 + 2 + 4 + 4 + 4 {
        return Err(corrupt(path, "file too short"));
    }
    if &bytes[..4] != WEIGHTS_MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let mut r = Reader { buf: body, pos: 4, path };
    let version = r.u16()?;
    if version != WEIGHTS_VERSION {
        return Err(corrupt(path, format!("unsupported version {version} (expected {WEIGHTS_VERSION})")));
    }
    if crc32fast::hash(body) != stored {
        return Err(corrupt(path, "checksum mismatch"));
    }
    let meta_len = r.u32()? as usize;
    let meta: ModelMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| corrupt(path, format!("metadata: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| corrupt(path, "tensor name is not UTF-8"))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(corrupt(path, format!("tensor {name} holds non-finite values")));
        }
        if tensors.iter().any(|(m, _)| *m == name) {
            return Err(corrupt(path, format!("duplicate tensor {name}")));
        }
        let t = Tensor::new(shape, data).map_err(|e| corrupt(path, e.to_string()))?;
        tensors.push((name, t));
    }
    if r.pos != body.len() {
        return Err(corrupt(path, "trailing bytes after tensor records"));
    }
    let expected = super::layout(meta.variant, meta.input_shape);
    let names_match = expected.len() == tensors.len()
        && expected.iter().zip(&tensors).all(|((n, s, _), (m, t))| n == m && s.as_slice() == t.shape());
    if !names_match {
        return Err(corrupt(path, format!("tensor layout does not match variant {}", meta.variant)));
    }
    Ok(ModelParams { meta, tensors })
}

pub fn save_weights(params: &ModelParams, path: &Path) -> Result<()> {
    let bytes = encode(params)?;
    std::fs::write(path, bytes).map_err(|e| ModelError::Io { path: path.display().to_string(), source: e })
}

/// Loads a checkpoint, refusing one whose variant differs from `expected`.
pub fn load_weights(path: &Path, expected: Option<Variant>) -> Result<ModelParams> {
    let shown = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| ModelError::Io { path: shown.clone(), source: e })?;
    let params = decode(&bytes, &shown)?;
    if let Some(v) = expected {
        if v != params.meta.variant {
            return Err(ModelError::VariantMismatch { expected: v.to_string(), found: params.meta.variant.to_string() });
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NormStats;
    use crate::models::{OdeConfig, Solver};

    fn params(v: Variant, seed: u64) -> ModelParams {
        let stats = NormStats { mean: [0.4, 0.5, 0.6], std: [0.2, 0.25, 0.3], provenance: "test".into() };
        ModelParams::init(v, Some(OdeConfig::new(Solver::Euler)), stats, seed).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        for v in [Variant::Cnn, Variant::CnnLstm, Variant::CnnNode] {
            let p = params(v, 11);
            let path = dir.path().join(format!("{v}.lcw"));
            save_weights(&p, &path).unwrap();
            let q = load_weights(&path, Some(v)).unwrap();
            assert_eq!(p.meta, q.meta);
            for ((a, x), (b, y)) in p.tensors.iter().zip(&q.tensors) {
                assert_eq!(a, b);
                assert!(x.data().iter().zip(y.data()).all(|(u, w)| u.to_bits() == w.to_bits()));
            }
        }
    }

    #[test]
    fn truncated_and_flipped_files_are_corrupt() {
        let bytes = encode(&params(Variant::Cnn, 1)).unwrap();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut], "x"), Err(ModelError::Corrupt { .. })), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(matches!(decode(&flipped, "x"), Err(ModelError::Corrupt { message, .. }) if message.contains("checksum")));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(decode(&magic, "x"), Err(ModelError::Corrupt { message, .. }) if message.contains("magic")));
    }

    #[test]
    fn variant_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lstm.lcw");
        save_weights(&params(Variant::CnnLstm, 2), &path).unwrap();
        match load_weights(&path, Some(Variant::CnnNode)) {
            Err(ModelError::VariantMismatch { expected, found }) => {
                assert_eq!((expected.as_str(), found.as_str()), ("cnn-node", "cnn-lstm"))
            }
            other => panic!("{other:?}"),
        }
    }
}
