//! Binary checkpoint format shared by teachers, projections and students.
//!
//! Layout (little-endian):
//!
//! ```text
//! "LRCK" | version u32 | kind u32 | config_len u64 | config JSON (sorted keys)
//! tensor_count u64
//! per tensor: name_len u32 | name | dtype u8 | ndim u32 | dims u64… | offset u64 | nbytes u64
//! payload (offsets are relative to its start)
//! FNV-1a 64 of everything above, u64
//! ```

use std::fmt;
use std::path::Path;

use serde_json::Value;

use crate::error::{LrcError, Result};
use crate::model::{ModelConfig, WeightSet};
use crate::projection::{Provenance, StudentCheckpoint};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: [u8; 4] = *b"LRCK";
pub const VERSION: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Streaming FNV-1a, 64-bit.
#[derive(Debug, Clone, Copy)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64(FNV_OFFSET)
    }
}

impl Fnv64 {
    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv64::default();
    h.update(bytes);
    h.finish()
}

/// Content hash over names, shapes, dtypes and values.
pub fn tensors_hash<'a, T: Real>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> u64 {
    let mut h = Fnv64::default();
    let mut buf = Vec::new();
    for (name, t) in tensors {
        h.update(&(name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update(&[T::DTYPE.code()]);
        for &d in t.shape() {
            h.update(&(d as u64).to_le_bytes());
        }
        buf.clear();
        for &x in t.data() {
            x.write_le(&mut buf);
        }
        h.update(&buf);
    }
    h.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Teacher,
    Projection,
    Student,
}

impl CheckpointKind {
    pub fn code(self) -> u32 {
        match self {
            CheckpointKind::Teacher => 0,
            CheckpointKind::Projection => 1,
            CheckpointKind::Student => 2,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(CheckpointKind::Teacher),
            1 => Some(CheckpointKind::Projection),
            2 => Some(CheckpointKind::Student),
            _ => None,
        }
    }
}

impl fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckpointKind::Teacher => "teacher",
            CheckpointKind::Projection => "projection",
            CheckpointKind::Student => "student",
        })
    }
}

/// A stored tensor in whichever precision it was written.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn to_real<T: Real>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: Value,
    pub tensors: Vec<(String, StoredTensor)>,
}

impl Checkpoint {
    pub fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(LrcError::Kind {
                expected: kind.to_string(),
                found: self.kind.to_string(),
            });
        }
        Ok(())
    }

    pub fn tensors_as<T: Real>(&self) -> Vec<(String, Tensor<T>)> {
        self.tensors.iter().map(|(n, t)| (n.clone(), t.to_real())).collect()
    }

    pub fn dtype(&self) -> Option<DType> {
        self.tensors.first().map(|(_, t)| t.dtype())
    }
}

/// Serializes a checkpoint. Identical inputs give identical bytes.
pub fn encode_checkpoint<T: Real>(kind: CheckpointKind, config: &Value, tensors: &[(&str, &Tensor<T>)]) -> Vec<u8> {
    let cfg = serde_json::to_vec(config).expect("json values always serialize");
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&kind.code().to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in tensors {
        let nbytes = (t.numel() * T::DTYPE.size()) as u64;
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&nbytes.to_le_bytes());
        offset += nbytes;
    }
    for (_, t) in tensors {
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(LrcError::Format {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos as u64;
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or(LrcError::Format {
                offset: at,
                detail: format!("{what} {v} exceeds file size"),
            })
    }
}

fn format_err(offset: usize, detail: impl Into<String>) -> LrcError {
    LrcError::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

/// Parses and validates a checkpoint image.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 {
        return Err(format_err(0, "file shorter than magic"));
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(LrcError::Magic { expected: MAGIC, found });
    }
    if bytes.len() < 12 {
        return Err(format_err(4, "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(LrcError::Version(version));
    }
    if bytes.len() < 20 {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(LrcError::Checksum { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 8 };
    let kind_code = r.u32("kind")?;
    let kind = CheckpointKind::from_code(kind_code).ok_or_else(|| LrcError::Kind {
        expected: "teacher, projection or student".into(),
        found: format!("code {kind_code}"),
    })?;
    let cfg_len = r.len("config length")?;
    let cfg_at = r.pos;
    let config: Value = serde_json::from_slice(r.take(cfg_len, "config")?)
        .map_err(|e| format_err(cfg_at, format!("config is not JSON: {e}")))?;
    let count = r.len("tensor count")?;
    let mut dir = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| format_err(name_at, "tensor name is not UTF-8"))?
            .to_string();
        let dtype_at = r.pos;
        let dtype = DType::from_code(r.u8("dtype")?)
            .ok_or_else(|| format_err(dtype_at, format!("unknown dtype for {name}")))?;
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.len("dimension")?);
        }
        let offset = r.len("offset")?;
        let nbytes = r.len("byte count")?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format_err(dtype_at, format!("{name} shape overflows")))?;
        if numel.checked_mul(dtype.size()) != Some(nbytes) {
            return Err(format_err(dtype_at, format!("{name}: {nbytes} bytes for shape {shape:?}")));
        }
        dir.push((name, dtype, shape, offset, nbytes));
    }
    let payload_start = r.pos;
    let payload = &body[payload_start..];
    let mut expected_offset = 0usize;
    let mut tensors = Vec::with_capacity(dir.len());
    for (name, dtype, shape, offset, nbytes) in dir {
        if offset != expected_offset || offset + nbytes > payload.len() {
            return Err(format_err(
                payload_start + offset,
                format!("{name}: directory entry out of bounds or overlapping"),
            ));
        }
        let raw = &payload[offset..offset + nbytes];
        expected_offset += nbytes;
        let t = match dtype {
            DType::F32 => StoredTensor::F32(Tensor::new(
                shape,
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect(),
            )?),
            DType::F64 => StoredTensor::F64(Tensor::new(
                shape,
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
            )?),
        };
        tensors.push((name, t));
    }
    if expected_offset != payload.len() {
        return Err(format_err(payload_start + expected_offset, "trailing bytes after payload"));
    }
    Ok(Checkpoint { kind, config, tensors })
}

pub fn write_checkpoint<T: Real>(
    path: &Path,
    kind: CheckpointKind,
    config: &Value,
    tensors: &[(&str, &Tensor<T>)],
) -> Result<()> {
    let bytes = encode_checkpoint(kind, config, tensors);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| LrcError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| LrcError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| LrcError::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn model_from_config(config: &Value) -> Result<ModelConfig> {
    let m = config
        .get("model")
        .ok_or_else(|| LrcError::Input("checkpoint config has no model section".into()))?;
    let cfg: ModelConfig =
        serde_json::from_value(m.clone()).map_err(|e| LrcError::Input(format!("bad model config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn named_refs<T: Real>(w: &WeightSet<T>) -> Vec<(String, std::sync::Arc<Tensor<T>>)> {
    w.named_tensors()
}

pub fn save_teacher<T: Real>(path: &Path, cfg: &ModelConfig, weights: &WeightSet<T>) -> Result<()> {
    let named = named_refs(weights);
    let refs: Vec<(&str, &Tensor<T>)> = named.iter().map(|(n, t)| (n.as_str(), &**t)).collect();
    write_checkpoint(path, CheckpointKind::Teacher, &serde_json::json!({ "model": cfg }), &refs)
}

pub fn load_teacher<T: Real>(path: &Path) -> Result<(ModelConfig, WeightSet<T>)> {
    let ck = read_checkpoint(path)?;
    ck.expect_kind(CheckpointKind::Teacher)?;
    let cfg = model_from_config(&ck.config)?;
    let w = WeightSet::from_named(&cfg, ck.tensors_as())?;
    Ok((cfg, w))
}

pub fn save_student<T: Real>(path: &Path, student: &StudentCheckpoint<T>) -> Result<()> {
    let named = named_refs(&student.weights);
    let refs: Vec<(&str, &Tensor<T>)> = named.iter().map(|(n, t)| (n.as_str(), &**t)).collect();
    let config = serde_json::json!({ "model": student.config, "provenance": student.provenance });
    write_checkpoint(path, CheckpointKind::Student, &config, &refs)
}

pub fn load_student<T: Real>(path: &Path) -> Result<StudentCheckpoint<T>> {
    let ck = read_checkpoint(path)?;
    ck.expect_kind(CheckpointKind::Student)?;
    let config = model_from_config(&ck.config)?;
    let provenance: Provenance = serde_json::from_value(ck.config.get("provenance").cloned().unwrap_or(Value::Null))
        .map_err(|e| LrcError::Input(format!("bad provenance: {e}")))?;
    let weights = WeightSet::from_named(&config, ck.tensors_as())?;
    Ok(StudentCheckpoint {
        config,
        weights,
        provenance,
    })
}

/// Any model-shaped checkpoint (teacher or student) as plain weights.
pub fn load_model<T: Real>(path: &Path) -> Result<(CheckpointKind, ModelConfig, WeightSet<T>)> {
    let ck = read_checkpoint(path)?;
    if ck.kind == CheckpointKind::Projection {
        return Err(LrcError::Kind {
            expected: "teacher or student".into(),
            found: ck.kind.to_string(),
        });
    }
    let cfg = model_from_config(&ck.config)?;
    let w = WeightSet::from_named(&cfg, ck.tensors_as())?;
    Ok((ck.kind, cfg, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::preset("tiny-debug").unwrap()
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let w = WeightSet::<f32>::random(&tiny(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.lrck");
        save_teacher(&p, &tiny(), &w).unwrap();
        let (cfg, back) = load_teacher::<f32>(&p).unwrap();
        assert_eq!(cfg, tiny());
        assert!(back.is_tied());
        for ((n1, a), (n2, b)) in w.named_tensors().iter().zip(back.named_tensors().iter()) {
            assert_eq!(n1, n2);
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn bytes_are_deterministic_and_size_is_predicted() {
        let cfg = tiny();
        let w = WeightSet::<f32>::random(&cfg, 9).unwrap();
        let named = w.named_tensors();
        let refs: Vec<(&str, &Tensor<f32>)> = named.iter().map(|(n, t)| (n.as_str(), &**t)).collect();
        let config = serde_json::json!({ "model": cfg });
        let a = encode_checkpoint(CheckpointKind::Teacher, &config, &refs);
        let b = encode_checkpoint(CheckpointKind::Teacher, &config, &refs);
        assert_eq!(a, b);

        let cfg_len = serde_json::to_string(&config).unwrap().len();
        let mut header = 4 + 4 + 4 + 8 + cfg_len + 8;
        let mut payload = 0;
        for (name, shape) in cfg.tensor_shapes() {
            header += 4 + name.len() + 1 + 4 + 8 * shape.len() + 8 + 8;
            payload += 4 * shape.iter().product::<usize>();
        }
        assert_eq!(payload, 4 * cfg.num_parameters());
        assert_eq!(a.len(), header + payload + 8);
    }

    #[test]
    fn config_keys_are_sorted() {
        let text = serde_json::to_string(&serde_json::json!({ "model": tiny() })).unwrap();
        let pos = |k: &str| text.find(&format!("\"{k}\"")).unwrap();
        assert!(pos("ffn_size") < pos("head_dim") && pos("head_dim") < pos("vocab_size"));
    }

    #[test]
    fn corruption_is_detected() {
        let t = Tensor::<f32>::from_fn(&[3, 4], |i| i as f32);
        let good = encode_checkpoint(CheckpointKind::Projection, &serde_json::json!({}), &[("x", &t)]);
        assert!(decode_checkpoint(&good).is_ok());

        let mut flipped = good.clone();
        let at = good.len() - 8 - 5;
        flipped[at] ^= 0x10;
        assert!(matches!(decode_checkpoint(&flipped), Err(LrcError::Checksum { .. })));

        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&magic), Err(LrcError::Magic { .. })));

        let mut version = good.clone();
        version[4] = 9;
        assert!(matches!(decode_checkpoint(&version), Err(LrcError::Version(9))));

        assert!(matches!(decode_checkpoint(&good[..good.len() - 3]), Err(LrcError::Checksum { .. })));

        let ck = decode_checkpoint(&good).unwrap();
        assert!(matches!(ck.expect_kind(CheckpointKind::Teacher), Err(LrcError::Kind { .. })));
    }

    #[test]
    fn f64_payload_round_trips() {
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| (i as f64).sqrt() * 1e-300);
        let bytes = encode_checkpoint(CheckpointKind::Student, &serde_json::json!({"a": 1}), &[("w", &t)]);
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.dtype(), Some(DType::F64));
        assert!(ck.tensors_as::<f64>()[0].1.bit_eq(&t));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_checkpoint(Path::new("/nonexistent/x.lrck")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.lrck"));
    }
}
