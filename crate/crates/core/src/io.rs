//! On-disk formats: sessions, checkpoints and JSON artifacts.
//!
//! Session file, little-endian throughout:
//!
//! ```text
//! magic "GZSN" | version u16 | id str | height u32 | width u32 | channels u32
//! | frames u64 | metadata count u32 | (key str, value str)*
//! | per frame: x f64 | y f64 | valid u8 | label u8 | grid
//! grid = 0u8, C·H·W f32                 (inline)
//!      | 1u8, u64 index of an earlier frame with identical content
//! str  = u32 byte length, UTF-8 bytes
//! ```
//!
//! Checkpoint file:
//!
//! ```text
//! magic "GZCK" | version u16 | header JSON str | parameter count u32
//! | per parameter: name str | rank u32 | dims u64* | values f64*
//! | sha256 of everything before it
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::heatmap::{GazePoint, GazeTrajectory};
use crate::model::{CompletionModel, ModelConfig, ModelError};
use crate::pipeline::SessionRecord;
use crate::tensor::Tensor;

pub const SESSION_MAGIC: &[u8; 4] = b"GZSN";
pub const SESSION_VERSION: u16 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GZCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a {kind} file (bad magic)")]
    BadMagic { kind: &'static str },
    #[error("unsupported {kind} format version {found}, expected {expected}")]
    Version { kind: &'static str, found: u16, expected: u16 },
    #[error("file truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("inconsistent file: {0}")]
    Inconsistent(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint config does not match the runtime config: {0}")]
    ConfigMismatch(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a sibling temporary file and a rename, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                offset: self.bytes.len(),
                needed: n - self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| FormatError::Corrupt(format!("invalid UTF-8 string at byte {at}")))
    }

    fn header(&mut self, magic: &[u8; 4], version: u16, kind: &'static str) -> Result<()> {
        if self.take(4)? != magic {
            return Err(FormatError::BadMagic { kind });
        }
        let found = self.u16()?;
        if found != version {
            return Err(FormatError::Version {
                kind,
                found,
                expected: version,
            });
        }
        Ok(())
    }
}

fn grid_bytes(grid: &[f32]) -> Vec<u8> {
    grid.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn encode_session(s: &SessionRecord) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(SESSION_MAGIC);
    w.u16(SESSION_VERSION);
    w.str(&s.session_id);
    w.u32(s.height as u32);
    w.u32(s.width as u32);
    w.u32(s.channels as u32);
    w.u64(s.frames.len() as u64);
    w.u32(s.metadata.len() as u32);
    for (k, v) in &s.metadata {
        w.str(k);
        w.str(v);
    }
    let mut seen: HashMap<Vec<u8>, u64> = HashMap::new();
    for (t, grid) in s.frames.iter().enumerate() {
        let p = s.gaze.points.get(t).copied().unwrap_or_else(GazePoint::missing);
        w.f64(p.x);
        w.f64(p.y);
        w.u8(u8::from(p.valid));
        w.u8(u8::from(s.labels.get(t).copied().unwrap_or(false)));
        let bytes = grid_bytes(grid);
        match seen.get(&bytes) {
            Some(&earlier) => {
                w.u8(1);
                w.u64(earlier);
            }
            None => {
                w.u8(0);
                w.buf.extend_from_slice(&bytes);
                seen.insert(bytes, t as u64);
            }
        }
    }
    w.buf
}

pub fn decode_session(bytes: &[u8]) -> Result<SessionRecord> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(SESSION_MAGIC, SESSION_VERSION, "session")?;
    let session_id = r.str()?;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let count = r.u64()? as usize;
    let meta_count = r.u32()? as usize;
    let mut metadata = BTreeMap::new();
    for _ in 0..meta_count {
        let k = r.str()?;
        let v = r.str()?;
        metadata.insert(k, v);
    }
    let per_frame = channels * height * width;
    let mut frames: Vec<Arc<[f32]>> = Vec::with_capacity(count.min(1 << 20));
    let mut points = Vec::with_capacity(count.min(1 << 20));
    let mut labels = Vec::with_capacity(count.min(1 << 20));
    for t in 0..count {
        if r.remaining() == 0 {
            return Err(FormatError::Inconsistent(format!(
                "header declares {count} frames, file holds {t}"
            )));
        }
        let x = r.f64()?;
        let y = r.f64()?;
        let valid = r.u8()? != 0;
        let label = r.u8()? != 0;
        let at = r.pos;
        let grid: Arc<[f32]> = match r.u8()? {
            0 => r
                .take(per_frame * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect::<Vec<f32>>()
                .into(),
            1 => {
                let earlier = r.u64()? as usize;
                if earlier >= t {
                    return Err(FormatError::Corrupt(format!(
                        "frame {t} references frame {earlier}, which does not precede it"
                    )));
                }
                frames[earlier].clone()
            }
            tag => return Err(FormatError::Corrupt(format!("unknown grid tag {tag} at byte {at}"))),
        };
        frames.push(grid);
        points.push(GazePoint { x, y, valid });
        labels.push(label);
    }
    if r.remaining() != 0 {
        return Err(FormatError::Inconsistent(format!(
            "header declares {count} frames, {} bytes remain after them",
            r.remaining()
        )));
    }
    Ok(SessionRecord {
        session_id,
        height,
        width,
        channels,
        frames,
        gaze: GazeTrajectory::new(points, 0),
        labels,
        metadata,
    })
}

pub fn write_session(path: &Path, s: &SessionRecord) -> Result<()> {
    write_atomic(path, &encode_session(s))
}

pub fn read_session(path: &Path) -> Result<SessionRecord> {
    decode_session(&read_file(path)?)
}

/// Line-oriented dump for debugging; grids are printed once and referenced
/// afterwards.
pub fn session_to_text(s: &SessionRecord) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "session {}", s.session_id);
    let _ = writeln!(out, "grid {} {} {}", s.channels, s.height, s.width);
    for (k, v) in &s.metadata {
        let _ = writeln!(out, "meta {k}={v}");
    }
    let mut seen: HashMap<Vec<u8>, usize> = HashMap::new();
    for (t, grid) in s.frames.iter().enumerate() {
        let p = s.gaze.points[t];
        let gaze = if p.valid {
            format!("{:.6} {:.6}", p.x, p.y)
        } else {
            "- -".to_string()
        };
        let bytes = grid_bytes(grid);
        let grid_text = match seen.get(&bytes) {
            Some(e) => format!("ref {e}"),
            None => {
                seen.insert(bytes, t);
                let vals: Vec<String> = grid.iter().map(|v| format!("{v}")).collect();
                format!("inline {}", vals.join(","))
            }
        };
        let _ = writeln!(out, "frame {t} {gaze} label={} {grid_text}", u8::from(s.labels[t]));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub tool_version: String,
    pub model: ModelConfig,
    /// Full run configuration that produced the checkpoint, when known.
    pub run: Option<serde_json::Value>,
}

pub fn encode_checkpoint(model: &CompletionModel, run: Option<serde_json::Value>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        tool_version: crate::VERSION.to_string(),
        model: model.config().clone(),
        run,
    };
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.str(&serde_json::to_string(&header)?);
    w.u32(model.params().len() as u32);
    for p in model.params() {
        w.str(&p.name);
        w.u32(p.value.rank() as u32);
        for &d in p.value.shape() {
            w.u64(d as u64);
        }
        for &v in p.value.data() {
            w.f64(v);
        }
    }
    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    Ok(w.buf)
}

/// Field-level differences between two model configs.
pub fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (Ok(serde_json::Value::Object(x)), Ok(serde_json::Value::Object(y))) =
        (serde_json::to_value(a), serde_json::to_value(b))
    else {
        return vec!["unserialisable config".into()];
    };
    x.iter()
        .filter(|(k, v)| y.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: checkpoint {v}, runtime {}", y.get(k).map_or("-".into(), |w| w.to_string())))
        .collect()
}

/// Parses a checkpoint. With `expected`, any config difference is an error.
pub fn decode_checkpoint(
    bytes: &[u8],
    expected: Option<&ModelConfig>,
) -> Result<(CompletionModel, CheckpointHeader)> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
    if bytes.len() < r.pos + 32 {
        return Err(FormatError::Truncated {
            offset: bytes.len(),
            needed: r.pos + 32 - bytes.len(),
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(FormatError::Checksum);
    }
    let mut r = Reader { bytes: body, pos: r.pos };
    let header: CheckpointHeader = serde_json::from_str(&r.str()?)?;
    if let Some(exp) = expected {
        let diff = config_diff(&header.model, exp);
        if !diff.is_empty() {
            return Err(FormatError::ConfigMismatch(diff.join("; ")));
        }
    }
    let count = r.u32()? as usize;
    let mut values = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
        let t = Tensor::new(shape, data).map_err(|e| FormatError::Corrupt(format!("parameter `{name}`: {e}")))?;
        values.push((name, t));
    }
    if r.remaining() != 0 {
        return Err(FormatError::Inconsistent(format!("{} unread bytes before the checksum", r.remaining())));
    }
    let model = CompletionModel::from_parameters(header.model.clone(), values)?;
    Ok((model, header))
}

pub fn save_checkpoint(path: &Path, model: &CompletionModel, run: Option<serde_json::Value>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, run)?)
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(CompletionModel, CheckpointHeader)> {
    decode_checkpoint(&read_file(path)?, expected)
}

/// JSON artifact wrapper: every output carries the tool version and the
/// configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<C, T> {
    pub tool_version: String,
    pub config: C,
    pub data: T,
}

impl<C, T> Artifact<C, T> {
    pub fn new(config: C, data: T) -> Self {
        Self {
            tool_version: crate::VERSION.to_string(),
            config,
            data,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SessionRecord {
        let a: Arc<[f32]> = vec![0.25f32, -1.0, 3.5, 0.0].into();
        let b: Arc<[f32]> = vec![1.0f32, 2.0, 3.0, 4.0].into();
        SessionRecord {
            session_id: "demo".into(),
            height: 2,
            width: 2,
            channels: 1,
            frames: vec![a.clone(), b, a],
            gaze: GazeTrajectory::new(vec![GazePoint::new(0.1, 0.2), GazePoint::missing(), GazePoint::new(1.0, 0.0)], 0),
            labels: vec![false, true, false],
            metadata: BTreeMap::from([("difficulty".to_string(), "2.5".to_string())]),
        }
    }

    #[test]
    fn session_roundtrip() {
        let s = sample();
        let bytes = encode_session(&s);
        let back = decode_session(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_session(&back), bytes);
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode_session(&sample());
        bytes[4] = 9;
        assert!(matches!(
            decode_session(&bytes),
            Err(FormatError::Version { found: 9, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(decode_session(&bytes), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = encode_session(&sample());
        let cut = &bytes[..bytes.len() - 3];
        match decode_session(cut) {
            Err(FormatError::Truncated { offset, .. }) => assert_eq!(offset, cut.len()),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn text_export_lists_frames() {
        let text = session_to_text(&sample());
        assert!(text.contains("frame 1 - - label=1 inline 1,2,3,4"));
        assert!(text.contains("frame 2 1.000000 0.000000 label=0 ref 0"));
    }
}
