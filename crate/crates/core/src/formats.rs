//! On-disk formats: DWEP episodes, DWCK checkpoints and JSON metric series.
//! All multi-byte values are little-endian.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::pose_codec::Pose;
use crate::world::Raster;

const DWEP_MAGIC: &[u8; 4] = b"DWEP";
const DWCK_MAGIC: &[u8; 4] = b"DWCK";
pub const DWEP_VERSION: u32 = 1;
pub const DWCK_VERSION: u32 = 1;

fn fmt_err(format: &'static str, msg: impl Into<String>) -> Error {
    Error::Format { format, msg: msg.into() }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(fmt_err(self.format, format!("truncated at byte {}", self.pos)));
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

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Frames and poses as stored in a DWEP file.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeData {
    pub poses: Vec<Pose>,
    pub frames: Vec<Raster>,
}

pub fn encode_dwep(poses: &[Pose], frames: &[Raster]) -> Result<Vec<u8>> {
    if poses.len() != frames.len() || frames.is_empty() {
        return Err(fmt_err("DWEP", format!("{} poses for {} frames", poses.len(), frames.len())));
    }
    let (h, w, c) = (frames[0].height, frames[0].width, frames[0].channels);
    if h > u16::MAX as usize || w > u16::MAX as usize || c > u8::MAX as usize {
        return Err(fmt_err("DWEP", "raster dimensions exceed header fields"));
    }
    let mut out = Vec::with_capacity(19 + frames.len() * (12 + h * w * c));
    out.extend_from_slice(DWEP_MAGIC);
    out.extend_from_slice(&DWEP_VERSION.to_le_bytes());
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.push(c as u8);
    for p in poses {
        for v in [p.theta, p.x, p.y] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for f in frames {
        if (f.height, f.width, f.channels) != (h, w, c) || f.pixels.len() != h * w * c {
            return Err(fmt_err("DWEP", "frames differ in shape"));
        }
        out.extend_from_slice(&f.pixels);
    }
    Ok(out)
}

pub fn decode_dwep(bytes: &[u8]) -> Result<EpisodeData> {
    let mut cur = Cursor { buf: bytes, pos: 0, format: "DWEP" };
    if cur.take(4)? != DWEP_MAGIC {
        return Err(fmt_err("DWEP", "bad magic"));
    }
    let version = cur.u32()?;
    if version != DWEP_VERSION {
        return Err(fmt_err("DWEP", format!("unsupported version {version}")));
    }
    let n = cur.u32()? as usize;
    let h = cur.u16()? as usize;
    let w = cur.u16()? as usize;
    let c = cur.u8()? as usize;
    if n == 0 {
        return Err(fmt_err("DWEP", "episode has no frames"));
    }
    let mut poses = Vec::with_capacity(n);
    for _ in 0..n {
        let theta = cur.f32()? as f64;
        let x = cur.f32()? as f64;
        let y = cur.f32()? as f64;
        poses.push(Pose { theta, x, y });
    }
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        frames.push(Raster { height: h, width: w, channels: c, pixels: cur.take(h * w * c)?.to_vec() });
    }
    if !cur.done() {
        return Err(fmt_err("DWEP", "trailing bytes after last frame"));
    }
    Ok(EpisodeData { poses, frames })
}

pub fn write_dwep(path: &Path, poses: &[Pose], frames: &[Raster]) -> Result<()> {
    let bytes = encode_dwep(poses, frames)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_dwep(path: &Path) -> Result<EpisodeData> {
    decode_dwep(&std::fs::read(path)?)
}

/// A DWCK checkpoint: a JSON document plus named f32 tensors, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(config_json: String) -> Self {
        Self { config_json, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Appends every parameter under `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Copies tensors named `prefix + param name` into `store`. Missing
    /// parameters are an error; tensors under `prefix` that the store does not
    /// know are skipped with a warning.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        for id in 0..store.len() {
            let name = format!("{prefix}{}", store.name(id));
            let t = self.get(&name).ok_or_else(|| fmt_err("DWCK", format!("missing tensor {name}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(fmt_err(
                    "DWCK",
                    format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), store.get(id).shape()),
                ));
            }
            store.get_mut(id).data_mut().copy_from_slice(t.data());
        }
        for (name, _) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                if store.id(rest).is_none() {
                    log::warn!("checkpoint tensor {name} is not used by this model; ignoring");
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(DWCK_MAGIC);
        out.extend_from_slice(&DWCK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        for (name, t) in &self.tensors {
            if name.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
                return Err(fmt_err("DWCK", format!("tensor {name} cannot be encoded")));
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
        Ok(out)
    }

    /// Parses a checkpoint. A malformed or truncated trailing section is
    /// dropped with a warning; everything before it is kept.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: bytes, pos: 0, format: "DWCK" };
        if cur.take(4)? != DWCK_MAGIC {
            return Err(fmt_err("DWCK", "bad magic"));
        }
        let version = cur.u32()?;
        if version != DWCK_VERSION {
            return Err(fmt_err("DWCK", format!("unsupported version {version}")));
        }
        let len = cur.u32()? as usize;
        let config_json =
            std::str::from_utf8(cur.take(len)?).map_err(|_| fmt_err("DWCK", "config is not UTF-8"))?.to_string();
        let mut tensors = Vec::new();
        while !cur.done() {
            let start = cur.pos;
            match Self::read_tensor(&mut cur) {
                Ok(entry) => tensors.push(entry),
                Err(e) => {
                    log::warn!("ignoring unreadable checkpoint section at byte {start}: {e}");
                    break;
                }
            }
        }
        Ok(Self { config_json, tensors })
    }

    fn read_tensor(cur: &mut Cursor) -> Result<(String, Tensor<f32>)> {
        let n = cur.u16()? as usize;
        let name =
            std::str::from_utf8(cur.take(n)?).map_err(|_| fmt_err("DWCK", "tensor name is not UTF-8"))?.to_string();
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = cur.take(count.checked_mul(4).ok_or_else(|| fmt_err("DWCK", "tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Ok((name, Tensor::new(shape, data)?))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::decode(&buf)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub step: u64,
    pub value: f64,
    /// Seconds since the run started.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall: Option<f64>,
}

/// Named scalar series; step indices are strictly increasing per series.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub series: BTreeMap<String, Vec<MetricPoint>>,
}

impl MetricsRecord {
    pub fn push(&mut self, name: &str, step: u64, value: f64, wall: Option<f64>) -> Result<()> {
        let s = self.series.entry(name.to_string()).or_default();
        if let Some(last) = s.last() {
            if step <= last.step {
                return Err(Error::OutOfRange(format!("metric {name}: step {step} does not follow {}", last.step)));
            }
        }
        s.push(MetricPoint { step, value, wall });
        Ok(())
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.series.get(name).and_then(|s| s.last()).map(|p| p.value)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        for (name, pts) in &m.series {
            if pts.windows(2).any(|w| w[1].step <= w[0].step) {
                return Err(Error::OutOfRange(format!("metric {name}: steps not increasing")));
            }
        }
        Ok(m)
    }
}
