//! Named tensor archives.
//!
//! Layout: an 8-byte little-endian header length, a JSON header mapping
//! tensor names to `{dtype, shape, data_offsets}` plus a `__metadata__`
//! string map, then the concatenated little-endian payloads. Offsets are
//! relative to the start of the payload. Keys are written in sorted order so
//! identical archives serialize to identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::video::VideoTensor;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl ArchiveTensor {
    pub fn from_matrix(m: &Matrix) -> Self {
        Self { shape: vec![m.rows(), m.cols()], data: TensorData::F64(m.data().to_vec()) }
    }

    pub fn from_video(v: &VideoTensor) -> Self {
        Self {
            shape: vec![v.frames(), v.height(), v.width(), v.channels()],
            data: TensorData::F32(v.data().to_vec()),
        }
    }

    fn dtype(&self) -> &'static str {
        match self.data {
            TensorData::F32(_) => "F32",
            TensorData::F64(_) => "F64",
        }
    }

    fn byte_len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len() * 4,
            TensorData::F64(v) => v.len() * 8,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, ArchiveTensor>,
}

impl TensorArchive {
    pub fn insert(&mut self, name: impl Into<String>, t: ArchiveTensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.tensors.get(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if t.shape.len() != 2 {
            return Err(Error::Format(format!("tensor {name} has rank {}", t.shape.len())));
        }
        let data = match &t.data {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Ok(Matrix::from_vec(t.shape[0], t.shape[1], data))
    }

    pub fn video(&self, name: &str) -> Result<VideoTensor> {
        let t = self.tensors.get(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        let [f, h, w, c] = t.shape[..] else {
            return Err(Error::Format(format!("tensor {name} is not rank 4")));
        };
        let data = match &t.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        };
        VideoTensor::new(f, h, w, c, data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert("__metadata__".into(), serde_json::to_value(&self.metadata)?);
        }
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let n = t.byte_len();
            let e = Entry { dtype: t.dtype().into(), shape: t.shape.clone(), data_offsets: [offset, offset + n] };
            header.insert(name.clone(), serde_json::to_value(e)?);
            offset += n;
        }
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("archive shorter than its header length".into()));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = 8usize.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(&bytes[8..body])?;
        let payload = &bytes[body..];
        let mut archive = Self::default();
        for (name, value) in header {
            if name == "__metadata__" {
                archive.metadata = serde_json::from_value(value)?;
                continue;
            }
            let e: Entry = serde_json::from_value(value)?;
            let [a, b] = e.data_offsets;
            if a > b || b > payload.len() {
                return Err(Error::Format(format!("tensor {name} offsets out of range")));
            }
            let raw = &payload[a..b];
            let count: usize = e.shape.iter().product();
            let data = match e.dtype.as_str() {
                "F32" if raw.len() == count * 4 => {
                    TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
                }
                "F64" if raw.len() == count * 8 => {
                    TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
                }
                other => return Err(Error::Format(format!("tensor {name}: dtype {other} with {} bytes", raw.len()))),
            };
            archive.tensors.insert(name, ArchiveTensor { shape: e.shape, data });
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes a clip as a single-tensor archive named `frames`.
pub fn save_clip(path: impl AsRef<Path>, clip: &VideoTensor, seed: u64) -> Result<()> {
    let mut a = TensorArchive::default();
    a.metadata.insert("source_id".into(), clip.source_id.clone());
    a.metadata.insert("frame_interval".into(), clip.frame_interval.to_string());
    a.metadata.insert("seed".into(), seed.to_string());
    a.insert("frames", ArchiveTensor::from_video(clip));
    a.save(path)
}

pub fn load_clip(path: impl AsRef<Path>) -> Result<VideoTensor> {
    let a = TensorArchive::load(path)?;
    let mut v = a.video("frames")?;
    v.source_id = a.metadata.get("source_id").cloned().unwrap_or_default();
    v.frame_interval = a.metadata.get("frame_interval").and_then(|s| s.parse().ok()).unwrap_or(1);
    Ok(v)
}
