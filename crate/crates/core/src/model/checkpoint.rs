//! Single-file checkpoint: the 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then every tensor as little-endian `f64`.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{DetectorConfig, Detector};
use crate::error::{Error, IoContext, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TANCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EntryKind {
    Param,
    RunningMean,
    RunningVar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: DetectorConfig,
    /// Free-form run information (epoch, validation score, seed...).
    pub meta: serde_json::Value,
    tensors: Vec<Entry>,
}

pub fn save_checkpoint(model: &Detector, meta: serde_json::Value, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut data: Vec<f64> = Vec::new();
    let mut tensors = Vec::new();
    for p in model.params() {
        tensors.push(Entry {
            name: p.name.clone(),
            kind: EntryKind::Param,
            shape: p.var.dims().to_vec(),
            offset: data.len(),
        });
        data.extend(p.var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
    }
    for b in model.buffers() {
        let s = b.stats.lock().expect("stats lock").clone();
        for (kind, v) in [(EntryKind::RunningMean, s.mean), (EntryKind::RunningVar, s.var)] {
            tensors.push(Entry {
                name: b.name.clone(),
                kind,
                shape: vec![v.len()],
                offset: data.len(),
            });
            data.extend(v);
        }
    }
    let header = CheckpointHeader {
        config: model.config().clone(),
        meta,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + 8 * data.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).ctx(|| format!("writing {}", path.display()))
}

pub fn load_checkpoint(path: impl AsRef<Path>, dtype: DType) -> Result<(Detector, CheckpointHeader)> {
    let path = path.as_ref();
    let bytes = fs::read(path).ctx(|| format!("reading {}", path.display()))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body])?;
    let raw = &bytes[body..];
    if raw.len() % 8 != 0 {
        return Err(Error::Checkpoint("tensor data not a whole number of f64".into()));
    }
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let slice = |e: &Entry| -> Result<Vec<f64>> {
        let n: usize = e.shape.iter().product();
        data.get(e.offset..e.offset + n)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} out of bounds", e.name)))
    };

    let model = Detector::new(header.config.clone(), dtype, 0)?;
    let find = |name: &str, kind: EntryKind| {
        header
            .tensors
            .iter()
            .find(|e| e.name == name && e.kind == kind)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };
    for p in model.params() {
        let e = find(&p.name, EntryKind::Param)?;
        if e.shape != p.var.dims() {
            return Err(Error::Checkpoint(format!("shape of {} is {:?}, expected {:?}", p.name, e.shape, p.var.dims())));
        }
        let t = Tensor::from_vec(slice(e)?, e.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?;
        p.var.set(&t)?;
    }
    for b in model.buffers() {
        let mean = slice(find(&b.name, EntryKind::RunningMean)?)?;
        let var = slice(find(&b.name, EntryKind::RunningVar)?)?;
        let mut s = b.stats.lock().expect("stats lock");
        if mean.len() != s.mean.len() || var.len() != s.var.len() {
            return Err(Error::Checkpoint(format!("statistics of {} have the wrong length", b.name)));
        }
        s.mean = mean;
        s.var = var;
    }
    Ok((model, header))
}
