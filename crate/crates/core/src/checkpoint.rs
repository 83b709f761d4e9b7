//! Versioned parameter checkpoints.
//!
//! ```text
//! magic       8 bytes  "RIDVCKPT"
//! version     u32
//! header_len  u64
//! header      JSON: kind, step, dtype, payload (model config), tensors [{name, shape}]
//! tensors     little-endian values in header order (f32 or f64 per dtype)
//! checksum    32 bytes SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RIDVCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    step: u64,
    dtype: String,
    payload: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub payload: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Contract(format!("unsupported parameter dtype {other:?}"))),
    }
}

pub fn write_checkpoint(path: &Path, kind: &str, step: u64, payload: serde_json::Value, store: &ParamStore) -> Result<()> {
    let dtype = dtype_name(store.dtype())?;
    let tensors = store
        .iter()
        .map(|(name, var)| TensorEntry { name: name.clone(), shape: var.dims().to_vec() })
        .collect();
    let header = serde_json::to_vec(&Header { kind: kind.into(), step, dtype: dtype.into(), payload, tensors })?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, var) in store.iter() {
        let flat = var.as_tensor().flatten_all()?;
        match store.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            _ => flat.to_vec1::<f64>()?.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |reason: String| Error::ingestion(path, reason);
    let data = fs::read(path).map_err(|e| bad(e.to_string()))?;
    if data.len() < 20 + 32 || &data[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic or truncated)".into()));
    }
    let version = u32::from_le_bytes(data[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("checkpoint version {version} is not supported (this build reads {CHECKPOINT_VERSION})")));
    }
    let (body, checksum) = data.split_at(data.len() - 32);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(bad("checksum mismatch (truncated or corrupt checkpoint)".into()));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&body[20..header_end]).map_err(|e| bad(format!("bad header: {e}")))?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(bad(format!("unknown dtype {other}"))),
    };
    let mut pos = header_end;
    let mut tensors = BTreeMap::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = pos + n * width;
        if end > body.len() {
            return Err(bad(format!("truncated tensor {}", entry.name)));
        }
        let raw = &body[pos..end];
        let tensor = if width == 4 {
            let v: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            Tensor::from_vec(v, entry.shape, &Device::Cpu)?
        } else {
            let v: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            Tensor::from_vec(v, entry.shape, &Device::Cpu)?
        };
        tensors.insert(entry.name, tensor);
        pos = end;
    }
    if pos != body.len() {
        return Err(bad("trailing bytes after tensors".into()));
    }
    Ok(Checkpoint { kind: header.kind, step: header.step, payload: header.payload, tensors })
}

impl Checkpoint {
    /// Copies the stored tensors into `store`, which must have the same layout.
    pub fn restore_into(&self, store: &ParamStore) -> Result<()> {
        if store.iter().count() != self.tensors.len() {
            return Err(Error::Contract("checkpoint and model hold different parameter sets".into()));
        }
        for (name, var) in store.iter() {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Contract(format!("checkpoint shape mismatch for {name}")));
            }
            var.set(&t.to_dtype(store.dtype())?)?;
        }
        Ok(())
    }
}
