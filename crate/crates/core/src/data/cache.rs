//! Binary bundle cache.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "RIDVDATA"
//! version      u32
//! meta_len     u64
//! meta         meta_len bytes of JSON: num_classes, feature_shape, noise_spec,
//!              provenance, train_len, test_len
//! for split in [train, test]:
//!     index        u64 x n
//!     noisy_label  u32 x n
//!     clean_label  i32 x n      (-1 when absent)
//! for split in [train, test]:
//!     features     f32 x n*prod(feature_shape)
//! checksum     32 bytes  SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetBundle, LabeledExample, NoiseSpec, Provenance};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"RIDVDATA";
pub const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    num_classes: usize,
    feature_shape: [usize; 3],
    noise_spec: NoiseSpec,
    provenance: Provenance,
    train_len: usize,
    test_len: usize,
}

pub fn save_cache(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    let meta = Meta {
        num_classes: bundle.num_classes,
        feature_shape: bundle.feature_shape,
        noise_spec: bundle.noise_spec,
        provenance: bundle.provenance.clone(),
        train_len: bundle.train.len(),
        test_len: bundle.test.len(),
    };
    let meta = serde_json::to_vec(&meta)?;
    let dim = bundle.feature_dim();
    let n = bundle.train.len() + bundle.test.len();
    let mut buf = Vec::with_capacity(64 + meta.len() + n * (16 + 4 * dim));
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    for split in [&bundle.train, &bundle.test] {
        split.iter().for_each(|e| buf.extend_from_slice(&e.index.to_le_bytes()));
        split.iter().for_each(|e| buf.extend_from_slice(&(e.noisy_label as u32).to_le_bytes()));
        split.iter().for_each(|e| {
            let clean = DatasetBundle::raw_clean_label(e).map_or(-1, |c| c as i32);
            buf.extend_from_slice(&clean.to_le_bytes())
        });
    }
    for split in [&bundle.train, &bundle.test] {
        for e in split.iter() {
            e.features.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
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

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| {
            Error::ingestion(self.path, format!("truncated cache while reading {what}"))
        })?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Loads a cache written by [`save_cache`]. When `expected_classes` is given,
/// a cache for a different label space is rejected as a configuration error.
pub fn load_cache(path: &Path, expected_classes: Option<usize>) -> Result<DatasetBundle> {
    let data = fs::read(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    if data.len() < CACHE_MAGIC.len() + 32 || &data[..CACHE_MAGIC.len()] != CACHE_MAGIC {
        return Err(Error::ingestion(path, "not a bundle cache (bad magic or truncated)"));
    }
    let mut cur = Cursor { data: &data, pos: CACHE_MAGIC.len(), path };
    let version = cur.u32("version")?;
    if version != CACHE_VERSION {
        return Err(Error::ingestion(
            path,
            format!("cache schema version {version} is not supported (this build reads {CACHE_VERSION})"),
        ));
    }
    let (body, checksum) = data.split_at(data.len() - 32);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(Error::ingestion(path, "checksum mismatch (truncated or corrupt cache)"));
    }
    cur.data = body;
    let meta_len = cur.u64("metadata length")? as usize;
    let meta: Meta = serde_json::from_slice(cur.take(meta_len, "metadata")?)
        .map_err(|e| Error::ingestion(path, format!("bad metadata: {e}")))?;
    if let Some(expected) = expected_classes {
        if expected != meta.num_classes {
            return Err(Error::Config(format!(
                "cache {} holds {} classes, {expected} requested",
                path.display(),
                meta.num_classes
            )));
        }
    }
    let dim: usize = meta.feature_shape.iter().product();
    let mut splits = Vec::with_capacity(2);
    for n in [meta.train_len, meta.test_len] {
        let idx = cur.take(8 * n, "indices")?;
        let noisy = cur.take(4 * n, "noisy labels")?;
        let clean = cur.take(4 * n, "clean labels")?;
        let examples: Vec<LabeledExample> = (0..n)
            .map(|i| {
                let index = u64::from_le_bytes(idx[8 * i..8 * i + 8].try_into().unwrap());
                let noisy = u32::from_le_bytes(noisy[4 * i..4 * i + 4].try_into().unwrap()) as usize;
                let clean = i32::from_le_bytes(clean[4 * i..4 * i + 4].try_into().unwrap());
                let clean = (clean >= 0).then_some(clean as usize);
                LabeledExample::with_labels(index, Vec::new(), noisy, clean)
            })
            .collect();
        splits.push(examples);
    }
    for split in splits.iter_mut() {
        for e in split.iter_mut() {
            let raw = cur.take(4 * dim, "features")?;
            e.features = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        }
    }
    if cur.pos != body.len() {
        return Err(Error::ingestion(path, "trailing bytes after feature block"));
    }
    let test = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    DatasetBundle::new(train, test, meta.num_classes, meta.feature_shape, meta.noise_spec, meta.provenance)
        .map_err(|e| Error::ingestion(path, format!("cache violates bundle invariants: {e}")))
}
