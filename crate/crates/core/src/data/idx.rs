//! IDX reader for the MNIST family of datasets (plain or gzip'd files).

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::LabeledExample;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;

/// Reads `train-*` and `t10k-*` files from `dir`. Test example indices start
/// after the last train index.
pub(super) fn read_split_pair(dir: &Path) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    let train = read_split(dir, "train", 0)?;
    let test = read_split(dir, "t10k", train.len() as u64)?;
    Ok((train, test))
}

fn read_split(dir: &Path, prefix: &str, first_index: u64) -> Result<Vec<LabeledExample>> {
    let images_path = locate(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let labels_path = locate(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let (dims, pixels) = read_idx(&images_path, IMAGES_MAGIC, 3)?;
    let (label_dims, labels) = read_idx(&labels_path, LABELS_MAGIC, 1)?;
    if dims[0] != label_dims[0] {
        return Err(Error::ingestion(
            &labels_path,
            format!("{} labels for {} images", label_dims[0], dims[0]),
        ));
    }
    let per_image = dims[1] * dims[2];
    Ok(pixels
        .chunks_exact(per_image)
        .zip(labels)
        .enumerate()
        .map(|(i, (img, label))| {
            let features = img.iter().map(|&p| f32::from(p) / 255.0).collect();
            LabeledExample::clean(first_index + i as u64, features, usize::from(label))
        })
        .collect())
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    for candidate in [dir.join(format!("{stem}.gz")), dir.join(stem)] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::ingestion(dir.join(stem), "file not found (looked for plain and .gz)"))
}

fn read_idx(path: &Path, magic: u32, ndims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    let mut reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(BufReader::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    let mut read_u32 = |what: &str| -> Result<u32> {
        let mut buf = [0u8; 4];
        reader
            .read_exact(&mut buf)
            .map_err(|e| Error::ingestion(path, format!("reading {what}: {e}")))?;
        Ok(u32::from_be_bytes(buf))
    };
    let found = read_u32("magic number")?;
    if found != magic {
        return Err(Error::ingestion(path, format!("bad magic number {found}, expected {magic}")));
    }
    let dims = (0..ndims).map(|_| read_u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let len: usize = dims.iter().product();
    let mut data = vec![0u8; len];
    reader
        .read_exact(&mut data)
        .map_err(|e| Error::ingestion(path, format!("truncated payload ({len} bytes expected): {e}")))?;
    Ok((dims, data))
}
