//! Image-folder adapter: `root/<class>/<image>` or `root/{train,test}/<class>/<image>`.
//!
//! Classes are the sorted subdirectory names. Without explicit `train/` and
//! `test/` folders, a seeded 80/20 per-class split is used.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GenericImageView};
use rand::seq::SliceRandom;

use super::LabeledExample;
use crate::error::{Error, Result};
use crate::rng;

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];
const TEST_FRACTION: f64 = 0.2;

pub(super) struct FolderDataset {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub num_classes: usize,
    pub feature_shape: [usize; 3],
    pub class_names: Vec<String>,
}

pub(super) fn read_class_folders(root: &Path, seed: u64) -> Result<FolderDataset> {
    let (train_root, test_root) = (root.join("train"), root.join("test"));
    let (train_files, test_files, class_names) = if train_root.is_dir() && test_root.is_dir() {
        let (train, names) = list_classes(&train_root)?;
        let (test, test_names) = list_classes(&test_root)?;
        if names != test_names {
            return Err(Error::ingestion(root, "train/ and test/ contain different class folders"));
        }
        (train, test, names)
    } else {
        let (all, names) = list_classes(root)?;
        let mut rng = rng::named_rng(seed, "data.folder_split");
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut per_class: Vec<Vec<(PathBuf, usize)>> = vec![Vec::new(); names.len()];
        for (path, label) in all {
            per_class[label].push((path, label));
        }
        for mut files in per_class {
            files.shuffle(&mut rng);
            let n_test = ((files.len() as f64) * TEST_FRACTION).round() as usize;
            test.extend(files.drain(..n_test));
            train.extend(files);
        }
        (train, test, names)
    };

    let grayscale = train_files
        .iter()
        .chain(&test_files)
        .all(|(path, _)| matches!(path_color(path), Ok(true)));
    let mut shape = None;
    let mut decode = |files: Vec<(PathBuf, usize)>, first: u64| -> Result<Vec<LabeledExample>> {
        files
            .into_iter()
            .enumerate()
            .map(|(i, (path, label))| {
                let (features, s) = decode_image(&path, grayscale)?;
                match shape {
                    None => shape = Some(s),
                    Some(expected) if expected != s => {
                        return Err(Error::ingestion(&path, format!("image shape {s:?} differs from {expected:?}")))
                    }
                    _ => {}
                }
                Ok(LabeledExample::clean(first + i as u64, features, label))
            })
            .collect()
    };
    let train = decode(train_files, 0)?;
    let test = decode(test_files, train.len() as u64)?;
    let feature_shape = shape.ok_or_else(|| Error::ingestion(root, "no images found"))?;
    Ok(FolderDataset { train, test, num_classes: class_names.len(), feature_shape, class_names })
}

fn list_classes(root: &Path) -> Result<(Vec<(PathBuf, usize)>, Vec<String>)> {
    let read = |dir: &Path| fs::read_dir(dir).map_err(|e| Error::ingestion(dir, e.to_string()));
    let mut classes: Vec<PathBuf> = read(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::ingestion(root, "no class subdirectories"));
    }
    let mut files = Vec::new();
    let mut names = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        let mut images: Vec<PathBuf> = read(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        images.sort();
        files.extend(images.into_iter().map(|p| (p, label)));
    }
    Ok((files, names))
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::ingestion(path, e.to_string()))
}

fn path_color(path: &Path) -> Result<bool> {
    Ok(matches!(open(path)?.color().channel_count(), 1 | 2))
}

fn decode_image(path: &Path, grayscale: bool) -> Result<(Vec<f32>, [usize; 3])> {
    let img = open(path)?;
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    if grayscale {
        let luma = img.to_luma8();
        Ok((luma.as_raw().iter().map(|&p| f32::from(p) / 255.0).collect(), [1, h, w]))
    } else {
        let rgb = img.to_rgb8();
        let raw = rgb.as_raw();
        let mut chw = vec![0f32; 3 * h * w];
        for (i, px) in raw.chunks_exact(3).enumerate() {
            for c in 0..3 {
                chw[c * h * w + i] = f32::from(px[c]) / 255.0;
            }
        }
        Ok((chw, [3, h, w]))
    }
}
