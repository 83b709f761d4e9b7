//! Dataset ingestion, stratified subsetting, noisy-label attachment and caching.
//!
//! Clean labels travel with every example but can only be read through an
//! [`EvalAccess`] handle obtained from the owning [`DatasetBundle`]. Trainers
//! receive a [`TrainingView`], which exposes features and noisy labels only.

mod cache;
mod folder;
mod idx;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scm::{self, ScmConfig};

pub use cache::{load_cache, save_cache, CACHE_MAGIC, CACHE_VERSION};

/// Environment variable naming the root directory that holds raw datasets.
pub const DATA_ROOT_ENV: &str = "REIDVAE_DATA";

pub type Provenance = BTreeMap<String, serde_json::Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    None,
    Symmetric,
    Idn,
    External,
}

impl NoiseFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseFamily::None => "none",
            NoiseFamily::Symmetric => "symmetric",
            NoiseFamily::Idn => "idn",
            NoiseFamily::External => "external",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec { family: NoiseFamily::None, rate: 0.0, seed: 0 }
    }

    pub fn new(family: NoiseFamily, rate: f64, seed: u64) -> Result<Self> {
        let spec = NoiseSpec { family, rate, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::Config(format!("noise.rate must lie in [0, 1), got {}", self.rate)));
        }
        let is_none = self.family == NoiseFamily::None;
        if is_none != (self.rate == 0.0) {
            return Err(Error::Config(format!(
                "noise.rate must be 0 exactly when noise.family is none (family {}, rate {})",
                self.family.as_str(),
                self.rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub index: u64,
    /// Channel-major `(channels, height, width)` values in `[0, 1]`.
    pub features: Vec<f32>,
    pub noisy_label: usize,
    clean_label: Option<usize>,
}

impl LabeledExample {
    /// An example whose observed label is known to be clean.
    pub fn clean(index: u64, features: Vec<f32>, label: usize) -> Self {
        LabeledExample { index, features, noisy_label: label, clean_label: Some(label) }
    }

    pub fn with_labels(index: u64, features: Vec<f32>, noisy_label: usize, clean_label: Option<usize>) -> Self {
        LabeledExample { index, features, noisy_label, clean_label }
    }

    pub fn has_clean_label(&self) -> bool {
        self.clean_label.is_some()
    }
}

/// Evaluation-only handle on clean labels. Every read is counted on the
/// owning bundle so leakage into training code is observable.
pub struct EvalAccess<'a> {
    reads: &'a AtomicU64,
}

impl EvalAccess<'_> {
    pub fn clean_label(&self, example: &LabeledExample) -> Option<usize> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        example.clean_label
    }

    pub fn clean_labels(&self, examples: &[LabeledExample]) -> Vec<Option<usize>> {
        examples.iter().map(|e| self.clean_label(e)).collect()
    }
}

/// Read-only view of a training split without any path to clean labels.
#[derive(Clone, Copy)]
pub struct TrainingView<'a> {
    examples: &'a [LabeledExample],
    num_classes: usize,
    feature_shape: [usize; 3],
    noise_spec: NoiseSpec,
}

impl<'a> TrainingView<'a> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn features(&self, i: usize) -> &'a [f32] {
        &self.examples[i].features
    }

    pub fn noisy_label(&self, i: usize) -> usize {
        self.examples[i].noisy_label
    }

    pub fn index(&self, i: usize) -> u64 {
        self.examples[i].index
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        self.feature_shape
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        self.noise_spec
    }
}

#[derive(Debug)]
pub struct DatasetBundle {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub num_classes: usize,
    pub feature_shape: [usize; 3],
    pub noise_spec: NoiseSpec,
    pub provenance: Provenance,
    clean_reads: AtomicU64,
}

impl Clone for DatasetBundle {
    fn clone(&self) -> Self {
        DatasetBundle {
            train: self.train.clone(),
            test: self.test.clone(),
            num_classes: self.num_classes,
            feature_shape: self.feature_shape,
            noise_spec: self.noise_spec,
            provenance: self.provenance.clone(),
            clean_reads: AtomicU64::new(0),
        }
    }
}

impl PartialEq for DatasetBundle {
    fn eq(&self, other: &Self) -> bool {
        self.train == other.train
            && self.test == other.test
            && self.num_classes == other.num_classes
            && self.feature_shape == other.feature_shape
            && self.noise_spec == other.noise_spec
            && self.provenance == other.provenance
    }
}

impl DatasetBundle {
    /// Builds a bundle after checking every structural invariant.
    pub fn new(
        train: Vec<LabeledExample>,
        test: Vec<LabeledExample>,
        num_classes: usize,
        feature_shape: [usize; 3],
        noise_spec: NoiseSpec,
        provenance: Provenance,
    ) -> Result<Self> {
        let bundle = DatasetBundle {
            train,
            test,
            num_classes,
            feature_shape,
            noise_spec,
            provenance,
            clean_reads: AtomicU64::new(0),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.feature_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("feature_shape must be positive, got {:?}", self.feature_shape)));
        }
        self.noise_spec.validate()?;
        let dim = self.feature_dim();
        let mut seen = HashSet::with_capacity(self.train.len() + self.test.len());
        for (split, examples) in [("train", &self.train), ("test", &self.test)] {
            for ex in examples.iter() {
                if !seen.insert(ex.index) {
                    return Err(Error::Contract(format!("duplicate example index {}", ex.index)));
                }
                if ex.features.len() != dim {
                    return Err(Error::Contract(format!(
                        "{split} example {} has {} features, expected {dim}",
                        ex.index,
                        ex.features.len()
                    )));
                }
                if ex.features.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Contract(format!("{split} example {} has non-finite features", ex.index)));
                }
                let labels = std::iter::once(ex.noisy_label).chain(ex.clean_label);
                if labels.into_iter().any(|l| l >= self.num_classes) {
                    return Err(Error::Contract(format!(
                        "{split} example {} has a label outside 0..{}",
                        ex.index, self.num_classes
                    )));
                }
            }
        }
        for ex in &self.test {
            if ex.clean_label != Some(ex.noisy_label) {
                return Err(Error::Contract(format!(
                    "test example {} must carry a clean label equal to its observed label",
                    ex.index
                )));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn eval_access(&self) -> EvalAccess<'_> {
        EvalAccess { reads: &self.clean_reads }
    }

    /// Number of clean-label reads made through [`DatasetBundle::eval_access`].
    pub fn clean_label_reads(&self) -> u64 {
        self.clean_reads.load(Ordering::Relaxed)
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            examples: &self.train,
            num_classes: self.num_classes,
            feature_shape: self.feature_shape,
            noise_spec: self.noise_spec,
        }
    }

    pub(crate) fn raw_clean_label(example: &LabeledExample) -> Option<usize> {
        example.clean_label
    }
}

/// Maps a clean label to an observed (possibly corrupted) label. Must be pure:
/// any randomness is keyed by the flipper's own seed and the example index.
pub trait LabelFlipper: Sync {
    fn flip(&self, features: &[f32], clean_label: usize, index: u64) -> Result<usize>;
}

pub struct IdentityFlipper;

impl LabelFlipper for IdentityFlipper {
    fn flip(&self, _features: &[f32], clean_label: usize, _index: u64) -> Result<usize> {
        Ok(clean_label)
    }
}

/// Returns a copy of `bundle` whose train labels were passed through `flipper`.
/// The test split is copied unchanged.
pub fn apply_noise(bundle: &DatasetBundle, spec: &NoiseSpec, flipper: &dyn LabelFlipper) -> Result<DatasetBundle> {
    if bundle.noise_spec.family != NoiseFamily::None {
        return Err(Error::Contract(format!(
            "bundle already carries {} noise; noise can only be applied once",
            bundle.noise_spec.family.as_str()
        )));
    }
    spec.validate()?;
    let mut train = Vec::with_capacity(bundle.train.len());
    for ex in &bundle.train {
        let clean = ex.clean_label.ok_or_else(|| {
            Error::Contract(format!("train example {} has no clean label to corrupt", ex.index))
        })?;
        let noisy = flipper.flip(&ex.features, clean, ex.index)?;
        if noisy >= bundle.num_classes {
            return Err(Error::Contract(format!("flipper produced label {noisy} outside 0..{}", bundle.num_classes)));
        }
        train.push(LabeledExample { index: ex.index, features: ex.features.clone(), noisy_label: noisy, clean_label: Some(clean) });
    }
    let mut provenance = bundle.provenance.clone();
    provenance.insert("noise".into(), serde_json::to_value(spec)?);
    DatasetBundle::new(train, bundle.test.clone(), bundle.num_classes, bundle.feature_shape, *spec, provenance)
}

/// Reinterprets the observed train labels of a clean-loaded bundle as noisy
/// labels of unknown quality: clean train labels are dropped.
pub fn treat_labels_as_noisy(bundle: &DatasetBundle, spec: &NoiseSpec) -> Result<DatasetBundle> {
    if spec.family != NoiseFamily::External {
        return Err(Error::Contract(format!("expected an external noise spec, got {}", spec.family.as_str())));
    }
    let train = bundle
        .train
        .iter()
        .map(|ex| LabeledExample { clean_label: None, ..ex.clone() })
        .collect();
    let mut provenance = bundle.provenance.clone();
    provenance.insert("noise".into(), serde_json::to_value(spec)?);
    DatasetBundle::new(train, bundle.test.clone(), bundle.num_classes, bundle.feature_shape, *spec, provenance)
}

/// Registered dataset identifiers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetName {
    FashionMnist,
    /// The default structural-causal sandbox (3 classes, 4x4 grid).
    Sandbox,
    /// One subdirectory per class, optionally under `train/` and `test/`.
    Directory(PathBuf),
}

impl DatasetName {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "fashion_mnist" | "fashion-mnist" | "fashionmnist" => Ok(DatasetName::FashionMnist),
            "sandbox" => Ok(DatasetName::Sandbox),
            other => match other.strip_prefix("dir:") {
                Some(path) if !path.is_empty() => Ok(DatasetName::Directory(PathBuf::from(path))),
                _ => Err(Error::Config(format!(
                    "unknown dataset '{other}' (expected fashion_mnist, sandbox or dir:<path>)"
                ))),
            },
        }
    }
}

pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

/// Default number of sandbox training examples when no subset is requested.
pub const SANDBOX_TRAIN_SIZE: usize = 3000;
pub const SANDBOX_TEST_SIZE: usize = 1000;

pub fn load_dataset(name: &str, subset_size: Option<usize>, seed: u64) -> Result<DatasetBundle> {
    load_dataset_at(&data_root(), name, subset_size, seed)
}

/// Loads a clean bundle. `subset_size` selects a class-stratified subset of
/// the training split; the test split is always complete.
pub fn load_dataset_at(root: &Path, name: &str, subset_size: Option<usize>, seed: u64) -> Result<DatasetBundle> {
    if subset_size == Some(0) {
        return Err(Error::Config("subset_size must be positive".into()));
    }
    match DatasetName::parse(name)? {
        DatasetName::FashionMnist => {
            let dir = root.join("fashion_mnist");
            let (train, test) = idx::read_split_pair(&dir)?;
            finish_loaded("fashion_mnist", train, test, 10, [1, 28, 28], subset_size, seed)
        }
        DatasetName::Sandbox => {
            let config = ScmConfig::sandbox_default();
            sandbox_bundle(&config, subset_size.unwrap_or(SANDBOX_TRAIN_SIZE), SANDBOX_TEST_SIZE, seed)
        }
        DatasetName::Directory(path) => {
            let path = if path.is_absolute() { path } else { root.join(path) };
            let loaded = folder::read_class_folders(&path, seed)?;
            finish_loaded(
                &format!("dir:{}", path.display()),
                loaded.train,
                loaded.test,
                loaded.num_classes,
                loaded.feature_shape,
                subset_size,
                seed,
            )
            .map(|mut b| {
                b.provenance.insert("class_names".into(), serde_json::json!(loaded.class_names));
                b
            })
        }
    }
}

fn finish_loaded(
    source: &str,
    train: Vec<LabeledExample>,
    test: Vec<LabeledExample>,
    num_classes: usize,
    feature_shape: [usize; 3],
    subset_size: Option<usize>,
    seed: u64,
) -> Result<DatasetBundle> {
    let full = train.len();
    let train = match subset_size {
        Some(n) => stratified_subset(train, num_classes, n, seed)?,
        None => train,
    };
    let mut provenance = Provenance::new();
    provenance.insert("source".into(), serde_json::json!(source));
    provenance.insert("full_train_size".into(), serde_json::json!(full));
    provenance.insert("subset_size".into(), serde_json::json!(subset_size));
    provenance.insert("seed".into(), serde_json::json!(seed));
    DatasetBundle::new(train, test, num_classes, feature_shape, NoiseSpec::none(), provenance)
}

/// Equal per-class counts (the first `n % C` classes get one extra example),
/// chosen by a seeded shuffle and returned in original index order.
pub fn stratified_subset(
    examples: Vec<LabeledExample>,
    num_classes: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if n > examples.len() {
        return Err(Error::Config(format!("subset_size {n} exceeds the {} available training examples", examples.len())));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (pos, ex) in examples.iter().enumerate() {
        let label = ex.clean_label.unwrap_or(ex.noisy_label);
        by_class[label].push(pos);
    }
    let mut rng = rng::named_rng(seed, "data.subset");
    let mut keep = Vec::with_capacity(n);
    for (class, members) in by_class.iter_mut().enumerate() {
        let want = n / num_classes + usize::from(class < n % num_classes);
        if members.len() < want {
            return Err(Error::Config(format!(
                "class {class} has {} examples, stratified subset needs {want}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..want]);
    }
    keep.sort_unstable();
    let mut slots: Vec<Option<LabeledExample>> = examples.into_iter().map(Some).collect();
    Ok(keep.into_iter().map(|pos| slots[pos].take().expect("positions are unique")).collect())
}

/// Samples a sandbox bundle from the structural causal model. The sampled
/// noisy labels and latents are stored in the provenance block; attach them
/// with [`crate::scm::SandboxFlipper`].
pub fn sandbox_bundle(config: &ScmConfig, n_train: usize, n_test: usize, seed: u64) -> Result<DatasetBundle> {
    config.validate()?;
    let train_samples = scm::sample_scm(config, n_train, rng::substream(seed, "sandbox.train"))?;
    let test_samples = scm::sample_scm(config, n_test, rng::substream(seed, "sandbox.test"))?;
    let to_example = |offset: u64| {
        move |(i, s): (usize, &scm::ScmSample)| {
            let features = s.features.iter().map(|&v| v as f32).collect();
            LabeledExample::clean(offset + i as u64, features, s.clean_label)
        }
    };
    let train: Vec<_> = train_samples.iter().enumerate().map(to_example(0)).collect();
    let test: Vec<_> = test_samples.iter().enumerate().map(to_example(n_train as u64)).collect();
    let mut provenance = Provenance::new();
    provenance.insert("source".into(), serde_json::json!("sandbox"));
    provenance.insert("seed".into(), serde_json::json!(seed));
    provenance.insert("scm_config".into(), serde_json::to_value(config)?);
    provenance.insert("scm_train".into(), scm::samples_to_provenance(&train_samples));
    DatasetBundle::new(train, test, config.num_classes, config.feature_shape(), NoiseSpec::none(), provenance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_bundle(n_per_class: usize, classes: usize) -> DatasetBundle {
        let mut train = Vec::new();
        let mut idx = 0u64;
        for c in 0..classes {
            for j in 0..n_per_class {
                train.push(LabeledExample::clean(idx, vec![c as f32 / classes as f32, j as f32 / n_per_class as f32], c));
                idx += 1;
            }
        }
        let test = vec![LabeledExample::clean(idx, vec![0.5, 0.5], 0)];
        DatasetBundle::new(train, test, classes, [1, 1, 2], NoiseSpec::none(), Provenance::new()).unwrap()
    }

    #[test]
    fn noise_spec_rate_zero_iff_none() {
        assert!(NoiseSpec::new(NoiseFamily::None, 0.0, 1).is_ok());
        assert!(NoiseSpec::new(NoiseFamily::None, 0.1, 1).is_err());
        assert!(NoiseSpec::new(NoiseFamily::Idn, 0.0, 1).is_err());
        assert!(NoiseSpec::new(NoiseFamily::Idn, 1.0, 1).is_err());
        assert!(NoiseSpec::new(NoiseFamily::Symmetric, 0.4, 1).is_ok());
    }

    #[test]
    fn identity_noise_keeps_labels_and_leaves_input_untouched() {
        let bundle = toy_bundle(5, 3);
        let noisy = apply_noise(&bundle, &NoiseSpec::none(), &IdentityFlipper).unwrap();
        let access = noisy.eval_access();
        for ex in &noisy.train {
            assert_eq!(Some(ex.noisy_label), access.clean_label(ex));
        }
        assert_eq!(bundle.noise_spec.family, NoiseFamily::None);
        assert_eq!(noisy.test, bundle.test);
    }

    struct Shift;
    impl LabelFlipper for Shift {
        fn flip(&self, _: &[f32], clean: usize, _: u64) -> Result<usize> {
            Ok((clean + 1) % 3)
        }
    }

    #[test]
    fn noise_applies_once() {
        let bundle = toy_bundle(4, 3);
        let spec = NoiseSpec::new(NoiseFamily::Symmetric, 0.5, 0).unwrap();
        let noisy = apply_noise(&bundle, &spec, &Shift).unwrap();
        assert!(noisy.train.iter().all(|e| e.noisy_label != e.clean_label.unwrap()));
        // original untouched
        assert!(bundle.train.iter().all(|e| e.noisy_label == e.clean_label.unwrap()));
        assert!(matches!(apply_noise(&noisy, &spec, &Shift), Err(Error::Contract(_))));
    }

    #[test]
    fn eval_access_counts_reads() {
        let bundle = toy_bundle(2, 2);
        assert_eq!(bundle.clean_label_reads(), 0);
        let view = bundle.training_view();
        let _ = (0..view.len()).map(|i| view.noisy_label(i)).sum::<usize>();
        assert_eq!(bundle.clean_label_reads(), 0);
        bundle.eval_access().clean_labels(&bundle.train);
        assert_eq!(bundle.clean_label_reads(), 4);
    }

    #[test]
    fn stratified_subset_is_balanced_and_deterministic() {
        let bundle = toy_bundle(10, 3);
        let a = stratified_subset(bundle.train.clone(), 3, 9, 7).unwrap();
        let b = stratified_subset(bundle.train.clone(), 3, 9, 7).unwrap();
        assert_eq!(a, b);
        for c in 0..3 {
            assert_eq!(a.iter().filter(|e| e.noisy_label == c).count(), 3);
        }
        assert!(a.windows(2).all(|w| w[0].index < w[1].index));
        assert!(stratified_subset(bundle.train, 3, 31, 7).is_err());
    }

    #[test]
    fn validation_rejects_bad_examples() {
        let bad_label = vec![LabeledExample::clean(0, vec![0.0, 0.0], 5)];
        assert!(DatasetBundle::new(bad_label, vec![], 3, [1, 1, 2], NoiseSpec::none(), Provenance::new()).is_err());
        let nan = vec![LabeledExample::clean(0, vec![f32::NAN, 0.0], 0)];
        assert!(DatasetBundle::new(nan, vec![], 3, [1, 1, 2], NoiseSpec::none(), Provenance::new()).is_err());
        let dup = vec![LabeledExample::clean(0, vec![0.0, 0.0], 0), LabeledExample::clean(0, vec![0.0, 0.0], 1)];
        assert!(DatasetBundle::new(dup, vec![], 3, [1, 1, 2], NoiseSpec::none(), Provenance::new()).is_err());
        let dirty_test = vec![LabeledExample::with_labels(0, vec![0.0, 0.0], 1, Some(0))];
        assert!(DatasetBundle::new(vec![], dirty_test, 3, [1, 1, 2], NoiseSpec::none(), Provenance::new()).is_err());
    }

    #[test]
    fn unknown_dataset_is_a_config_error() {
        assert!(matches!(load_dataset_at(Path::new("."), "cifar-1000", None, 0), Err(Error::Config(_))));
        assert!(matches!(DatasetName::parse("dir:"), Err(Error::Config(_))));
    }
}
