//! Declarative experiments: config parsing, per-seed pipelines, manifests
//! and cross-run reports.
//!
//! A run directory looks like
//!
//! ```text
//! config.toml
//! manifest.json
//! metrics.csv  aggregate.csv  summary.md  accuracy_vs_noise.svg  purity_vs_epoch.svg
//! seeds/<seed>/<method>/{row.json, report.json, steps.jsonl, checkpoints/}
//! ```
//!
//! Every file except the manifest is listed in it with its SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, apply_noise, load_cache, save_cache, DatasetBundle, DatasetName, NoiseFamily, NoiseSpec};
use crate::error::{Error, Result};
use crate::eval::{self, CleanEvaluator, MetricRow, MetricTable};
use crate::idn::{IdnGeneratorState, SymmetricFlipper, DEFAULT_RATE_STD};
use crate::rng;
use crate::scm::{self, SandboxFlipper, ScmConfig};
use crate::trainer::{self, Method, TrainConfig, TrainReport};

pub const CACHE_ROOT_ENV: &str = "REIDVAE_CACHE";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Bumped whenever bundle construction changes, so stale caches are not reused.
const BUNDLE_RECIPE_VERSION: u32 = 1;

pub fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// `fashion_mnist`, `sandbox` or `dir:<path>`.
    pub name: String,
    /// Class-stratified training subset size.
    #[serde(default)]
    pub subset: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub family: NoiseFamily,
    #[serde(default)]
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Default output directory; the command line may override it.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub dataset: DatasetConfig,
    pub noise: NoiseConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.name.is_empty() {
            return fail("name must not be empty".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        if has_duplicates(&self.seeds) {
            return fail(format!("seeds contains duplicates: {:?}", self.seeds));
        }
        if self.methods.is_empty() {
            return fail("methods must not be empty".into());
        }
        if has_duplicates(&self.methods) {
            return fail("methods contains duplicates".into());
        }
        if self.dataset.subset == Some(0) {
            return fail("dataset.subset must be positive".into());
        }
        self.noise_spec(0)?;
        let name = DatasetName::parse(&self.dataset.name)?;
        match &name {
            DatasetName::FashionMnist => {
                let dir = data::data_root().join("fashion_mnist");
                if !dir.is_dir() {
                    return fail(format!(
                        "dataset.name: {} does not exist (set {} to the data root)",
                        dir.display(),
                        data::DATA_ROOT_ENV
                    ));
                }
            }
            DatasetName::Directory(path) => {
                let path = if path.is_absolute() { path.clone() } else { data::data_root().join(path) };
                if !path.is_dir() {
                    return fail(format!("dataset.name: {} does not exist", path.display()));
                }
            }
            DatasetName::Sandbox => {}
        }
        if self.noise.family == NoiseFamily::External {
            if !matches!(name, DatasetName::Directory(_)) {
                return fail("noise.family = external needs a dir: dataset whose labels are already noisy".into());
            }
            if self.train.noise_rate_estimate.is_none() {
                return fail("noise.family = external needs train.noise_rate_estimate".into());
            }
        }
        if self.train.seed != 0 || self.train.checkpoint_dir.is_some() || self.train.step_log.is_some() {
            return fail("train.seed, train.checkpoint_dir and train.step_log are set per run; remove them".into());
        }
        self.train.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("train: {m}")),
            other => other,
        })
    }

    /// Noise spec of one seed. External labels carry the configured estimate
    /// as their nominal rate.
    pub fn noise_spec(&self, seed: u64) -> Result<NoiseSpec> {
        let rate = match self.noise.family {
            NoiseFamily::External => self.train.noise_rate_estimate.unwrap_or(self.noise.rate),
            _ => self.noise.rate,
        };
        NoiseSpec::new(self.noise.family, rate, rng::substream(seed, "noise"))
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> Result<String> {
        let canonical = ExperimentConfig { output_dir: None, ..self.clone() };
        Ok(sha256_hex(&serde_json::to_vec(&canonical)?))
    }
}

fn has_duplicates<T: Ord>(items: &[T]) -> bool {
    let mut sorted: Vec<&T> = items.iter().collect();
    sorted.sort();
    sorted.windows(2).any(|w| w[0] == w[1])
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::ingestion(path, e.to_string()))?))
}

/// Sandbox configuration whose annotator hits `rate`. The default bias is
/// pre-calibrated for 30%; other rates are calibrated on the fly.
pub fn sandbox_config_for_rate(rate: f64) -> Result<ScmConfig> {
    let mut config = ScmConfig::sandbox_default();
    if rate == 0.0 {
        return Ok(config);
    }
    if (rate - 0.3).abs() > 1e-12 {
        config.annotation_bias = scm::calibrate_annotation_bias(&config, rate, 20_000, 0)?;
    }
    Ok(config)
}

/// Builds the noisy bundle of one seed. The seed drives the subset, the
/// sandbox draw and (through a substream) the noise.
pub fn build_bundle(dataset: &DatasetConfig, spec: &NoiseSpec, seed: u64) -> Result<DatasetBundle> {
    let name = DatasetName::parse(&dataset.name)?;
    if let DatasetName::Sandbox = name {
        let config = sandbox_config_for_rate(if spec.family == NoiseFamily::Idn { spec.rate } else { 0.0 })?;
        let n_train = dataset.subset.unwrap_or(data::SANDBOX_TRAIN_SIZE);
        let clean = data::sandbox_bundle(&config, n_train, data::SANDBOX_TEST_SIZE, seed)?;
        return match spec.family {
            NoiseFamily::None => Ok(clean),
            NoiseFamily::Idn => apply_noise(&clean, spec, &SandboxFlipper::from_bundle(&clean)?),
            NoiseFamily::Symmetric => {
                let flipper = SymmetricFlipper { rate: spec.rate, num_classes: clean.num_classes, seed: spec.seed };
                apply_noise(&clean, spec, &flipper)
            }
            NoiseFamily::External => Err(Error::Config("the sandbox has no external labels".into())),
        };
    }
    let clean = data::load_dataset(&dataset.name, dataset.subset, seed)?;
    match spec.family {
        NoiseFamily::None => Ok(clean),
        NoiseFamily::Idn => {
            let generator = IdnGeneratorState::for_bundle(&clean, spec.rate, DEFAULT_RATE_STD, spec.seed)?;
            apply_noise(&clean, spec, &generator)
        }
        NoiseFamily::Symmetric => {
            let flipper = SymmetricFlipper { rate: spec.rate, num_classes: clean.num_classes, seed: spec.seed };
            apply_noise(&clean, spec, &flipper)
        }
        NoiseFamily::External => data::treat_labels_as_noisy(&clean, spec),
    }
}

/// [`build_bundle`] behind a content-addressed cache under `cache_root`.
pub fn cached_bundle(cache_root: Option<&Path>, dataset: &DatasetConfig, spec: &NoiseSpec, seed: u64) -> Result<DatasetBundle> {
    let Some(root) = cache_root else { return build_bundle(dataset, spec, seed) };
    let key = serde_json::json!({
        "recipe": BUNDLE_RECIPE_VERSION,
        "dataset": dataset,
        "noise": spec,
        "seed": seed,
    });
    let path = root.join("bundles").join(format!("{}.ridv", sha256_hex(&serde_json::to_vec(&key)?)));
    if path.is_file() {
        return load_cache(&path, None);
    }
    let bundle = build_bundle(dataset, spec, seed)?;
    fs::create_dir_all(path.parent().expect("cache path has a parent"))?;
    save_cache(&bundle, &path)?;
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub seed: u64,
    pub method: Method,
    pub complete: bool,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config_hash: String,
    pub code_version: String,
    /// Keyed by `"<seed>/<method>"`.
    pub runs: BTreeMap<String, RunStatus>,
    /// Relative path to SHA-256 of every artifact in the directory.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::ingestion(&path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::ingestion(&path, e.to_string()))
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    pub fn incomplete(&self) -> Vec<&RunStatus> {
        self.runs.values().filter(|r| !r.complete).collect()
    }

    /// Re-hashes every file under `dir`; unlisted, missing or altered files
    /// are errors.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let on_disk = list_artifacts(dir)?;
        let mut problems = Vec::new();
        for rel in &on_disk {
            match self.artifacts.get(rel) {
                None => problems.push(format!("unlisted file {rel}")),
                Some(hash) if *hash != file_sha256(&dir.join(rel))? => problems.push(format!("hash mismatch for {rel}")),
                Some(_) => {}
            }
        }
        for rel in self.artifacts.keys() {
            if !on_disk.contains(rel) {
                problems.push(format!("missing file {rel}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Contract(format!("{}: {}", dir.display(), problems.join("; "))))
        }
    }
}

fn run_key(seed: u64, method: Method) -> String {
    format!("{seed}/{}", method.as_str())
}

/// Relative paths (with `/` separators) of all files under `dir` except the
/// manifest, sorted.
fn list_artifacts(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walk stays under root");
                let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
                out.push(rel.join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.retain(|p| p != MANIFEST_FILE);
    out.sort();
    Ok(out)
}

fn hash_all(dir: &Path) -> Result<BTreeMap<String, String>> {
    list_artifacts(dir)?
        .into_iter()
        .map(|rel| {
            let hash = file_sha256(&dir.join(&rel))?;
            Ok((rel, hash))
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::ingestion(path, e.to_string()))
}

/// Trains `method` on a noisy bundle and writes the report, step log and
/// checkpoints into `dir`.
pub fn train_method(bundle: &DatasetBundle, method: Method, train: &TrainConfig, seed: u64, dir: &Path) -> Result<TrainReport> {
    fs::create_dir_all(dir)?;
    let config = TrainConfig {
        seed,
        checkpoint_dir: Some(dir.join("checkpoints")),
        step_log: Some(dir.join("steps.jsonl")),
        ..train.clone()
    };
    let mut evaluator = CleanEvaluator::new(bundle)?;
    let view = bundle.training_view();
    let report = match method {
        Method::Reidvae => trainer::train(&view, &config, &mut evaluator)?.report,
        Method::Ce => trainer::train_baseline_ce(&view, &config, &mut evaluator)?.report,
        Method::Coteaching => trainer::train_baseline_coteaching(&view, &config, &mut evaluator)?.report,
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

fn metric_row(config: &ExperimentConfig, method: Method, seed: u64, report: &TrainReport, runtime: f64) -> Result<MetricRow> {
    let eval = report.final_eval().ok_or_else(|| Error::Contract("final epoch was not evaluated".into()))?;
    Ok(MetricRow {
        method: method.as_str().into(),
        dataset: config.dataset.name.clone(),
        noise_family: config.noise.family.as_str().into(),
        noise_rate: config.noise.rate,
        seed,
        accuracy: eval.ensemble_accuracy,
        purity: eval.purity,
        runtime_secs: runtime,
    })
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub cache_root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub table: MetricTable,
    pub trained: Vec<(u64, Method)>,
    pub skipped: Vec<(u64, Method)>,
    pub failed: Vec<(u64, Method, String)>,
}

/// Runs every (seed, method) pair of `config` into `out`. Completed pairs
/// whose artifacts still verify are skipped. Failures are recorded in the
/// manifest and do not stop the remaining pairs.
pub fn run_experiment(config: &ExperimentConfig, out: &Path, options: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(out)?;
    let config_hash = config.hash()?;
    let mut manifest = if out.join(MANIFEST_FILE).is_file() {
        let m = Manifest::read(out)?;
        if m.config_hash != config_hash {
            return Err(Error::Conflict(format!(
                "{} holds results of a different config (hash {}); use a fresh output directory",
                out.display(),
                m.config_hash
            )));
        }
        m
    } else {
        Manifest {
            name: config.name.clone(),
            config_hash: config_hash.clone(),
            code_version: code_version(),
            runs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    };
    fs::write(out.join("config.toml"), config.to_toml()?)?;

    let mut summary = RunSummary { table: MetricTable::default(), trained: Vec::new(), skipped: Vec::new(), failed: Vec::new() };
    for &seed in &config.seeds {
        let mut bundle: Option<DatasetBundle> = None;
        for &method in &config.methods {
            let dir = out.join("seeds").join(seed.to_string()).join(method.as_str());
            let row_path = dir.join("row.json");
            let done = manifest.runs.get(&run_key(seed, method)).is_some_and(|r| r.complete) && row_path.is_file();
            if done && verify_subtree(&manifest, out, &dir)? {
                log::info!("seed {seed} {}: complete, skipping", method.as_str());
                summary.table.rows.push(read_json(&row_path)?);
                summary.skipped.push((seed, method));
                continue;
            }
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            let result = (|| -> Result<MetricRow> {
                if bundle.is_none() {
                    bundle = Some(cached_bundle(options.cache_root.as_deref(), &config.dataset, &config.noise_spec(seed)?, seed)?);
                }
                let bundle = bundle.as_ref().expect("bundle was just built");
                log::info!("seed {seed} {}: training", method.as_str());
                let start = Instant::now();
                let report = train_method(bundle, method, &config.train, seed, &dir)?;
                let row = metric_row(config, method, seed, &report, start.elapsed().as_secs_f64())?;
                write_json(&row_path, &row)?;
                Ok(row)
            })();
            let status = match result {
                Ok(row) => {
                    log::info!("seed {seed} {}: accuracy {:.4}", method.as_str(), row.accuracy);
                    summary.table.rows.push(row);
                    summary.trained.push((seed, method));
                    RunStatus { seed, method, complete: true, error: None }
                }
                Err(e) => {
                    log::error!("seed {seed} {}: {e}", method.as_str());
                    summary.failed.push((seed, method, e.to_string()));
                    RunStatus { seed, method, complete: false, error: Some(e.to_string()) }
                }
            };
            manifest.runs.insert(run_key(seed, method), status);
            manifest.artifacts = hash_all(out)?;
            manifest.write(out)?;
        }
    }
    write_tables(&summary.table, out)?;
    write_purity_plot(config, out)?;
    manifest.artifacts = hash_all(out)?;
    manifest.write(out)?;
    Ok(summary)
}

/// True when every listed artifact under `sub` matches the manifest.
fn verify_subtree(manifest: &Manifest, root: &Path, sub: &Path) -> Result<bool> {
    if !sub.is_dir() {
        return Ok(false);
    }
    let prefix = sub.strip_prefix(root).expect("subtree of root");
    let prefix: Vec<String> = prefix.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
    let prefix = format!("{}/", prefix.join("/"));
    let on_disk: Vec<String> = list_artifacts(root)?.into_iter().filter(|p| p.starts_with(&prefix)).collect();
    let listed: Vec<&String> = manifest.artifacts.keys().filter(|p| p.starts_with(&prefix)).collect();
    if on_disk.len() != listed.len() {
        return Ok(false);
    }
    for rel in on_disk {
        match manifest.artifacts.get(&rel) {
            Some(hash) if *hash == file_sha256(&root.join(&rel))? => {}
            _ => return Ok(false),
        }
    }
    Ok(true)
}

fn write_tables(table: &MetricTable, out: &Path) -> Result<()> {
    table.write_csv(&out.join("metrics.csv"))?;
    let aggregate = table.aggregate();
    eval::write_aggregate_csv(&aggregate, &out.join("aggregate.csv"))?;
    fs::write(out.join("summary.md"), eval::markdown_summary(&aggregate))?;
    let mut datasets: Vec<&str> = aggregate.iter().map(|r| r.dataset.as_str()).collect();
    datasets.dedup();
    for dataset in datasets {
        let file = if aggregate.iter().all(|r| r.dataset == dataset) {
            "accuracy_vs_noise.svg".to_string()
        } else {
            format!("accuracy_vs_noise_{}.svg", sanitize(dataset))
        };
        eval::plot_accuracy_vs_noise(&aggregate, dataset, &out.join(file))?;
    }
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn write_purity_plot(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut series = Vec::new();
    for &seed in &config.seeds {
        for &method in &config.methods {
            let path = out.join("seeds").join(seed.to_string()).join(method.as_str()).join("report.json");
            if !path.is_file() {
                continue;
            }
            let report: TrainReport = read_json(&path)?;
            let points: Vec<(f64, f64)> = report
                .epochs
                .iter()
                .filter_map(|e| e.eval.as_ref().and_then(|v| v.purity).map(|p| (e.epoch as f64, p)))
                .collect();
            if !points.is_empty() {
                series.push((format!("{} seed {seed}", method.as_str()), points));
            }
        }
    }
    if series.is_empty() {
        return Ok(());
    }
    eval::line_plot(&out.join("purity_vs_epoch.svg"), &format!("{}: selection purity", config.name), "epoch", "purity", &series)
}

/// Merges the metric tables of several run directories into `out`. Each
/// directory must verify against its manifest.
pub fn report(dirs: &[PathBuf], out: &Path) -> Result<MetricTable> {
    if dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut table = MetricTable::default();
    let mut conflicts = Vec::new();
    for dir in dirs {
        let manifest = Manifest::read(dir)?;
        manifest.verify(dir)?;
        let rows = MetricTable::read_csv(&dir.join("metrics.csv"))?;
        if let Err(Error::Conflict(m)) = table.merge(&rows) {
            conflicts.push(format!("{}: {m}", dir.display()));
        }
    }
    if !conflicts.is_empty() {
        return Err(Error::Conflict(conflicts.join("; ")));
    }
    fs::create_dir_all(out)?;
    write_tables(&table, out)?;
    Ok(table)
}
