//! Two-branch training loop, the cross-entropy and co-teaching baselines,
//! and the ensemble prediction rule.
//!
//! The trainer only sees a [`TrainingView`] (features and noisy labels).
//! Anything that needs clean labels happens in a [`TrainObserver`] owned by
//! the caller.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{NoiseFamily, TrainingView};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, Branch, ClassProbs, InputNorm, Likelihood, PriorConfig, StandaloneClassifier};
use crate::nn::{Backbone, ParamStore};
use crate::objective::{co_teaching_loss, cross_entropy_rows, small_loss_plan, total_loss, ElboBreakdown, ElboConfig, KL_TOLERANCE};
use crate::optim::{Optimizer, OptimizerConfig, Schedule};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Reidvae,
    Ce,
    Coteaching,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Reidvae => "reidvae",
            Method::Ce => "ce",
            Method::Coteaching => "coteaching",
        }
    }
}

/// Data-independent part of the architecture; class count, input shape and
/// input statistics come from the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "one")]
    pub content_dim_per_class: usize,
    pub style_dim: usize,
    pub backbone: Backbone,
    pub encoder_hidden: usize,
    pub decoder_hidden: Vec<usize>,
    pub noisy_decoder_hidden: Vec<usize>,
    #[serde(default)]
    pub zero_init_heads: bool,
    pub likelihood: Likelihood,
    #[serde(default)]
    pub stop_grad_xhat: bool,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default = "yes")]
    pub normalize_inputs: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            content_dim_per_class: 1,
            style_dim: 2,
            backbone: Backbone::Mlp { hidden: vec![64] },
            encoder_hidden: 32,
            decoder_hidden: vec![32],
            noisy_decoder_hidden: vec![32],
            zero_init_heads: false,
            likelihood: Likelihood::Gaussian { std: 0.3 },
            stop_grad_xhat: false,
            prior: PriorConfig::default(),
            normalize_inputs: true,
        }
    }

    pub fn arch_for(&self, view: &TrainingView<'_>) -> ArchConfig {
        let shape = view.feature_shape();
        let input_norm = if self.normalize_inputs {
            InputNorm::fit((0..view.len()).map(|i| view.features(i)), shape[0])
        } else {
            InputNorm::identity(shape[0])
        };
        ArchConfig {
            num_classes: view.num_classes(),
            content_dim_per_class: self.content_dim_per_class,
            style_dim: self.style_dim,
            feature_shape: shape,
            backbone: self.backbone.clone(),
            encoder_hidden: self.encoder_hidden,
            decoder_hidden: self.decoder_hidden.clone(),
            noisy_decoder_hidden: self.noisy_decoder_hidden.clone(),
            zero_init_heads: self.zero_init_heads,
            likelihood: self.likelihood,
            stop_grad_xhat: self.stop_grad_xhat,
            prior: self.prior.clone(),
            input_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Noise rate used for the keep-fraction floor when the data carries an
    /// external noise spec. Synthesized noise uses its own rate.
    #[serde(default)]
    pub noise_rate_estimate: Option<f64>,
    pub warmup_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate every this many epochs (the last epoch is always evaluated).
    #[serde(default = "one")]
    pub eval_every: usize,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default)]
    pub step_log: Option<PathBuf>,
    #[serde(default)]
    pub elbo: ElboConfig,
    pub model: ModelConfig,
}

fn default_alpha() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn tiny(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: 64,
            learning_rate: 0.05,
            optimizer: OptimizerConfig::default(),
            schedule: Schedule::Cosine,
            alpha: 1.0,
            noise_rate_estimate: None,
            warmup_epochs: 5,
            seed,
            eval_every: 1,
            checkpoint_dir: None,
            step_log: None,
            elbo: ElboConfig::default(),
            model: ModelConfig::tiny(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.warmup_epochs < 1 {
            return fail("warmup_epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if let Some(t) = self.noise_rate_estimate {
            if !(0.0..1.0).contains(&t) {
                return fail(format!("noise_rate_estimate must lie in [0, 1), got {t}"));
            }
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive".into());
        }
        self.optimizer.validate()
    }

    /// The noise-rate estimate used by the keep-fraction schedule.
    pub fn resolved_noise_rate(&self, view: &TrainingView<'_>) -> Result<f64> {
        let spec = view.noise_spec();
        match spec.family {
            NoiseFamily::External => self.noise_rate_estimate.ok_or_else(|| {
                Error::Config("externally noised data needs train.noise_rate_estimate".into())
            }),
            _ => Ok(spec.rate),
        }
    }

    /// Co-teaching weight after `progress` epochs (fractional, updated per step).
    pub fn alpha_at(&self, progress: f64) -> f64 {
        self.alpha * (progress / self.warmup_epochs as f64).min(1.0)
    }
}

/// `1 - min(epoch / T_k, 1) * tau`.
pub fn keep_fraction_schedule(epoch: usize, warmup_epochs: usize, noise_rate: f64) -> f64 {
    1.0 - (epoch as f64 / warmup_epochs.max(1) as f64).min(1.0) * noise_rate
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Test accuracy of each network (branch order).
    pub accuracy: Vec<f64>,
    pub ensemble_accuracy: f64,
    /// Fraction of truly clean examples among the epoch's selections.
    pub purity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub keep_fraction: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    /// Mean training loss per network.
    pub loss: Vec<f64>,
    /// Mean ELBO breakdown per branch (empty for the baselines).
    pub elbo: Vec<ElboBreakdown>,
    /// Mean co-teaching term per network (empty for plain cross-entropy).
    pub co_teaching: Vec<f64>,
    pub eval: Option<EvalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.epochs.last().and_then(|e| e.eval.as_ref())
    }
}

#[derive(Debug, Clone, Serialize)]
struct StepRecord<'a> {
    step: u64,
    epoch: usize,
    keep_fraction: f64,
    alpha: f64,
    loss: &'a [f64],
    elbo: &'a [ElboBreakdown],
    co_teaching: &'a [f64],
}

/// Hooks for evaluation during training.
pub trait TrainObserver {
    /// Dataset indices each network trained on in one step.
    fn on_selection(&mut self, _epoch: usize, _selected: &[Vec<u64>]) {}

    /// Called after each evaluated epoch with frozen networks.
    fn on_epoch_end(&mut self, _epoch: usize, _models: &[&dyn ClassProbs]) -> Result<Option<EvalRecord>> {
        Ok(None)
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

pub struct TrainOutcome<M> {
    pub report: TrainReport,
    pub models: Vec<M>,
}

/// Features as one `(n, c, h, w)` tensor.
pub fn features_tensor<'a>(rows: impl ExactSizeIterator<Item = &'a [f32]>, shape: [usize; 3], dtype: DType) -> Result<Tensor> {
    let n = rows.len();
    let mut flat = Vec::with_capacity(n * shape.iter().product::<usize>());
    rows.for_each(|r| flat.extend_from_slice(r));
    Ok(Tensor::from_vec(flat, (n, shape[0], shape[1], shape[2]), &Device::Cpu)?.to_dtype(dtype)?)
}

struct TrainData {
    x: Tensor,
    noisy: Vec<usize>,
    indices: Vec<u64>,
}

impl TrainData {
    fn new(view: &TrainingView<'_>, dtype: DType) -> Result<Self> {
        if view.len() < 2 {
            return Err(Error::Domain("training needs at least two examples".into()));
        }
        let x = features_tensor((0..view.len()).map(|i| view.features(i)), view.feature_shape(), dtype)?;
        Ok(TrainData {
            x,
            noisy: (0..view.len()).map(|i| view.noisy_label(i)).collect(),
            indices: (0..view.len()).map(|i| view.index(i)).collect(),
        })
    }

    /// Shuffled batches for `epoch`, shared by both networks. A trailing
    /// batch with fewer than two examples is dropped.
    fn batches(&self, seed: u64, epoch: usize, batch_size: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.noisy.len()).collect();
        order.shuffle(&mut rng::named_rng(seed, &format!("loader.epoch.{epoch}")));
        order.chunks(batch_size).filter(|c| c.len() >= 2).map(|c| c.to_vec()).collect()
    }

    fn batch(&self, positions: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let idx: Vec<u32> = positions.iter().map(|&p| p as u32).collect();
        let idx = Tensor::from_vec(idx, positions.len(), &Device::Cpu)?;
        Ok((self.x.index_select(&idx, 0)?, positions.iter().map(|&p| self.noisy[p]).collect()))
    }

    fn dataset_indices(&self, positions: &[usize], selected: &[usize]) -> Vec<u64> {
        selected.iter().map(|&s| self.indices[positions[s]]).collect()
    }
}

fn init_seed(seed: u64, branch: usize) -> u64 {
    rng::substream(seed, &format!("init.branch.{branch}"))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

fn open_step_log(path: &Option<PathBuf>) -> Result<Option<BufWriter<File>>> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            Ok(Some(BufWriter::new(File::create(p)?)))
        }
        None => Ok(None),
    }
}

/// Writes the last good parameters and a diagnostic record, then returns
/// the error to surface.
fn abort_with_checkpoint(
    config: &TrainConfig,
    stores: &[&ParamStore],
    snapshots: &[ParamStore],
    save: &dyn Fn(usize, &Path) -> Result<()>,
    step: u64,
    epoch: usize,
    cause: Error,
) -> Error {
    for (store, snap) in stores.iter().zip(snapshots) {
        if let Err(e) = store.load_from(snap) {
            return e;
        }
    }
    let Some(dir) = &config.checkpoint_dir else { return cause };
    let mut saved = Vec::new();
    for i in 0..stores.len() {
        let path = dir.join(format!("last_good_{i}.ckpt"));
        if let Err(e) = save(i, &path) {
            return e;
        }
        saved.push(path);
    }
    let record = serde_json::json!({ "step": step, "epoch": epoch, "error": cause.to_string(), "checkpoints": saved });
    if let Err(e) = std::fs::write(dir.join("diagnostic.json"), record.to_string()) {
        return e.into();
    }
    match cause {
        Error::Numerical { term, detail } => {
            Error::numerical(term, format!("{detail} (step {step}; last good parameters in {})", dir.display()))
        }
        other => other,
    }
}

fn should_eval(config: &TrainConfig, epoch: usize) -> bool {
    (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs
}

/// Trains two branches with the ELBO plus the co-teaching exchange.
pub fn train(view: &TrainingView<'_>, config: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutcome<Branch>> {
    config.validate()?;
    let tau = config.resolved_noise_rate(view)?;
    let arch = config.model.arch_for(view);
    let data = TrainData::new(view, DType::F32)?;
    let mut branches = [Branch::new(&arch, DType::F32, init_seed(config.seed, 0))?, Branch::new(&arch, DType::F32, init_seed(config.seed, 1))?];
    let mut opts = [
        Optimizer::new(&config.optimizer, branches[0].store().vars(), config.learning_rate)?,
        Optimizer::new(&config.optimizer, branches[1].store().vars(), config.learning_rate)?,
    ];
    let steps_per_epoch = data.batches(config.seed, 0, config.batch_size).len() as u64;
    let total_steps = steps_per_epoch * config.epochs as u64;
    let mut log = open_step_log(&config.step_log)?;
    let mut report = TrainReport { method: Method::Reidvae, epochs: Vec::new(), steps: 0, checkpoints: Vec::new() };
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        let keep = keep_fraction_schedule(epoch, config.warmup_epochs, tau);
        let mut alpha = config.alpha;
        let mut losses = [Vec::new(), Vec::new()];
        let mut co = [Vec::new(), Vec::new()];
        let mut elbo = [ElboBreakdown::default(), ElboBreakdown::default()];
        let mut lr = config.learning_rate;
        for (bi, positions) in data.batches(config.seed, epoch, config.batch_size).iter().enumerate() {
            lr = config.schedule.rate(config.learning_rate, step, total_steps);
            alpha = config.alpha_at(epoch as f64 + bi as f64 / steps_per_epoch as f64);
            let (x, noisy) = data.batch(positions)?;
            let snapshots = [branches[0].store().snapshot()?, branches[1].store().snapshot()?];
            let stores = [branches[0].store(), branches[1].store()];
            let save = |i: usize, p: &Path| branches[i].save(p);
            let mc_seed = rng::substream(config.seed, &format!("reparam.step.{step}"));
            let outcome = total_loss(&branches[0], &branches[1], &x, &noisy, alpha, keep, mc_seed, &config.elbo)
                .and_then(|t| {
                    let (l1, l2) = t.values()?;
                    for (name, v) in [("loss (branch 1)", l1), ("loss (branch 2)", l2)] {
                        if !v.is_finite() {
                            return Err(Error::numerical(name, format!("loss is {v}")));
                        }
                    }
                    for (i, e) in [&t.elbo1, &t.elbo2].iter().enumerate() {
                        if e.kl_min < -KL_TOLERANCE {
                            return Err(Error::numerical("kl", format!("branch {} KL {} below zero", i + 1, e.kl_min)));
                        }
                    }
                    Ok((t, l1, l2))
                });
            let (t, l1, l2) = match outcome {
                Ok(v) => v,
                Err(e @ Error::Numerical { .. }) => {
                    return Err(abort_with_checkpoint(config, &stores, &snapshots, &save, step, epoch, e));
                }
                Err(e) => return Err(e),
            };
            let grads = t.backward()?;
            for opt in opts.iter_mut() {
                opt.step(&grads, lr)?;
            }
            for (i, b) in branches.iter().enumerate() {
                if !b.store().all_finite()? {
                    let e = Error::numerical("parameters", format!("branch {} has non-finite parameters after the update", i + 1));
                    return Err(abort_with_checkpoint(config, &stores, &snapshots, &save, step, epoch, e));
                }
            }
            observer.on_selection(
                epoch,
                &[data.dataset_indices(positions, &t.plan.selected_for_branch1), data.dataset_indices(positions, &t.plan.selected_for_branch2)],
            );
            losses[0].push(l1);
            losses[1].push(l2);
            co[0].push(t.co_teaching1);
            co[1].push(t.co_teaching2);
            elbo[0].accumulate(&t.elbo1, bi + 1);
            elbo[1].accumulate(&t.elbo2, bi + 1);
            if let Some(w) = log.as_mut() {
                let rec = StepRecord {
                    step,
                    epoch,
                    keep_fraction: keep,
                    alpha,
                    loss: &[l1, l2],
                    elbo: &[t.elbo1, t.elbo2],
                    co_teaching: &[t.co_teaching1, t.co_teaching2],
                };
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
            step += 1;
        }
        for b in branches.iter_mut() {
            b.set_step(step);
        }
        let eval = if should_eval(config, epoch) {
            observer.on_epoch_end(epoch, &[&branches[0], &branches[1]])?
        } else {
            None
        };
        if let Some(dir) = &config.checkpoint_dir {
            report.checkpoints = (0..2).map(|i| dir.join(format!("branch{i}.ckpt"))).collect();
            for (b, p) in branches.iter().zip(&report.checkpoints) {
                b.save(p)?;
            }
        }
        report.epochs.push(EpochRecord {
            epoch,
            keep_fraction: keep,
            alpha,
            learning_rate: lr,
            loss: losses.iter().map(|l| mean(l)).collect(),
            elbo: elbo.to_vec(),
            co_teaching: co.iter().map(|c| mean(c)).collect(),
            eval,
        });
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    report.steps = step;
    Ok(TrainOutcome { report, models: branches.into_iter().collect() })
}

fn train_classifiers(
    view: &TrainingView<'_>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
    method: Method,
) -> Result<TrainOutcome<StandaloneClassifier>> {
    config.validate()?;
    let tau = match method {
        Method::Coteaching => config.resolved_noise_rate(view)?,
        _ => 0.0,
    };
    let count = if method == Method::Ce { 1 } else { 2 };
    let arch = config.model.arch_for(view);
    let data = TrainData::new(view, DType::F32)?;
    let mut nets: Vec<StandaloneClassifier> =
        (0..count).map(|i| StandaloneClassifier::new(&arch, DType::F32, init_seed(config.seed, i))).collect::<Result<_>>()?;
    let mut opts: Vec<Optimizer> =
        nets.iter().map(|n| Optimizer::new(&config.optimizer, n.store().vars(), config.learning_rate)).collect::<Result<_>>()?;
    let steps_per_epoch = data.batches(config.seed, 0, config.batch_size).len() as u64;
    let total_steps = steps_per_epoch * config.epochs as u64;
    let mut log = open_step_log(&config.step_log)?;
    let mut report = TrainReport { method, epochs: Vec::new(), steps: 0, checkpoints: Vec::new() };
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        let keep = keep_fraction_schedule(epoch, config.warmup_epochs, tau);
        let mut losses = vec![Vec::new(); count];
        let mut lr = config.learning_rate;
        for positions in data.batches(config.seed, epoch, config.batch_size) {
            lr = config.schedule.rate(config.learning_rate, step, total_steps);
            let (x, noisy) = data.batch(&positions)?;
            let snapshots: Vec<ParamStore> = nets.iter().map(|n| n.store().snapshot()).collect::<Result<_>>()?;
            let stores: Vec<&ParamStore> = nets.iter().map(|n| n.store()).collect();
            let save = |i: usize, p: &Path| nets[i].save(p);
            let log_q: Vec<Tensor> = match nets.iter().map(|n| n.net().log_probs(&x)).collect::<Result<Vec<_>>>() {
                Ok(v) => v,
                Err(e @ Error::Numerical { .. }) => {
                    return Err(abort_with_checkpoint(config, &stores, &snapshots, &save, step, epoch, e));
                }
                Err(e) => return Err(e),
            };
            let batch_losses: Vec<Tensor> = if method == Method::Ce {
                vec![cross_entropy_rows(&log_q[0], &noisy)?.mean(0)?]
            } else {
                let ce: Vec<Vec<f64>> = log_q
                    .iter()
                    .map(|l| Ok(cross_entropy_rows(l, &noisy)?.to_dtype(DType::F64)?.to_vec1::<f64>()?))
                    .collect::<Result<_>>()?;
                let plan = small_loss_plan(&ce[0], &ce[1], keep)?;
                observer.on_selection(
                    epoch,
                    &[data.dataset_indices(&positions, &plan.selected_for_branch1), data.dataset_indices(&positions, &plan.selected_for_branch2)],
                );
                let (a, b) = co_teaching_loss(&log_q[0], &log_q[1], &noisy, &plan)?;
                vec![a, b]
            };
            let values: Vec<f64> = batch_losses.iter().map(|l| l.to_dtype(DType::F64)?.to_scalar::<f64>()).collect::<candle_core::Result<_>>()?;
            if let Some(v) = values.iter().find(|v| !v.is_finite()) {
                let e = Error::numerical("cross-entropy", format!("loss is {v}"));
                return Err(abort_with_checkpoint(config, &stores, &snapshots, &save, step, epoch, e));
            }
            let sum = batch_losses.iter().skip(1).try_fold(batch_losses[0].clone(), |acc, l| acc + l)?;
            let grads = sum.backward()?;
            for opt in opts.iter_mut() {
                opt.step(&grads, lr)?;
            }
            for n in nets.iter() {
                if !n.store().all_finite()? {
                    let e = Error::numerical("parameters", "non-finite parameters after the update");
                    return Err(abort_with_checkpoint(config, &stores, &snapshots, &save, step, epoch, e));
                }
            }
            for (l, v) in losses.iter_mut().zip(&values) {
                l.push(*v);
            }
            if let Some(w) = log.as_mut() {
                let rec = StepRecord { step, epoch, keep_fraction: keep, alpha: 0.0, loss: &values, elbo: &[], co_teaching: &[] };
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
            step += 1;
        }
        for n in nets.iter_mut() {
            n.set_step(step);
        }
        let eval = if should_eval(config, epoch) {
            let refs: Vec<&dyn ClassProbs> = nets.iter().map(|n| n as &dyn ClassProbs).collect();
            observer.on_epoch_end(epoch, &refs)?
        } else {
            None
        };
        if let Some(dir) = &config.checkpoint_dir {
            report.checkpoints = (0..count).map(|i| dir.join(format!("{}{i}.ckpt", method.as_str()))).collect();
            for (n, p) in nets.iter().zip(&report.checkpoints) {
                n.save(p)?;
            }
        }
        let co_teaching = if method == Method::Coteaching { losses.iter().map(|l| mean(l)).collect() } else { Vec::new() };
        report.epochs.push(EpochRecord {
            epoch,
            keep_fraction: keep,
            alpha: 0.0,
            learning_rate: lr,
            loss: losses.iter().map(|l| mean(l)).collect(),
            elbo: Vec::new(),
            co_teaching,
            eval,
        });
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    report.steps = step;
    Ok(TrainOutcome { report, models: nets })
}

/// One classifier trained with cross-entropy on the noisy labels. It starts
/// from the same weights as branch 1's classifier under the same seed.
pub fn train_baseline_ce(view: &TrainingView<'_>, config: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutcome<StandaloneClassifier>> {
    train_classifiers(view, config, observer, Method::Ce)
}

/// Two classifiers exchanging small-loss selections, cross-entropy only.
pub fn train_baseline_coteaching(
    view: &TrainingView<'_>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome<StandaloneClassifier>> {
    train_classifiers(view, config, observer, Method::Coteaching)
}

/// Mean class probabilities of `models` (or of `models[single]` alone).
pub fn predict_probs(models: &[&dyn ClassProbs], x: &Tensor, single: Option<usize>) -> Result<Vec<Vec<f64>>> {
    if models.is_empty() {
        return Err(Error::Domain("prediction needs at least one model".into()));
    }
    let chosen: Vec<&dyn ClassProbs> = match single {
        Some(i) => vec![*models.get(i).ok_or_else(|| Error::Domain(format!("no model {i}")))?],
        None => models.to_vec(),
    };
    let mut sum: Option<Tensor> = None;
    for m in &chosen {
        let p = m.class_probs(x)?.to_dtype(DType::F64)?;
        sum = Some(match sum {
            Some(s) => (s + p)?,
            None => p,
        });
    }
    Ok(sum.unwrap().affine(1.0 / chosen.len() as f64, 0.0)?.to_vec2::<f64>()?)
}

/// Argmax of the averaged probabilities; `single` picks one network.
pub fn predict(models: &[&dyn ClassProbs], x: &Tensor, single: Option<usize>) -> Result<Vec<usize>> {
    Ok(predict_probs(models, x, single)?.iter().map(|p| argmax(p)).collect())
}

/// [`predict`] over a large input tensor in chunks.
pub fn predict_chunked(models: &[&dyn ClassProbs], x: &Tensor, single: Option<usize>, chunk: usize) -> Result<Vec<usize>> {
    let n = x.dim(0)?;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = chunk.max(1).min(n - start);
        out.extend(predict(models, &x.narrow(0, start, len)?, single)?);
        start += len;
    }
    Ok(out)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
