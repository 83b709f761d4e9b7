//! Synthetic data from a known structural causal model:
//!
//! ```text
//! Y   = eps_Y
//! z_c = f_zc(Y, eps_zc)        class block Y centred at mu_Y, other blocks at 0
//! z_s = eps_zs
//! x   = f_x(Y, z, eps_x)       sigmoid(two-layer tanh map + eps_x)
//! Y~  = f_Y~(x, z, eps_Y~)     argmax(bias * g(z_c) + annotator(x, z) + Gumbel)
//! ```
//!
//! The mechanisms are fixed random maps drawn from `mechanism_seed`, so the
//! exact posterior `P(Y | x)` can be approximated by Monte Carlo over the
//! latents and used as an accuracy oracle.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, LabelFlipper};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseScales {
    /// Scale of the content-block noise (active and inactive blocks).
    pub content: f64,
    pub style: f64,
    /// Standard deviation of the feature noise in logit space.
    pub features: f64,
    /// Gumbel scale of the annotation noise.
    pub annotation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmConfig {
    pub num_classes: usize,
    pub content_dim_per_class: usize,
    pub style_dim: usize,
    /// Feature grid `(height, width)`; the feature dimension is their product.
    pub grid: [usize; 2],
    pub mechanism_seed: u64,
    pub label_prior: Vec<f64>,
    pub noise_scales: NoiseScales,
    /// Typical magnitude of the active content block mean.
    pub active_mean: f64,
    pub hidden_dim: usize,
    /// Gain of the feature mixing map.
    pub mixing_gain: f64,
    /// Weight of the content evidence in the annotator's scores; controls the noise rate.
    pub annotation_bias: f64,
    /// Weight of the nonlinear annotator term; controls how instance-dependent the noise is.
    pub annotation_strength: f64,
}

/// Annotation bias that puts the default sandbox at a 30% noise rate,
/// found with [`calibrate_annotation_bias`] on 20,000 samples (seed 0); see
/// `examples/calibrate_sandbox.rs`.
pub const SANDBOX_DEFAULT_BIAS: f64 = 0.8949886608461384;

impl ScmConfig {
    /// Three classes, one content dimension per class, two style dimensions,
    /// a 4x4 feature grid and roughly 30% instance-dependent noise.
    pub fn sandbox_default() -> Self {
        ScmConfig {
            num_classes: 3,
            content_dim_per_class: 1,
            style_dim: 2,
            grid: [4, 4],
            mechanism_seed: 20_240_611,
            label_prior: vec![1.0 / 3.0; 3],
            noise_scales: NoiseScales { content: 1.0, style: 1.0, features: 0.5, annotation: 1.0 },
            active_mean: 3.0,
            hidden_dim: 24,
            mixing_gain: 2.0,
            annotation_bias: SANDBOX_DEFAULT_BIAS,
            annotation_strength: 2.0,
        }
    }

    /// Two classes and a 2x2 grid: small enough for exact evidence estimates.
    pub fn four_pixel() -> Self {
        ScmConfig {
            num_classes: 2,
            content_dim_per_class: 1,
            style_dim: 1,
            grid: [2, 2],
            label_prior: vec![0.5, 0.5],
            hidden_dim: 8,
            ..Self::sandbox_default()
        }
    }

    pub fn content_dim(&self) -> usize {
        self.num_classes * self.content_dim_per_class
    }

    pub fn latent_dim(&self) -> usize {
        self.content_dim() + self.style_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        [1, self.grid[0], self.grid[1]]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes == 0 || self.content_dim_per_class == 0 || self.style_dim == 0 || self.hidden_dim == 0 {
            return bad("sandbox dimensions must be positive".into());
        }
        if self.grid.iter().any(|&g| g == 0) {
            return bad("sandbox grid must be positive".into());
        }
        if self.feature_dim() <= self.latent_dim() {
            return bad(format!(
                "feature dimension {} must exceed content + style dimension {}",
                self.feature_dim(),
                self.latent_dim()
            ));
        }
        if self.label_prior.len() != self.num_classes || self.label_prior.iter().any(|&p| !(p >= 0.0)) {
            return bad("label_prior must hold one non-negative weight per class".into());
        }
        let total: f64 = self.label_prior.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("label_prior sums to {total}, expected 1"));
        }
        let s = &self.noise_scales;
        if [s.content, s.style, s.features, s.annotation].iter().any(|&v| !(v >= 0.0)) || s.features == 0.0 {
            return bad("noise scales must be non-negative and the feature noise positive".into());
        }
        Ok(())
    }
}

/// One realization of every variable in the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScmSample {
    pub clean_label: usize,
    pub content: Vec<f64>,
    pub style: Vec<f64>,
    pub features: Vec<f64>,
    pub noisy_label: usize,
}

/// Exogenous noise for one sample.
#[derive(Debug, Clone)]
pub struct Exogenous {
    pub label: f64,
    pub content: Vec<f64>,
    pub style: Vec<f64>,
    pub features: Vec<f64>,
    pub annotation: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Dense {
    weight: Vec<f64>,
    bias: Vec<f64>,
    inputs: usize,
}

impl Dense {
    fn random<R: Rng>(rng: &mut R, inputs: usize, outputs: usize, gain: f64, bias_scale: f64) -> Self {
        let scale = gain / (inputs as f64).sqrt();
        let weight = (0..inputs * outputs).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let bias = (0..outputs).map(|_| bias_scale * rng.sample::<f64, _>(StandardNormal)).collect();
        Dense { weight, bias, inputs }
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        self.bias
            .iter()
            .enumerate()
            .map(|(o, b)| b + dot(&self.weight[o * self.inputs..(o + 1) * self.inputs], input))
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// The fixed structural assignments. Each method reads only its parents.
#[derive(Debug, Clone)]
pub struct Mechanisms {
    config: ScmConfig,
    class_means: Vec<Vec<f64>>,
    mix_in: Dense,
    mix_out: Dense,
    annot_in: Dense,
    annot_out: Dense,
}

impl Mechanisms {
    pub fn new(config: &ScmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::named_rng(config.mechanism_seed, "scm.mechanisms");
        let k = config.content_dim_per_class;
        let class_means = (0..config.num_classes)
            .map(|_| (0..k).map(|_| config.active_mean * (0.8 + 0.4 * rng.random::<f64>())).collect())
            .collect();
        let mix_inputs = config.num_classes + config.latent_dim();
        let mix_in = Dense::random(&mut rng, mix_inputs, config.hidden_dim, config.mixing_gain, 0.1);
        let mix_out = Dense::random(&mut rng, config.hidden_dim, config.feature_dim(), config.mixing_gain, 0.0);
        let annot_inputs = config.feature_dim() + config.latent_dim();
        let annot_in = Dense::random(&mut rng, annot_inputs, config.hidden_dim, 2.0, 0.1);
        let annot_out = Dense::random(&mut rng, config.hidden_dim, config.num_classes, 1.0, 0.0);
        Ok(Mechanisms { config: config.clone(), class_means, mix_in, mix_out, annot_in, annot_out })
    }

    pub fn config(&self) -> &ScmConfig {
        &self.config
    }

    pub fn class_mean(&self, y: usize) -> &[f64] {
        &self.class_means[y]
    }

    /// Draws the exogenous noise of sample `index` under `seed`.
    pub fn exogenous(&self, seed: u64, index: u64) -> Exogenous {
        let c = &self.config;
        let mut rng = rng::indexed_rng(seed, index);
        let label = rng.random::<f64>();
        let content = rng::normal_vec(&mut rng, c.content_dim());
        let style = rng::normal_vec(&mut rng, c.style_dim);
        let features = rng::normal_vec(&mut rng, c.feature_dim());
        let annotation = (0..c.num_classes)
            .map(|_| {
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                -(-u.ln()).ln()
            })
            .collect();
        Exogenous { label, content, style, features, annotation }
    }

    /// `Y = eps_Y` pushed through the inverse CDF of the label prior.
    pub fn label(&self, eps: f64) -> usize {
        crate::idn::sample_categorical(&self.config.label_prior, eps)
    }

    pub fn content(&self, y: usize, eps: &[f64]) -> Vec<f64> {
        let k = self.config.content_dim_per_class;
        let scale = self.config.noise_scales.content;
        eps.iter()
            .enumerate()
            .map(|(i, e)| {
                let mean = if i / k == y { self.class_means[y][i % k] } else { 0.0 };
                mean + scale * e
            })
            .collect()
    }

    pub fn style(&self, eps: &[f64]) -> Vec<f64> {
        eps.iter().map(|e| self.config.noise_scales.style * e).collect()
    }

    /// Noise-free logit of the features; `x = sigmoid(mean + scale * eps_x)`.
    pub fn feature_logit_mean(&self, y: usize, content: &[f64], style: &[f64]) -> Vec<f64> {
        let mut input = vec![0.0; self.config.num_classes];
        input[y] = 1.0;
        input.extend_from_slice(content);
        input.extend_from_slice(style);
        let hidden: Vec<f64> = self.mix_in.apply(&input).into_iter().map(f64::tanh).collect();
        self.mix_out.apply(&hidden)
    }

    pub fn features(&self, y: usize, content: &[f64], style: &[f64], eps: &[f64]) -> Vec<f64> {
        let scale = self.config.noise_scales.features;
        self.feature_logit_mean(y, content, style)
            .iter()
            .zip(eps)
            .map(|(m, e)| sigmoid(m + scale * e))
            .collect()
    }

    /// Content evidence for each class: projection of block `j` on `mu_j`.
    pub fn content_evidence(&self, content: &[f64]) -> Vec<f64> {
        let k = self.config.content_dim_per_class;
        (0..self.config.num_classes)
            .map(|j| {
                let mean = &self.class_means[j];
                let norm = dot(mean, mean).sqrt();
                dot(&content[j * k..(j + 1) * k], mean) / norm
            })
            .collect()
    }

    /// Noise-free annotator scores. Reads only `(x, z)`.
    pub fn annotation_scores(&self, features: &[f64], content: &[f64], style: &[f64]) -> Vec<f64> {
        let mut input = features.to_vec();
        input.extend_from_slice(content);
        input.extend_from_slice(style);
        let hidden: Vec<f64> = self.annot_in.apply(&input).into_iter().map(f64::tanh).collect();
        let annotator = self.annot_out.apply(&hidden);
        self.content_evidence(content)
            .iter()
            .zip(annotator)
            .map(|(g, a)| self.config.annotation_bias * g + self.config.annotation_strength * a)
            .collect()
    }

    pub fn annotate(&self, features: &[f64], content: &[f64], style: &[f64], eps: &[f64]) -> usize {
        let scale = self.config.noise_scales.annotation;
        let scores = self.annotation_scores(features, content, style);
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (j, (s, e)) in scores.iter().zip(eps).enumerate() {
            let v = s + scale * e;
            if v > best_score {
                best = j;
                best_score = v;
            }
        }
        best
    }

    pub fn sample(&self, exo: &Exogenous) -> ScmSample {
        let clean_label = self.label(exo.label);
        let content = self.content(clean_label, &exo.content);
        let style = self.style(&exo.style);
        let features = self.features(clean_label, &content, &style, &exo.features);
        let noisy_label = self.annotate(&features, &content, &style, &exo.annotation);
        ScmSample { clean_label, content, style, features, noisy_label }
    }
}

pub fn sample_scm(config: &ScmConfig, n: usize, seed: u64) -> Result<Vec<ScmSample>> {
    if n == 0 {
        return Err(Error::Domain("sample count must be positive".into()));
    }
    let mech = Mechanisms::new(config)?;
    Ok((0..n as u64).map(|i| mech.sample(&mech.exogenous(seed, i))).collect())
}

pub fn realized_sandbox_noise_rate(samples: &[ScmSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain("cannot compute a noise rate over zero samples".into()));
    }
    let flips = samples.iter().filter(|s| s.noisy_label != s.clean_label).count();
    Ok(flips as f64 / samples.len() as f64)
}

/// Bisection on `annotation_bias` so that the realized noise rate over `n`
/// samples (fixed exogenous noise) hits `target`.
pub fn calibrate_annotation_bias(config: &ScmConfig, target: f64, n: usize, seed: u64) -> Result<f64> {
    let rate_at = |bias: f64| -> Result<f64> {
        let cfg = ScmConfig { annotation_bias: bias, ..config.clone() };
        realized_sandbox_noise_rate(&sample_scm(&cfg, n, seed)?)
    };
    let (mut lo, mut hi) = (0.0f64, 64.0f64);
    if rate_at(lo)? < target || rate_at(hi)? > target {
        return Err(Error::Config(format!("target noise rate {target} is not reachable by the annotation bias")));
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if rate_at(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Monte Carlo posterior `P(Y | x)` under the known mechanisms, with `draws`
/// prior latent draws per class shared across all evaluated samples.
pub fn bayes_posteriors(config: &ScmConfig, samples: &[ScmSample], draws: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mech = Mechanisms::new(config)?;
    let c = config.num_classes;
    let m = config.feature_dim();
    let scale = config.noise_scales.features;
    let mut rng = rng::named_rng(seed, "scm.bayes");
    let mut means = Vec::with_capacity(c);
    for y in 0..c {
        let mut block = Vec::with_capacity(draws * m);
        for _ in 0..draws {
            let content = mech.content(y, &rng::normal_vec(&mut rng, config.content_dim()));
            let style = mech.style(&rng::normal_vec(&mut rng, config.style_dim));
            block.extend(mech.feature_logit_mean(y, &content, &style));
        }
        means.push(block);
    }
    let mut out = Vec::with_capacity(samples.len());
    let mut terms = vec![0f64; draws];
    for s in samples {
        let logit: Vec<f64> = s
            .features
            .iter()
            .map(|&v| {
                let v = v.clamp(1e-12, 1.0 - 1e-12);
                (v / (1.0 - v)).ln()
            })
            .collect();
        let mut log_post = Vec::with_capacity(c);
        for y in 0..c {
            for (d, t) in terms.iter_mut().enumerate() {
                let mu = &means[y][d * m..(d + 1) * m];
                let sq: f64 = logit.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                *t = -0.5 * sq / (scale * scale);
            }
            log_post.push(config.label_prior[y].ln() + log_sum_exp(&terms));
        }
        let norm = log_sum_exp(&log_post);
        out.push(log_post.iter().map(|l| (l - norm).exp()).collect());
    }
    Ok(out)
}

/// Accuracy of the Monte Carlo Bayes classifier against the clean labels.
pub fn bayes_accuracy(config: &ScmConfig, samples: &[ScmSample], draws: usize, seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain("bayes_accuracy needs at least one sample".into()));
    }
    let posts = bayes_posteriors(config, samples, draws, seed)?;
    let correct = posts.iter().zip(samples).filter(|(p, s)| argmax(p) == s.clean_label).count();
    Ok(correct as f64 / samples.len() as f64)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn samples_to_provenance(samples: &[ScmSample]) -> serde_json::Value {
    serde_json::json!({
        "clean_labels": samples.iter().map(|s| s.clean_label).collect::<Vec<_>>(),
        "noisy_labels": samples.iter().map(|s| s.noisy_label).collect::<Vec<_>>(),
        "content": samples.iter().map(|s| &s.content).collect::<Vec<_>>(),
        "style": samples.iter().map(|s| &s.style).collect::<Vec<_>>(),
    })
}

/// Attaches the annotator labels sampled with a sandbox bundle.
pub struct SandboxFlipper {
    clean: Vec<usize>,
    noisy: Vec<usize>,
}

impl SandboxFlipper {
    pub fn from_bundle(bundle: &DatasetBundle) -> Result<Self> {
        let record = bundle
            .provenance
            .get("scm_train")
            .ok_or_else(|| Error::Config("bundle carries no sandbox annotations".into()))?;
        let labels = |key: &str| -> Result<Vec<usize>> {
            serde_json::from_value(record[key].clone())
                .map_err(|e| Error::Config(format!("bad sandbox provenance field {key}: {e}")))
        };
        Ok(SandboxFlipper { clean: labels("clean_labels")?, noisy: labels("noisy_labels")? })
    }

    /// Noise rate of the stored annotations.
    pub fn rate(&self) -> f64 {
        let flips = self.clean.iter().zip(&self.noisy).filter(|(c, n)| c != n).count();
        flips as f64 / self.clean.len().max(1) as f64
    }
}

impl LabelFlipper for SandboxFlipper {
    fn flip(&self, _features: &[f32], clean_label: usize, index: u64) -> Result<usize> {
        let i = index as usize;
        match (self.clean.get(i), self.noisy.get(i)) {
            (Some(&c), Some(&n)) if c == clean_label => Ok(n),
            _ => Err(Error::Contract(format!("no sandbox annotation for train example {index}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ScmConfig::sandbox_default().validate().unwrap();
        ScmConfig::four_pixel().validate().unwrap();
        let mut bad = ScmConfig::sandbox_default();
        bad.grid = [2, 2];
        assert!(bad.validate().is_err());
        let mut bad = ScmConfig::sandbox_default();
        bad.label_prior = vec![0.5, 0.3, 0.3];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_finite() {
        let cfg = ScmConfig::sandbox_default();
        let a = sample_scm(&cfg, 50, 4).unwrap();
        let b = sample_scm(&cfg, 50, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_scm(&cfg, 50, 5).unwrap());
        for s in &a {
            assert!(s.features.iter().chain(&s.content).chain(&s.style).all(|v| v.is_finite()));
            assert!(s.features.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.clean_label < 3 && s.noisy_label < 3);
        }
    }

    #[test]
    fn noiseless_annotator_limit_copies_the_clean_label() {
        let mut cfg = ScmConfig::sandbox_default();
        cfg.noise_scales.annotation = 0.0;
        cfg.noise_scales.content = 1e-3;
        cfg.annotation_bias = 1e9;
        let samples = sample_scm(&cfg, 2000, 1).unwrap();
        assert!(samples.iter().all(|s| s.noisy_label == s.clean_label));
        assert_eq!(realized_sandbox_noise_rate(&samples).unwrap(), 0.0);
    }

    #[test]
    fn noise_rate_counts_flips() {
        let mut s = sample_scm(&ScmConfig::sandbox_default(), 4, 0).unwrap();
        for x in s.iter_mut() {
            x.noisy_label = x.clean_label;
        }
        assert_eq!(realized_sandbox_noise_rate(&s).unwrap(), 0.0);
        s[0].noisy_label = (s[0].clean_label + 1) % 3;
        s[1].noisy_label = (s[1].clean_label + 2) % 3;
        assert_eq!(realized_sandbox_noise_rate(&s).unwrap(), 0.5);
        assert!(matches!(realized_sandbox_noise_rate(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn annotation_ignores_the_clean_label() {
        // Same (x, z, eps) under different Y: the annotator cannot tell.
        let cfg = ScmConfig::sandbox_default();
        let mech = Mechanisms::new(&cfg).unwrap();
        let exo = mech.exogenous(3, 0);
        let content = mech.content(0, &exo.content);
        let style = mech.style(&exo.style);
        let x0 = mech.features(0, &content, &style, &exo.features);
        let x1 = mech.features(1, &content, &style, &exo.features);
        assert_ne!(x0, x1, "features depend on Y");
        let a = mech.annotate(&x0, &content, &style, &exo.annotation);
        assert_eq!(a, mech.annotate(&x0, &content, &style, &exo.annotation));
        // content depends on Y only through its own block
        let c2 = mech.content(2, &exo.content);
        assert_eq!(content[1], c2[1]);
        assert_ne!(content[0], c2[0]);
    }

    #[test]
    fn sandbox_flipper_reproduces_annotations() {
        let bundle = crate::data::sandbox_bundle(&ScmConfig::sandbox_default(), 40, 10, 2).unwrap();
        let flipper = SandboxFlipper::from_bundle(&bundle).unwrap();
        let samples = sample_scm(&ScmConfig::sandbox_default(), 40, rng::substream(2, "sandbox.train")).unwrap();
        for (ex, s) in bundle.train.iter().zip(&samples) {
            assert_eq!(flipper.flip(&ex.features, s.clean_label, ex.index).unwrap(), s.noisy_label);
        }
        assert!(flipper.flip(&[], 0, 10_000).is_err());
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let v = [0.1, -2.0, 3.0];
        let direct = v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v) - direct).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
