//! One branch of the two-branch model: clean-label classifier `q(Y|x)`,
//! latent encoder `q(z|Y,x)`, reconstruction decoder `p(x|Y,z_c)` and
//! noisy-label decoder `p(Y~|x_hat,z)`, plus the class-conditional content
//! prior.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::error::{Error, Result};
use crate::nn::{Backbone, Init, Linear, Mlp, ParamStore, Trunk};
use crate::rng;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

const BRANCH_KIND: &str = "reidvae.branch";
const CLASSIFIER_KIND: &str = "classifier";

/// Per-channel input standardization applied in front of the trunks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn identity(channels: usize) -> Self {
        InputNorm { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Channel statistics of `features` laid out as `(n, channels, h*w)`.
    pub fn fit<'a>(features: impl Iterator<Item = &'a [f32]>, channels: usize) -> Self {
        let mut sum = vec![0f64; channels];
        let mut sq = vec![0f64; channels];
        let mut count = 0usize;
        for f in features {
            let per = f.len() / channels;
            for (c, chunk) in f.chunks_exact(per).enumerate() {
                for &v in chunk {
                    sum[c] += f64::from(v);
                    sq[c] += f64::from(v) * f64::from(v);
                }
            }
            count += per;
        }
        if count == 0 {
            return Self::identity(channels);
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| (s / n - m * m).max(1e-12).sqrt()).collect();
        InputNorm { mean, std }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.mean.len();
        let mean = Tensor::from_vec(self.mean.clone(), (1, c, 1, 1), x.device())?.to_dtype(x.dtype())?;
        let inv: Vec<f64> = self.std.iter().map(|s| 1.0 / s).collect();
        let inv = Tensor::from_vec(inv, (1, c, 1, 1), x.device())?.to_dtype(x.dtype())?;
        Ok(x.broadcast_sub(&mean)?.broadcast_mul(&inv)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Likelihood {
    /// Independent per-pixel Gaussians with fixed standard deviation.
    Gaussian { std: f64 },
    /// Independent per-pixel Bernoullis, for binarized inputs.
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub active_mean: f64,
    pub active_log_var: f64,
    /// Learn one active mean per class, initialized at `active_mean`.
    pub learned_mean: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { active_mean: 3.0, active_log_var: 0.0, learned_mean: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub num_classes: usize,
    pub content_dim_per_class: usize,
    pub style_dim: usize,
    pub feature_shape: [usize; 3],
    pub backbone: Backbone,
    pub encoder_hidden: usize,
    pub decoder_hidden: Vec<usize>,
    pub noisy_decoder_hidden: Vec<usize>,
    #[serde(default)]
    pub zero_init_heads: bool,
    pub likelihood: Likelihood,
    /// Block gradients from the noisy-label decoder into `x_hat`.
    #[serde(default)]
    pub stop_grad_xhat: bool,
    #[serde(default)]
    pub prior: PriorConfig,
    pub input_norm: InputNorm,
}

impl ArchConfig {
    /// Small fully connected model used by tests and the sandbox.
    pub fn tiny(num_classes: usize, feature_shape: [usize; 3]) -> Self {
        ArchConfig {
            num_classes,
            content_dim_per_class: 1,
            style_dim: 2,
            feature_shape,
            backbone: Backbone::Mlp { hidden: vec![32] },
            encoder_hidden: 32,
            decoder_hidden: vec![32],
            noisy_decoder_hidden: vec![16],
            zero_init_heads: false,
            likelihood: Likelihood::Gaussian { std: 0.1 },
            stop_grad_xhat: false,
            prior: PriorConfig::default(),
            input_norm: InputNorm::identity(feature_shape[0]),
        }
    }

    pub fn content_dim(&self) -> usize {
        self.num_classes * self.content_dim_per_class
    }

    pub fn latent_dim(&self) -> usize {
        self.content_dim() + self.style_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.content_dim_per_class == 0 || self.feature_dim() == 0 {
            return Err(Error::Config("num_classes, content_dim_per_class and feature_shape must be positive".into()));
        }
        if self.encoder_hidden == 0 || self.decoder_hidden.contains(&0) || self.noisy_decoder_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if let Likelihood::Gaussian { std } = self.likelihood {
            if !(std > 0.0 && std.is_finite()) {
                return Err(Error::Config(format!("likelihood std must be positive, got {std}")));
            }
        }
        let c = self.feature_shape[0];
        if self.input_norm.mean.len() != c || self.input_norm.std.len() != c || self.input_norm.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("input_norm must hold one positive std per channel".into()));
        }
        self.backbone.validate()
    }
}

/// Diagonal Gaussian over the rows of `mean`; log-variances are clamped to
/// `[LOG_VAR_MIN, LOG_VAR_MAX]` on construction.
#[derive(Debug, Clone)]
pub struct DiagonalGaussian {
    pub mean: Tensor,
    pub log_var: Tensor,
}

impl DiagonalGaussian {
    pub fn new(mean: Tensor, log_var: Tensor) -> Result<Self> {
        if mean.dims() != log_var.dims() {
            return Err(Error::Domain(format!("mean {:?} and log-variance {:?} differ in shape", mean.dims(), log_var.dims())));
        }
        let log_var = log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(DiagonalGaussian { mean, log_var })
    }

    pub fn standard(rows: usize, dim: usize, dtype: DType) -> Result<Self> {
        let z = Tensor::zeros((rows, dim), dtype, &Device::Cpu)?;
        Self::new(z.clone(), z)
    }

    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(DiagonalGaussian { mean: self.mean.narrow(D::Minus1, start, len)?, log_var: self.log_var.narrow(D::Minus1, start, len)? })
    }
}

/// Standard normal noise from a seeded stream, shaped like `like`.
pub fn standard_normal_like(like: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = rng::named_rng(seed, "reparam");
    let eps = rng::normal_vec(&mut rng, like.elem_count());
    Ok(Tensor::from_vec(eps, like.shape(), like.device())?.to_dtype(like.dtype())?)
}

/// `mean + exp(log_var / 2) * eps`.
pub fn reparameterize_with(g: &DiagonalGaussian, eps: &Tensor) -> Result<Tensor> {
    Ok((&g.mean + (g.log_var.affine(0.5, 0.0)?.exp()? * eps)?)?)
}

pub fn reparameterize(g: &DiagonalGaussian, seed: u64) -> Result<Tensor> {
    reparameterize_with(g, &standard_normal_like(&g.mean, seed)?)
}

/// Partitioned latent: `content` is `(n, C*k)`, `style` is `(n, d)`.
#[derive(Debug, Clone)]
pub struct LatentCode {
    pub content: Tensor,
    pub style: Tensor,
    pub block_size: usize,
}

impl LatentCode {
    pub fn split(z: &Tensor, content_dim: usize, block_size: usize) -> Result<Self> {
        let total = z.dim(D::Minus1)?;
        Ok(LatentCode {
            content: z.narrow(D::Minus1, 0, content_dim)?,
            style: z.narrow(D::Minus1, content_dim, total - content_dim)?,
            block_size,
        })
    }

    /// Block `i` of the content code: columns `i*k .. (i+1)*k`.
    pub fn block(&self, i: usize) -> Result<Tensor> {
        Ok(self.content.narrow(D::Minus1, i * self.block_size, self.block_size)?)
    }

    pub fn joined(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.content, &self.style], D::Minus1)?)
    }
}

/// Class-conditional content prior: block `y` is `N(mu_y, exp(active_log_var))`,
/// every other block is standard normal.
#[derive(Debug, Clone)]
pub struct ContentPrior {
    pub active_mean: f64,
    pub active_log_var: f64,
    learned: Option<Var>,
    num_classes: usize,
    block_size: usize,
}

impl ContentPrior {
    pub fn fixed(num_classes: usize, block_size: usize, active_mean: f64, active_log_var: f64) -> Self {
        ContentPrior { active_mean, active_log_var, learned: None, num_classes, block_size }
    }

    /// Per-class active means for every content coordinate given one-hot
    /// class rows `(n, C)`; result is `(n, C*k)`.
    pub fn mean_rows(&self, one_hot: &Tensor) -> Result<Tensor> {
        let scaled = match &self.learned {
            Some(mu) => one_hot.broadcast_mul(&mu.as_tensor().unsqueeze(0)?)?,
            None => one_hot.affine(self.active_mean, 0.0)?,
        };
        expand_blocks(&scaled, self.block_size)
    }

    pub fn class_mean(&self, y: usize) -> Result<f64> {
        match &self.learned {
            Some(mu) => Ok(mu.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?[y]),
            None => Ok(self.active_mean),
        }
    }

    /// `sum_i log p(z_c^i | y)` for a single code.
    pub fn log_density(&self, z_c: &[f64], y: usize) -> Result<f64> {
        if z_c.len() != self.num_classes * self.block_size || y >= self.num_classes {
            return Err(Error::Domain("content code or class out of range".into()));
        }
        let mu = self.class_mean(y)?;
        let var = self.active_log_var.exp();
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        Ok(z_c
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                if j / self.block_size == y {
                    -half_log_2pi - 0.5 * self.active_log_var - 0.5 * (v - mu).powi(2) / var
                } else {
                    -half_log_2pi - 0.5 * v * v
                }
            })
            .sum())
    }
}

/// Repeats each column of `(n, C)` `k` times: `(n, C*k)`.
fn expand_blocks(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 1 {
        return Ok(x.clone());
    }
    let (n, c) = x.dims2()?;
    Ok(x.unsqueeze(2)?.broadcast_as((n, c, k))?.reshape((n, c * k))?)
}

/// Numerically stable log-softmax over the last dimension.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn one_hot(labels: &[usize], num_classes: usize, dtype: DType) -> Result<Tensor> {
    let mut v = vec![0f64; labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Domain(format!("label {y} out of range for {num_classes} classes")));
        }
        v[i * num_classes + y] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), num_classes), &Device::Cpu)?.to_dtype(dtype)?)
}

pub(crate) fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let rows = t.to_dtype(DType::F64)?.flatten_from(1)?.to_vec2::<f64>()?;
    if let Some(i) = rows.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::numerical(what, format!("non-finite value at batch index {i}")));
    }
    Ok(())
}

/// Trunk plus linear head producing class logits. Used as `q(Y|x)` inside a
/// branch and on its own by the baselines.
#[derive(Debug, Clone)]
pub struct Classifier {
    trunk: Trunk,
    head: Linear,
    norm: InputNorm,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, prefix: &str, arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let trunk = Trunk::new(store, &format!("{prefix}trunk"), &arch.backbone, arch.feature_shape, rng)?;
        let head = Linear::new(store, &format!("{prefix}head"), arch.backbone.output_dim(), arch.num_classes, arch.zero_init_heads, rng)?;
        Ok(Classifier { trunk, head, norm: arch.input_norm.clone() })
    }

    /// Logits `(n, C)`; errors on the first non-finite row.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.head.forward(&self.trunk.forward(&self.norm.apply(x)?)?)?;
        check_finite(&logits, "classifier logits")?;
        Ok(logits)
    }

    pub fn log_probs(&self, x: &Tensor) -> Result<Tensor> {
        log_softmax(&self.logits(x)?)
    }

    pub fn probs(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.log_probs(x)?.exp()?)
    }
}

/// Anything that can produce a reconstruction from a class and a full
/// latent code. The branch implementation only looks at the content part.
pub trait Reconstructor {
    fn reconstruct_from_latent(&self, y: &[usize], latent: &LatentCode) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct Branch {
    arch: ArchConfig,
    store: ParamStore,
    classifier: Classifier,
    encoder_trunk: Trunk,
    encoder_head: Mlp,
    recon_decoder: Mlp,
    noisy_decoder: Mlp,
    prior: ContentPrior,
    step: u64,
}

impl Branch {
    pub fn new(arch: &ArchConfig, dtype: DType, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = rng::named_rng(seed, "init");
        let classifier = Classifier::new(&mut store, "classifier/", arch, &mut rng)?;
        let encoder_trunk = Trunk::new(&mut store, "latent_encoder/trunk", &arch.backbone, arch.feature_shape, &mut rng)?;
        let c = arch.num_classes;
        let encoder_head = Mlp::new(
            &mut store,
            "latent_encoder/head",
            &[arch.backbone.output_dim() + c, arch.encoder_hidden, 2 * arch.latent_dim()],
            false,
            &mut rng,
        )?;
        let mut widths = vec![c + arch.content_dim()];
        widths.extend(&arch.decoder_hidden);
        widths.push(arch.feature_dim());
        let recon_decoder = Mlp::new(&mut store, "recon_decoder/mlp", &widths, false, &mut rng)?;
        let mut widths = vec![arch.feature_dim() + arch.latent_dim()];
        widths.extend(&arch.noisy_decoder_hidden);
        widths.push(c);
        let noisy_decoder = Mlp::new(&mut store, "noisy_decoder/mlp", &widths, arch.zero_init_heads, &mut rng)?;
        let mut prior = ContentPrior::fixed(c, arch.content_dim_per_class, arch.prior.active_mean, arch.prior.active_log_var);
        if arch.prior.learned_mean {
            prior.learned = Some(store.create("prior/active_mean", &[c], Init::Constant(arch.prior.active_mean), &mut rng)?);
        }
        Ok(Branch {
            arch: arch.clone(),
            store,
            classifier,
            encoder_trunk,
            encoder_head,
            recon_decoder,
            noisy_decoder,
            prior,
            step: 0,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn prior(&self) -> &ContentPrior {
        &self.prior
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// `q(Y|x)` as probabilities `(n, C)`.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        self.classifier.probs(x)
    }

    /// Trunk features of the latent encoder, shared across candidate classes.
    pub fn encoder_features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encoder_trunk.forward(&self.classifier.norm.apply(x)?)?)
    }

    /// `q(z|y,x)` from precomputed trunk features `(n, H)` and one-hot rows `(n, C)`.
    pub fn encode_from_features(&self, features: &Tensor, one_hot: &Tensor) -> Result<DiagonalGaussian> {
        let out = self.encoder_head.forward(&Tensor::cat(&[features, one_hot], D::Minus1)?)?;
        check_finite(&out, "latent encoder")?;
        let l = self.arch.latent_dim();
        // The head predicts the content mean as an offset from the class prior
        // mean, so every candidate class starts with the same KL.
        let offset = self.prior.mean_rows(one_hot)?;
        let cd = offset.dim(D::Minus1)?;
        let content = (out.narrow(D::Minus1, 0, cd)? + offset)?;
        let mean = if cd < l { Tensor::cat(&[&content, &out.narrow(D::Minus1, cd, l - cd)?], D::Minus1)? } else { content };
        DiagonalGaussian::new(mean, out.narrow(D::Minus1, l, l)?)
    }

    /// `q(z|y,x)` with one class per row of `x`.
    pub fn encode_latent(&self, x: &Tensor, y: &[usize]) -> Result<DiagonalGaussian> {
        let oh = one_hot(y, self.arch.num_classes, self.dtype())?;
        self.encode_from_features(&self.encoder_features(x)?, &oh)
    }

    /// Decoder logits `(n, m)` from one-hot class rows and content codes.
    pub fn reconstruct_logits(&self, one_hot: &Tensor, z_c: &Tensor) -> Result<Tensor> {
        self.recon_decoder.forward(&Tensor::cat(&[one_hot, z_c], D::Minus1)?)
    }

    /// `p(x|y,z_c)` mean in `[0,1]`, shaped `(n, channels, height, width)`.
    /// There is no style argument.
    pub fn reconstruct(&self, y: &[usize], z_c: &Tensor) -> Result<Tensor> {
        let oh = one_hot(y, self.arch.num_classes, self.dtype())?;
        let flat = candle_nn::ops::sigmoid(&self.reconstruct_logits(&oh, z_c)?)?;
        let [c, h, w] = self.arch.feature_shape;
        Ok(flat.reshape((y.len(), c, h, w))?)
    }

    /// Log-probabilities of `p(Y~|x_hat, z)` for flattened `x_hat` `(n, m)` and full codes `(n, C*k+d)`.
    pub fn noisy_label_log_probs(&self, x_hat: &Tensor, z: &Tensor) -> Result<Tensor> {
        let x_hat = if self.arch.stop_grad_xhat { x_hat.detach() } else { x_hat.clone() };
        let logits = self.noisy_decoder.forward(&Tensor::cat(&[&x_hat, z], D::Minus1)?)?;
        check_finite(&logits, "noisy-label decoder")?;
        log_softmax(&logits)
    }

    pub fn decode_noisy_label(&self, x_hat: &Tensor, latent: &LatentCode) -> Result<Tensor> {
        let flat = x_hat.flatten_from(1)?;
        Ok(self.noisy_label_log_probs(&flat, &latent.joined()?)?.exp()?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, BRANCH_KIND, self.step, serde_json::to_value(&self.arch)?, &self.store)
    }

    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let ckpt = read_checkpoint(path)?;
        if ckpt.kind != BRANCH_KIND {
            return Err(Error::ingestion(path, format!("expected a branch checkpoint, found {}", ckpt.kind)));
        }
        let arch: ArchConfig = serde_json::from_value(ckpt.payload.clone())?;
        let mut branch = Branch::new(&arch, dtype, 0)?;
        ckpt.restore_into(&branch.store)?;
        branch.step = ckpt.step;
        Ok(branch)
    }
}

impl Reconstructor for Branch {
    fn reconstruct_from_latent(&self, y: &[usize], latent: &LatentCode) -> Result<Tensor> {
        self.reconstruct(y, &latent.content)
    }
}

/// A classifier with its own parameter store (baseline networks).
#[derive(Debug, Clone)]
pub struct StandaloneClassifier {
    arch: ArchConfig,
    store: ParamStore,
    net: Classifier,
    step: u64,
}

impl StandaloneClassifier {
    /// Uses the same initialization stream as a branch built from `seed`, so
    /// the network starts from the branch classifier's weights.
    pub fn new(arch: &ArchConfig, dtype: DType, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = rng::named_rng(seed, "init");
        let net = Classifier::new(&mut store, "classifier/", arch, &mut rng)?;
        Ok(StandaloneClassifier { arch: arch.clone(), store, net, step: 0 })
    }

    pub fn net(&self) -> &Classifier {
        &self.net
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, CLASSIFIER_KIND, self.step, serde_json::to_value(&self.arch)?, &self.store)
    }

    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let ckpt = read_checkpoint(path)?;
        if ckpt.kind != CLASSIFIER_KIND {
            return Err(Error::ingestion(path, format!("expected a classifier checkpoint, found {}", ckpt.kind)));
        }
        let arch: ArchConfig = serde_json::from_value(ckpt.payload.clone())?;
        let mut model = StandaloneClassifier::new(&arch, dtype, 0)?;
        ckpt.restore_into(&model.store)?;
        model.step = ckpt.step;
        Ok(model)
    }
}

/// Either kind of trained network, for prediction.
pub trait ClassProbs {
    fn class_probs(&self, x: &Tensor) -> Result<Tensor>;
}

impl ClassProbs for Branch {
    fn class_probs(&self, x: &Tensor) -> Result<Tensor> {
        self.classify(x)
    }
}

impl ClassProbs for StandaloneClassifier {
    fn class_probs(&self, x: &Tensor) -> Result<Tensor> {
        self.net.probs(x)
    }
}
