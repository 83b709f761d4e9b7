//! Helpers shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reidvae::data::{apply_noise, load_dataset_at, sandbox_bundle, DatasetBundle, NoiseFamily, NoiseSpec, DATA_ROOT_ENV};
use reidvae::idn::{sample_categorical, IdnGeneratorState, DEFAULT_RATE_STD};
use reidvae::model::{one_hot, ArchConfig, Branch, Likelihood};
use reidvae::nn::Backbone;
use reidvae::objective::{elbo, total_loss, ElboConfig};
use reidvae::rng;
use reidvae::scm::{SandboxFlipper, ScmConfig};
use reidvae::trainer::{self, features_tensor, NoObserver, TrainConfig};

/// Data root from the environment, else the workspace `data/` directory.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data"))
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// Finite differences

const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms; the
/// central-difference truncation and rounding error is a few 1e-10 here.
const DENOMINATOR_FLOOR: f64 = 1e-5;

pub fn tiny_arch(backbone: Backbone, feature_shape: [usize; 3], likelihood: Likelihood) -> ArchConfig {
    ArchConfig {
        backbone,
        encoder_hidden: 8,
        decoder_hidden: vec![8],
        noisy_decoder_hidden: vec![8],
        likelihood,
        ..ArchConfig::tiny(3, feature_shape)
    }
}

fn inputs(shape: [usize; 3], n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..n * shape.iter().product::<usize>()).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(v, (n, shape[0], shape[1], shape[2]), &Device::Cpu).unwrap()
}

fn loss(b1: &Branch, b2: &Branch, x: &Tensor, y: &[usize]) -> Tensor {
    let t = total_loss(b1, b2, x, y, 0.7, 0.5, 42, &ElboConfig::default()).unwrap();
    (t.loss1 + t.loss2).unwrap()
}

fn value(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn set_entry(var: &Var, flat: usize, v: f64) {
    let shape = var.shape().clone();
    let mut data = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    data[flat] = v;
    var.set(&Tensor::from_vec(data, shape, &Device::Cpu).unwrap()).unwrap();
}

/// Returns the worst relative error over `probes` random parameter entries.
pub fn check_gradients(arch: &ArchConfig, probes: usize, seed: u64) -> (f64, usize) {
    let b1 = Branch::new(arch, DType::F64, seed).unwrap();
    let b2 = Branch::new(arch, DType::F64, seed + 1).unwrap();
    let x = inputs(arch.feature_shape, 6, seed);
    let y = [0, 1, 2, 2, 1, 0];
    let grads = loss(&b1, &b2, &x, &y).backward().unwrap();

    let vars: Vec<(String, Var)> = b1
        .store()
        .iter()
        .map(|(k, v)| (format!("b1/{k}"), v.clone()))
        .chain(b2.store().iter().map(|(k, v)| (format!("b2/{k}"), v.clone())))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let mut worst = 0f64;
    let mut nonzero = 0;
    for _ in 0..probes {
        let (name, var) = &vars[rng.random_range(0..vars.len())];
        let flat = rng.random_range(0..var.elem_count());
        let analytic = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[flat])
            .unwrap_or(0.0);
        let orig = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[flat];
        set_entry(var, flat, orig + STEP);
        let up = value(&loss(&b1, &b2, &x, &y));
        set_entry(var, flat, orig - STEP);
        let down = value(&loss(&b1, &b2, &x, &y));
        set_entry(var, flat, orig);
        let numeric = (up - down) / (2.0 * STEP);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR);
        assert!(rel < 1e-4, "{name}[{flat}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}");
        if analytic.abs() > DENOMINATOR_FLOOR {
            nonzero += 1;
        }
        worst = worst.max(rel);
    }
    (worst, nonzero)
}


// ELBO against importance-sampled evidence

const PROPOSALS: usize = 100_000;
const CHUNK: usize = 20_000;
const EXAMPLES: usize = 6;

fn log_mean_exp(v: &[f64]) -> (f64, f64) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // Delta-method standard error of log(mean w).
    (m + mean.ln(), (var / n).sqrt() / mean)
}

fn log_normal(v: f64, mean: f64, log_var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI).ln() + log_var + (v - mean).powi(2) / log_var.exp())
}

/// Log importance weights for one input and one class, `q(z|y,x)` as proposal.
fn log_weights(branch: &Branch, x: &[f64], noisy: usize, y: usize, seed: u64) -> Vec<f64> {
    let arch = branch.arch();
    let (c, k, l) = (arch.num_classes, arch.content_dim_per_class, arch.latent_dim());
    let cd = c * k;
    let shape = arch.feature_shape;
    let xt = Tensor::from_vec(x.to_vec(), (1, shape[0], shape[1], shape[2]), &Device::Cpu).unwrap();
    let g = branch.encode_latent(&xt, &[y]).unwrap();
    let mean = g.mean.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let log_var = g.log_var.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let prior = branch.prior();
    let mu_y = prior.class_mean(y).unwrap();
    let std = match arch.likelihood {
        Likelihood::Gaussian { std } => std,
        Likelihood::Bernoulli => panic!("test model uses a Gaussian likelihood"),
    };

    let mut rng = rng::named_rng(seed, &format!("is.{y}"));
    let mut out = Vec::with_capacity(PROPOSALS);
    for _ in 0..PROPOSALS / CHUNK {
        let eps = rng::normal_vec(&mut rng, CHUNK * l);
        let z: Vec<f64> = eps.iter().enumerate().map(|(i, e)| mean[i % l] + (0.5 * log_var[i % l]).exp() * e).collect();
        let zt = Tensor::from_vec(z.clone(), (CHUNK, l), &Device::Cpu).unwrap();
        let oh = one_hot(&vec![y; CHUNK], c, DType::F64).unwrap();
        let x_hat = candle_nn::ops::sigmoid(&branch.reconstruct_logits(&oh, &zt.narrow(1, 0, cd).unwrap()).unwrap()).unwrap();
        let nl = branch.noisy_label_log_probs(&x_hat, &zt).unwrap().to_vec2::<f64>().unwrap();
        let x_hat = x_hat.to_vec2::<f64>().unwrap();
        for s in 0..CHUNK {
            let zs = &z[s * l..(s + 1) * l];
            let log_px: f64 = x.iter().zip(&x_hat[s]).map(|(&a, &b)| log_normal(a, b, 2.0 * std.ln())).sum();
            let log_pz: f64 = zs
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    if j < cd && j / k == y {
                        log_normal(v, mu_y, prior.active_log_var)
                    } else {
                        log_normal(v, 0.0, 0.0)
                    }
                })
                .sum();
            let log_q: f64 = zs.iter().enumerate().map(|(j, &v)| log_normal(v, mean[j], log_var[j])).sum();
            out.push(log_px + nl[s][noisy] + log_pz - log_q);
        }
    }
    out
}


/// One example's ELBO and evidence estimates with their standard errors.
#[derive(Debug, Clone, Copy)]
pub struct EvidenceGap {
    pub elbo: f64,
    pub elbo_se: f64,
    pub evidence: f64,
    pub evidence_se: f64,
}

impl EvidenceGap {
    pub fn gap(&self) -> f64 {
        self.evidence - self.elbo
    }

    pub fn sigma(&self) -> f64 {
        (self.elbo_se.powi(2) + self.evidence_se.powi(2)).sqrt()
    }

    /// ELBO at most the evidence, up to three combined standard errors.
    pub fn holds(&self) -> bool {
        self.elbo <= self.evidence + 3.0 * self.sigma()
    }
}

/// Trains a tiny model briefly on the four-pixel sandbox, freezes it in f64
/// and compares per-example ELBO with the evidence estimate.
pub fn four_pixel_evidence_gaps(seed: u64) -> Vec<EvidenceGap> {
    let config = ScmConfig::four_pixel();
    let clean = sandbox_bundle(&config, 512, 64, seed).unwrap();
    let spec = NoiseSpec::new(NoiseFamily::Idn, 0.3, rng::substream(seed, "noise")).unwrap();
    let bundle = apply_noise(&clean, &spec, &SandboxFlipper::from_bundle(&clean).unwrap()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig { batch_size: 32, warmup_epochs: 1, ..TrainConfig::tiny(3, seed) };
    cfg.model.backbone = Backbone::Mlp { hidden: vec![16] };
    cfg.model.style_dim = 1;
    cfg.checkpoint_dir = Some(dir.path().to_path_buf());
    let out = trainer::train(&bundle.training_view(), &cfg, &mut NoObserver).unwrap();
    let branch = Branch::load(&out.report.checkpoints[0], DType::F64).unwrap();
    evidence_gaps(&branch, &bundle)
}

fn evidence_gaps(branch: &Branch, bundle: &DatasetBundle) -> Vec<EvidenceGap> {
    let c = branch.arch().num_classes;
    let examples = &bundle.train[..EXAMPLES];
    let x = features_tensor(examples.iter().map(|e| e.features.as_slice()), bundle.feature_shape, DType::F64).unwrap();
    let noisy: Vec<usize> = examples.iter().map(|e| e.noisy_label).collect();

    // Expected ELBO per example, averaged over independent reparameterization seeds.
    let runs = 20;
    let cfg = ElboConfig { samples: 500, ..ElboConfig::default() };
    let per_run: Vec<Vec<f64>> = (0..runs)
        .map(|r| elbo(branch, branch.prior(), &x, &noisy, 1000 + r, &cfg).unwrap().per_example.to_vec1::<f64>().unwrap())
        .collect();

    let log_prior = -(c as f64).ln();
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let vals: Vec<f64> = per_run.iter().map(|r| r[i]).collect();
            let elbo = vals.iter().sum::<f64>() / runs as f64;
            let elbo_se = (vals.iter().map(|v| (v - elbo).powi(2)).sum::<f64>() / (runs as f64 - 1.0)).sqrt() / (runs as f64).sqrt();

            let xs: Vec<f64> = ex.features.iter().map(|&v| v as f64).collect();
            // log p(x, y~) = logsumexp_y [log p(y) + log E_q[w]]
            let per_class: Vec<(f64, f64)> =
                (0..c).map(|y| log_mean_exp(&log_weights(branch, &xs, ex.noisy_label, y, 99 + i as u64))).collect();
            let m = per_class.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            let terms: Vec<f64> = per_class.iter().map(|p| (p.0 - m).exp()).collect();
            let total: f64 = terms.iter().sum();
            // Relative errors of the per-class means combine in proportion to their mass.
            let evidence_se = per_class.iter().zip(&terms).map(|(p, t)| (p.1 * t / total).powi(2)).sum::<f64>().sqrt();
            EvidenceGap { elbo, elbo_se, evidence: log_prior + m + total.ln(), evidence_se }
        })
        .collect()
}

// IDN calibration

/// Realized IDN flip fraction on the FashionMNIST subset of `seed`, plus the
/// expected flip count implied by the per-instance rates.
#[derive(Debug, Clone, Copy)]
pub struct RealizedRate {
    pub seed: u64,
    pub tau: f64,
    pub rate: f64,
    pub flips: usize,
    pub expected_flips: f64,
    pub n: usize,
}

pub fn realized_idn_rates(subset: usize, seed: u64, taus: &[f64]) -> Vec<RealizedRate> {
    let clean = load_dataset_at(&data_root(), "fashion_mnist", Some(subset), seed).unwrap();
    taus.iter()
        .map(|&tau| {
            let spec = NoiseSpec::new(NoiseFamily::Idn, tau, rng::substream(seed, "noise")).unwrap();
            let generator = IdnGeneratorState::for_bundle(&clean, tau, DEFAULT_RATE_STD, spec.seed).unwrap();
            let noisy = apply_noise(&clean, &spec, &generator).unwrap();
            let access = noisy.eval_access();
            let flips = noisy.train.iter().filter(|e| Some(e.noisy_label) != access.clean_label(e)).count();
            let expected_flips = noisy
                .train
                .iter()
                .map(|e| {
                    let y = access.clean_label(e).unwrap();
                    1.0 - generator.flip_distribution(&e.features, y, e.index).unwrap()[y]
                })
                .sum();
            let n = noisy.train.len();
            RealizedRate { seed, tau, rate: flips as f64 / n as f64, flips, expected_flips, n }
        })
        .collect()
}

/// Largest total-variation distance between `draws` inverse-CDF samples and
/// the exact flip distribution, over every `stride`-th instance.
pub fn worst_flip_tv(subset: usize, tau: f64, draws: usize, stride: usize) -> f64 {
    let clean = load_dataset_at(&data_root(), "fashion_mnist", Some(subset), 0).unwrap();
    let generator = IdnGeneratorState::for_bundle(&clean, tau, DEFAULT_RATE_STD, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0f64;
    for ex in clean.train.iter().step_by(stride) {
        let y = clean.eval_access().clean_label(ex).unwrap();
        let p = generator.flip_distribution(&ex.features, y, ex.index).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut counts = vec![0usize; p.len()];
        for _ in 0..draws {
            counts[sample_categorical(&p, rng.random())] += 1;
        }
        let tv = 0.5 * p.iter().zip(&counts).map(|(a, &n)| (a - n as f64 / draws as f64).abs()).sum::<f64>();
        worst = worst.max(tv);
    }
    worst
}
