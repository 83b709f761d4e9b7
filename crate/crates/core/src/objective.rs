//! Training objective: an ELBO that enumerates the discrete label, and the
//! co-teaching cross-entropy exchanged between the two branches.
//!
//! For each candidate class `c` the bound uses `q(z|c,x)` with one
//! reparameterized sample and scores
//! `log p(x|c,z_c) + log p(y~|x_hat,z) + log p(c) - KL_content - KL_style`;
//! the per-class values are mixed with `q(c|x)` and the entropy of `q(Y|x)`
//! is added. With many classes only the top `M` classes under `q(Y|x)` are
//! kept and `q` is renormalized over them.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_softmax, one_hot, reparameterize_with, Branch, ContentPrior, DiagonalGaussian, Likelihood};
use crate::rng;

/// Allowed slack below zero for closed-form KL values.
pub const KL_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElboConfig {
    /// Reparameterized samples per candidate class.
    pub samples: usize,
    /// Enumerate every class when `C` is at most this.
    pub enumerate_limit: usize,
    /// Classes kept under truncation.
    pub top_m: usize,
}

impl Default for ElboConfig {
    fn default() -> Self {
        ElboConfig { samples: 1, enumerate_limit: 10, top_m: 10 }
    }
}

/// Batch averages of each ELBO summand.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub reconstruction_ll: f64,
    pub noisy_label_ll: f64,
    pub kl_content: f64,
    pub kl_style: f64,
    pub classifier_entropy: f64,
    pub label_prior_ll: f64,
    pub total: f64,
    /// Smallest per-row KL value seen (content or style).
    pub kl_min: f64,
    /// Average classifier mass dropped by top-M truncation.
    pub truncated_mass: f64,
}

impl ElboBreakdown {
    pub fn recomposed_total(&self) -> f64 {
        self.reconstruction_ll + self.noisy_label_ll + self.label_prior_ll - self.kl_content - self.kl_style
            + self.classifier_entropy
    }

    fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("reconstruction_ll", self.reconstruction_ll),
            ("noisy_label_ll", self.noisy_label_ll),
            ("kl_content", self.kl_content),
            ("kl_style", self.kl_style),
            ("classifier_entropy", self.classifier_entropy),
            ("label_prior_ll", self.label_prior_ll),
            ("total", self.total),
        ]
    }

    /// Running mean helper for epoch summaries.
    pub fn accumulate(&mut self, other: &ElboBreakdown, count: usize) {
        let w = 1.0 / count as f64;
        let mix = |a: &mut f64, b: f64| *a += (b - *a) * w;
        mix(&mut self.reconstruction_ll, other.reconstruction_ll);
        mix(&mut self.noisy_label_ll, other.noisy_label_ll);
        mix(&mut self.kl_content, other.kl_content);
        mix(&mut self.kl_style, other.kl_style);
        mix(&mut self.classifier_entropy, other.classifier_entropy);
        mix(&mut self.label_prior_ll, other.label_prior_ll);
        mix(&mut self.total, other.total);
        mix(&mut self.truncated_mass, other.truncated_mass);
        self.kl_min = if count == 1 { other.kl_min } else { self.kl_min.min(other.kl_min) };
    }
}

#[derive(Debug, Clone)]
pub struct ElboOutput {
    pub breakdown: ElboBreakdown,
    /// Differentiable batch mean of the bound.
    pub total: Tensor,
    /// Differentiable per-example bound `(B,)`.
    pub per_example: Tensor,
}

/// Closed-form `KL(q || p)` per row.
pub fn kl_diag_gaussians(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<Tensor> {
    if q.mean.dims() != p.mean.dims() {
        return Err(Error::Domain(format!("KL between shapes {:?} and {:?}", q.mean.dims(), p.mean.dims())));
    }
    kl_terms(&q.mean, &q.log_var, &p.mean, &p.log_var)
}

fn kl_terms(qm: &Tensor, qlv: &Tensor, pm: &Tensor, plv: &Tensor) -> Result<Tensor> {
    // 0.5 * sum(plv - qlv + (exp(qlv) + (qm - pm)^2) / exp(plv) - 1)
    let diff2 = (qm - pm)?.sqr()?;
    let ratio = ((qlv.exp()? + diff2)? * plv.neg()?.exp()?)?;
    let inner = ((plv - qlv)? + ratio)?.affine(1.0, -1.0)?;
    Ok(inner.sum(D::Minus1)?.affine(0.5, 0.0)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn to_f64s(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn labels_tensor(labels: &[u32], shape: (usize, usize)) -> Result<Tensor> {
    Ok(Tensor::from_vec(labels.to_vec(), shape, &Device::Cpu)?)
}

/// Candidate classes per example, `(B, M)` row-major.
fn candidate_classes(log_q: &[Vec<f64>], c: usize, cfg: &ElboConfig) -> (Vec<u32>, usize, bool) {
    if c <= cfg.enumerate_limit || cfg.top_m >= c {
        let ids = log_q.iter().flat_map(|_| 0..c as u32).collect();
        return (ids, c, false);
    }
    let m = cfg.top_m.max(1);
    let mut ids = Vec::with_capacity(log_q.len() * m);
    for row in log_q {
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        ids.extend(order[..m].iter().map(|&i| i as u32));
    }
    (ids, m, true)
}

/// ELBO of `branch` on a batch, computing `q(Y|x)` itself.
pub fn elbo(branch: &Branch, prior: &ContentPrior, x: &Tensor, noisy: &[usize], mc_seed: u64, cfg: &ElboConfig) -> Result<ElboOutput> {
    let log_q = branch.classifier().log_probs(x)?;
    elbo_given(branch, prior, x, noisy, &log_q, mc_seed, cfg)
}

/// ELBO with precomputed classifier log-probabilities `(B, C)` so that the
/// same forward pass can feed the co-teaching term.
pub fn elbo_given(
    branch: &Branch,
    prior: &ContentPrior,
    x: &Tensor,
    noisy: &[usize],
    log_q: &Tensor,
    mc_seed: u64,
    cfg: &ElboConfig,
) -> Result<ElboOutput> {
    let arch = branch.arch();
    let c = arch.num_classes;
    let b = x.dim(0)?;
    if noisy.len() != b || b == 0 {
        return Err(Error::Domain(format!("batch has {b} inputs and {} labels", noisy.len())));
    }
    if noisy.iter().any(|&y| y >= c) {
        return Err(Error::Domain("noisy label out of range".into()));
    }
    if cfg.samples == 0 {
        return Err(Error::Config("elbo.samples must be positive".into()));
    }
    let dtype = branch.dtype();
    let log_q_rows = log_q.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let (classes, m, truncated) = candidate_classes(&log_q_rows, c, cfg);
    let rows = b * m;

    let class_idx = labels_tensor(&classes, (b, m))?;
    let mut log_q_sel = log_q.gather(&class_idx, 1)?;
    let mut truncated_mass = 0.0;
    if truncated {
        let kept = log_q_sel.exp()?.sum_keepdim(1)?;
        truncated_mass = 1.0 - to_f64s(&kept)?.iter().sum::<f64>() / b as f64;
        log_q_sel = log_q_sel.broadcast_sub(&kept.log()?)?;
    }
    let q_sel = log_q_sel.exp()?;
    let entropy = (&q_sel * &log_q_sel)?.sum(1)?.neg()?;

    let class_list: Vec<usize> = classes.iter().map(|&v| v as usize).collect();
    let oh = one_hot(&class_list, c, dtype)?;
    let feats = branch.encoder_features(x)?;
    let h = feats.dim(1)?;
    let feats_rep = feats.unsqueeze(1)?.broadcast_as((b, m, h))?.reshape((rows, h))?;
    let g = branch.encode_from_features(&feats_rep, &oh)?;

    let cd = arch.content_dim();
    let k = arch.content_dim_per_class;
    let content = g.narrow(0, cd)?;
    let style = g.narrow(cd, arch.style_dim)?;
    let prior_mean = prior.mean_rows(&oh)?;
    let prior_lv = expand(&oh.affine(prior.active_log_var, 0.0)?, k)?;
    let kl_c = kl_terms(&content.mean, &content.log_var, &prior_mean, &prior_lv)?;
    let kl_s = if arch.style_dim > 0 {
        kl_terms(&style.mean, &style.log_var, &style.mean.zeros_like()?, &style.log_var.zeros_like()?)?
    } else {
        Tensor::zeros(rows, dtype, &Device::Cpu)?
    };

    let md = arch.feature_dim();
    let x_flat = x.flatten_from(1)?;
    let x_rep = x_flat.unsqueeze(1)?.broadcast_as((b, m, md))?.reshape((rows, md))?;
    let noisy_rep: Vec<u32> = noisy.iter().flat_map(|&y| std::iter::repeat_n(y as u32, m)).collect();
    let noisy_rep = labels_tensor(&noisy_rep, (rows, 1))?;

    let mut recon: Option<Tensor> = None;
    let mut noisy_ll: Option<Tensor> = None;
    let latent = arch.latent_dim();
    for s in 0..cfg.samples {
        let mut rng = rng::named_rng(mc_seed, &format!("elbo.sample.{s}"));
        let eps = Tensor::from_vec(rng::normal_vec(&mut rng, rows * latent), (rows, latent), &Device::Cpu)?.to_dtype(dtype)?;
        let z = reparameterize_with(&g, &eps)?;
        let z_c = z.narrow(1, 0, cd)?;
        let logits = branch.reconstruct_logits(&oh, &z_c)?;
        let x_hat = candle_nn::ops::sigmoid(&logits)?;
        let r = match arch.likelihood {
            Likelihood::Gaussian { std } => {
                let norm = md as f64 * (std.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln());
                (&x_rep - &x_hat)?.sqr()?.sum(1)?.affine(-0.5 / (std * std), -norm)?
            }
            Likelihood::Bernoulli => {
                // x * l - softplus(l), softplus(l) = relu(l) + log(1 + exp(-|l|))
                let softplus = (logits.relu()? + logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?)?;
                ((&x_rep * &logits)? - softplus)?.sum(1)?
            }
        };
        let nl = branch.noisy_label_log_probs(&x_hat, &z)?.gather(&noisy_rep, 1)?.squeeze(1)?;
        recon = Some(match recon {
            Some(acc) => (acc + r)?,
            None => r,
        });
        noisy_ll = Some(match noisy_ll {
            Some(acc) => (acc + nl)?,
            None => nl,
        });
    }
    let inv = 1.0 / cfg.samples as f64;
    let recon = recon.unwrap().affine(inv, 0.0)?;
    let noisy_ll = noisy_ll.unwrap().affine(inv, 0.0)?;
    let log_prior = -(c as f64).ln();

    let term = ((&recon + &noisy_ll)? - (&kl_c + &kl_s)?)?.affine(1.0, log_prior)?;
    let weighted = (q_sel.reshape(rows)? * &term)?.reshape((b, m))?.sum(1)?;
    let per_example = (weighted + &entropy)?;
    let total = per_example.mean(0)?;

    let q_rows = q_sel.reshape(rows)?;
    let weigh = |t: &Tensor| -> Result<f64> { Ok(scalar(&(&q_rows * t)?.sum_all()?)? / b as f64) };
    let kl_min = to_f64s(&kl_c)?.into_iter().chain(to_f64s(&kl_s)?).fold(f64::INFINITY, f64::min);
    let breakdown = ElboBreakdown {
        reconstruction_ll: weigh(&recon)?,
        noisy_label_ll: weigh(&noisy_ll)?,
        kl_content: weigh(&kl_c)?,
        kl_style: weigh(&kl_s)?,
        classifier_entropy: scalar(&entropy.mean(0)?)?,
        label_prior_ll: log_prior,
        total: scalar(&total)?,
        kl_min,
        truncated_mass,
    };
    for (name, v) in breakdown.terms() {
        if !v.is_finite() {
            return Err(Error::numerical(name, format!("ELBO term is {v}")));
        }
    }
    Ok(ElboOutput { breakdown, total, per_example })
}

fn expand(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 1 {
        return Ok(x.clone());
    }
    let (n, c) = x.dims2()?;
    Ok(x.unsqueeze(2)?.broadcast_as((n, c, k))?.reshape((n, c * k))?)
}

/// Per-example cross-entropy `-log q(y~|x)` `(B,)` from log-probabilities.
pub fn cross_entropy_rows(log_q: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = labels.iter().map(|&y| y as u32).collect();
    Ok(log_q.gather(&labels_tensor(&idx, (labels.len(), 1))?, 1)?.squeeze(1)?.neg()?)
}

/// Small-loss selections exchanged between the branches. Indices are batch
/// positions in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoTeachingBatchPlan {
    pub selected_for_branch1: Vec<usize>,
    pub selected_for_branch2: Vec<usize>,
    pub keep_fraction_bits: u64,
}

impl CoTeachingBatchPlan {
    pub fn keep_fraction(&self) -> f64 {
        f64::from_bits(self.keep_fraction_bits)
    }
}

/// Number of examples kept out of `batch`: `ceil(keep * batch)`.
pub fn kept_count(keep_fraction: f64, batch: usize) -> usize {
    ((keep_fraction * batch as f64 - 1e-9).ceil() as usize).clamp(1, batch)
}

fn smallest(losses: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    order.truncate(n);
    order.sort_unstable();
    order
}

/// Branch 1 trains on the examples with the smallest branch-2 losses and
/// vice versa. Ties go to the lower index.
pub fn small_loss_plan(losses_branch1: &[f64], losses_branch2: &[f64], keep_fraction: f64) -> Result<CoTeachingBatchPlan> {
    if losses_branch1.is_empty() {
        return Err(Error::Domain("small-loss selection on an empty batch".into()));
    }
    if losses_branch1.len() != losses_branch2.len() {
        return Err(Error::Domain("branch loss vectors differ in length".into()));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Domain(format!("keep fraction {keep_fraction} outside (0, 1]")));
    }
    let n = kept_count(keep_fraction, losses_branch1.len());
    Ok(CoTeachingBatchPlan {
        selected_for_branch1: smallest(losses_branch2, n),
        selected_for_branch2: smallest(losses_branch1, n),
        keep_fraction_bits: keep_fraction.to_bits(),
    })
}

fn selected_mean(rows: &Tensor, selected: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = selected.iter().map(|&i| i as u32).collect();
    let idx = Tensor::from_vec(idx, selected.len(), &Device::Cpu)?;
    Ok(rows.index_select(&idx, 0)?.mean(0)?)
}

/// Mean noisy-label cross-entropy of each classifier over its selection.
pub fn co_teaching_loss(log_q1: &Tensor, log_q2: &Tensor, noisy: &[usize], plan: &CoTeachingBatchPlan) -> Result<(Tensor, Tensor)> {
    let b = noisy.len();
    if plan.selected_for_branch1.iter().chain(&plan.selected_for_branch2).any(|&i| i >= b) {
        return Err(Error::Domain("plan refers to examples outside the batch".into()));
    }
    let ce1 = cross_entropy_rows(log_q1, noisy)?;
    let ce2 = cross_entropy_rows(log_q2, noisy)?;
    Ok((selected_mean(&ce1, &plan.selected_for_branch1)?, selected_mean(&ce2, &plan.selected_for_branch2)?))
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub loss1: Tensor,
    pub loss2: Tensor,
    pub elbo1: ElboBreakdown,
    pub elbo2: ElboBreakdown,
    pub co_teaching1: f64,
    pub co_teaching2: f64,
    pub plan: CoTeachingBatchPlan,
}

impl TotalLoss {
    pub fn values(&self) -> Result<(f64, f64)> {
        Ok((scalar(&self.loss1)?, scalar(&self.loss2)?))
    }

    /// One backward pass; the branches share no parameters, so each only
    /// receives gradients from its own loss.
    pub fn backward(&self) -> Result<candle_core::backprop::GradStore> {
        Ok((&self.loss1 + &self.loss2)?.backward()?)
    }
}

/// `-ELBO + alpha * co-teaching` per branch. Both branches draw their
/// reparameterization noise from `mc_seed`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    branch1: &Branch,
    branch2: &Branch,
    x: &Tensor,
    noisy: &[usize],
    alpha: f64,
    keep_fraction: f64,
    mc_seed: u64,
    cfg: &ElboConfig,
) -> Result<TotalLoss> {
    if !(alpha >= 0.0) {
        return Err(Error::Domain(format!("alpha must be non-negative, got {alpha}")));
    }
    let log_q1 = log_softmax(&branch1.classifier().logits(x)?)?;
    let log_q2 = log_softmax(&branch2.classifier().logits(x)?)?;
    let ce1 = to_f64s(&cross_entropy_rows(&log_q1, noisy)?)?;
    let ce2 = to_f64s(&cross_entropy_rows(&log_q2, noisy)?)?;
    let plan = small_loss_plan(&ce1, &ce2, keep_fraction)?;
    let e1 = elbo_given(branch1, branch1.prior(), x, noisy, &log_q1, mc_seed, cfg)?;
    let e2 = elbo_given(branch2, branch2.prior(), x, noisy, &log_q2, mc_seed, cfg)?;
    let (co1, co2) = co_teaching_loss(&log_q1, &log_q2, noisy, &plan)?;
    let loss1 = (e1.total.neg()? + co1.affine(alpha, 0.0)?)?;
    let loss2 = (e2.total.neg()? + co2.affine(alpha, 0.0)?)?;
    Ok(TotalLoss {
        co_teaching1: scalar(&co1)?,
        co_teaching2: scalar(&co2)?,
        loss1,
        loss2,
        elbo1: e1.breakdown,
        elbo2: e2.breakdown,
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;
    use approx::assert_abs_diff_eq;

    fn gauss(m: f64, v: f64) -> DiagonalGaussian {
        let t = |x: f64| Tensor::new(&[[x]], &Device::Cpu).unwrap();
        DiagonalGaussian::new(t(m), t(v.ln())).unwrap()
    }

    fn kl(q: &DiagonalGaussian, p: &DiagonalGaussian) -> f64 {
        kl_diag_gaussians(q, p).unwrap().to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn kl_closed_forms() {
        assert_abs_diff_eq!(kl(&gauss(0.7, 2.0), &gauss(0.7, 2.0)), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(kl(&gauss(1.0, 1.0), &gauss(0.0, 1.0)), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(kl(&gauss(0.0, 4.0), &gauss(0.0, 1.0)), 0.5 * (4.0 - 1.0 - 4f64.ln()), epsilon = 1e-12);
        let short = DiagonalGaussian::standard(1, 2, DType::F64).unwrap();
        assert!(matches!(kl_diag_gaussians(&short, &gauss(0.0, 1.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn small_loss_plan_examples() {
        let plan = small_loss_plan(&[0.0, 0.0, 0.0], &[3.0, 1.0, 2.0], 2.0 / 3.0).unwrap();
        assert_eq!(plan.selected_for_branch1, vec![1, 2]);
        let full = small_loss_plan(&[5.0, 1.0], &[1.0, 5.0], 1.0).unwrap();
        assert_eq!(full.selected_for_branch1, vec![0, 1]);
        assert_eq!(full.selected_for_branch2, vec![0, 1]);
        let same = small_loss_plan(&[0.4, 0.1, 0.9, 0.1], &[0.4, 0.1, 0.9, 0.1], 0.5).unwrap();
        assert_eq!(same.selected_for_branch1, same.selected_for_branch2);
        assert_eq!(same.selected_for_branch1, vec![1, 3]);
        assert!(small_loss_plan(&[], &[], 0.5).is_err());
    }

    #[test]
    fn kept_count_is_ceiling() {
        assert_eq!(kept_count(0.6, 128), 77);
        assert_eq!(kept_count(0.5, 128), 64);
        assert_eq!(kept_count(2.0 / 3.0, 3), 2);
        assert_eq!(kept_count(0.01, 3), 1);
    }

    fn batch() -> (Tensor, Vec<usize>) {
        let v: Vec<f64> = (0..16).map(|i| ((i * 7) % 10) as f64 / 10.0).collect();
        (Tensor::from_vec(v, (4, 1, 2, 2), &Device::Cpu).unwrap(), vec![0, 1, 1, 0])
    }

    #[test]
    fn breakdown_recomposes_and_entropy_is_bounded() {
        let arch = ArchConfig::tiny(2, [1, 2, 2]);
        let b = Branch::new(&arch, DType::F64, 3).unwrap();
        let (x, y) = batch();
        let out = elbo(&b, b.prior(), &x, &y, 11, &ElboConfig::default()).unwrap();
        let br = out.breakdown;
        assert_abs_diff_eq!(br.total, br.recomposed_total(), epsilon = 1e-6 * br.total.abs());
        assert!(br.classifier_entropy >= 0.0 && br.classifier_entropy <= 2f64.ln() + 1e-12);
        assert!(br.kl_min >= -KL_TOLERANCE);
    }

    #[test]
    fn single_class_has_no_entropy() {
        let arch = ArchConfig::tiny(1, [1, 2, 2]);
        let b = Branch::new(&arch, DType::F64, 3).unwrap();
        let (x, _) = batch();
        let out = elbo(&b, b.prior(), &x, &[0, 0, 0, 0], 1, &ElboConfig::default()).unwrap();
        assert_eq!(out.breakdown.classifier_entropy, 0.0);
        assert_eq!(out.breakdown.label_prior_ll, 0.0);
    }

    #[test]
    fn zero_logit_classifiers_cost_log_c() {
        let mut arch = ArchConfig::tiny(4, [1, 2, 2]);
        arch.zero_init_heads = true;
        let b1 = Branch::new(&arch, DType::F64, 1).unwrap();
        let b2 = Branch::new(&arch, DType::F64, 2).unwrap();
        let (x, _) = batch();
        let y = [0, 3, 2, 1];
        let plan = small_loss_plan(&[0.0; 4], &[0.0; 4], 0.5).unwrap();
        let lq1 = b1.classifier().log_probs(&x).unwrap();
        let lq2 = b2.classifier().log_probs(&x).unwrap();
        let (c1, c2) = co_teaching_loss(&lq1, &lq2, &y, &plan).unwrap();
        assert_abs_diff_eq!(scalar(&c1).unwrap(), 4f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(scalar(&c2).unwrap(), 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn identical_branches_have_equal_losses() {
        let arch = ArchConfig::tiny(3, [1, 2, 2]);
        let b1 = Branch::new(&arch, DType::F64, 5).unwrap();
        let b2 = Branch::new(&arch, DType::F64, 5).unwrap();
        let (x, _) = batch();
        let t = total_loss(&b1, &b2, &x, &[0, 2, 1, 1], 1.0, 1.0, 9, &ElboConfig::default()).unwrap();
        let (l1, l2) = t.values().unwrap();
        assert_eq!(l1, l2);
        assert_eq!(t.co_teaching1, t.co_teaching2);
    }

    #[test]
    fn alpha_zero_is_negative_elbo() {
        let arch = ArchConfig::tiny(3, [1, 2, 2]);
        let b1 = Branch::new(&arch, DType::F64, 5).unwrap();
        let b2 = Branch::new(&arch, DType::F64, 6).unwrap();
        let (x, _) = batch();
        let y = [0, 2, 1, 1];
        let t = total_loss(&b1, &b2, &x, &y, 0.0, 0.5, 9, &ElboConfig::default()).unwrap();
        let e2 = elbo(&b2, b2.prior(), &x, &y, 9, &ElboConfig::default()).unwrap();
        assert_abs_diff_eq!(t.values().unwrap().1, -e2.breakdown.total, epsilon = 1e-12);
    }

    #[test]
    fn truncation_keeps_top_classes() {
        let cfg = ElboConfig { samples: 1, enumerate_limit: 2, top_m: 2 };
        let (ids, m, truncated) = candidate_classes(&[vec![-3.0, -0.1, -2.0, -5.0]], 4, &cfg);
        assert!(truncated);
        assert_eq!(m, 2);
        assert_eq!(ids, vec![1, 2]);
        let arch = ArchConfig::tiny(4, [1, 2, 2]);
        let b = Branch::new(&arch, DType::F64, 3).unwrap();
        let (x, _) = batch();
        let out = elbo(&b, b.prior(), &x, &[0, 3, 2, 1], 4, &cfg).unwrap();
        assert!(out.breakdown.truncated_mass > 0.0 && out.breakdown.truncated_mass < 1.0);
    }
}
