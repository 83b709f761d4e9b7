//! Instance-dependent label-noise synthesis.
//!
//! Each instance gets its own flip rate `q_i ~ N(tau, std^2)` truncated to
//! `[0, 1]`. The flip mass is spread over the wrong classes by a softmax of
//! `x · W[y]`, where `W` holds one random `m x C` projection per class, so
//! two instances of the same class flip differently.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{DatasetBundle, LabelFlipper};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_RATE_STD: f64 = 0.1;
const MAX_REJECTIONS: usize = 100;

/// Per-channel affine standardization applied before projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        ChannelStats { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Mean and standard deviation of every channel over `examples`.
    pub fn fit<'a>(examples: impl Iterator<Item = &'a [f32]>, channels: usize) -> Self {
        let mut sum = vec![0f64; channels];
        let mut sq = vec![0f64; channels];
        let mut count = vec![0usize; channels];
        for features in examples {
            let per = features.len() / channels;
            for (c, chunk) in features.chunks_exact(per).enumerate() {
                for &v in chunk {
                    sum[c] += f64::from(v);
                    sq[c] += f64::from(v) * f64::from(v);
                }
                count[c] += per;
            }
        }
        let mut stats = ChannelStats::identity(channels);
        for c in 0..channels {
            if count[c] > 0 {
                let n = count[c] as f64;
                let mean = sum[c] / n;
                let var = (sq[c] / n - mean * mean).max(0.0);
                stats.mean[c] = mean;
                stats.std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
            }
        }
        stats
    }
}

#[derive(Debug, Clone)]
pub struct IdnGeneratorState {
    num_classes: usize,
    feature_dim: usize,
    /// Row-major `(C, m, C)`: `projection[(y * m + i) * C + j]`.
    projection: Vec<f64>,
    rate_mean: f64,
    rate_std: f64,
    seed: u64,
    stats: ChannelStats,
}

impl IdnGeneratorState {
    pub fn new(
        num_classes: usize,
        feature_dim: usize,
        rate_mean: f64,
        rate_std: f64,
        seed: u64,
        stats: ChannelStats,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&rate_mean) {
            return Err(Error::Config(format!("IDN rate must lie in [0, 1), got {rate_mean}")));
        }
        if rate_std.is_nan() || rate_std <= 0.0 {
            return Err(Error::Config(format!("IDN rate_std must be positive, got {rate_std}")));
        }
        if num_classes == 0 || feature_dim == 0 {
            return Err(Error::Config("IDN generator needs at least one class and one feature".into()));
        }
        if stats.mean.is_empty() || feature_dim % stats.mean.len() != 0 {
            return Err(Error::Config(format!(
                "{} channels do not divide feature dimension {feature_dim}",
                stats.mean.len()
            )));
        }
        let mut rng = rng::named_rng(seed, "idn.projection");
        let projection = (0..num_classes * feature_dim * num_classes).map(|_| rng.sample(StandardNormal)).collect();
        Ok(IdnGeneratorState { num_classes, feature_dim, projection, rate_mean, rate_std, seed, stats })
    }

    /// Generator whose standardization statistics come from the bundle's train split.
    pub fn for_bundle(bundle: &DatasetBundle, rate_mean: f64, rate_std: f64, seed: u64) -> Result<Self> {
        let channels = bundle.feature_shape[0];
        let stats = ChannelStats::fit(bundle.train.iter().map(|e| e.features.as_slice()), channels);
        Self::new(bundle.num_classes, bundle.feature_dim(), rate_mean, rate_std, seed, stats)
    }

    pub fn rate_mean(&self) -> f64 {
        self.rate_mean
    }

    pub fn rate_std(&self) -> f64 {
        self.rate_std
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Instance flip rate: `N(tau, std^2)` truncated to `[0, 1]` by rejection,
    /// clamped after 100 rejected draws. `tau = 0` means no flips at all.
    pub fn sample_flip_rate(&self, index: u64) -> f64 {
        if self.rate_mean == 0.0 {
            return 0.0;
        }
        let mut rng = rng::indexed_rng(rng::substream(self.seed, "idn.rate"), index);
        let mut draw = 0.0;
        for _ in 0..MAX_REJECTIONS {
            let z: f64 = rng.sample(StandardNormal);
            draw = self.rate_mean + self.rate_std * z;
            if (0.0..=1.0).contains(&draw) {
                return draw;
            }
        }
        draw.clamp(0.0, 1.0)
    }

    fn scores(&self, features: &[f32], clean_label: usize) -> Result<Vec<f64>> {
        if features.len() != self.feature_dim {
            return Err(Error::Config(format!(
                "feature vector has length {}, projection expects {}",
                features.len(),
                self.feature_dim
            )));
        }
        if clean_label >= self.num_classes {
            return Err(Error::Domain(format!("label {clean_label} outside 0..{}", self.num_classes)));
        }
        let c = self.num_classes;
        let per_channel = self.feature_dim / self.stats.mean.len();
        let block = &self.projection[clean_label * self.feature_dim * c..(clean_label + 1) * self.feature_dim * c];
        let mut scores = vec![0f64; c];
        for (i, &v) in features.iter().enumerate() {
            let ch = i / per_channel;
            let x = (f64::from(v) - self.stats.mean[ch]) / self.stats.std[ch];
            let row = &block[i * c..(i + 1) * c];
            for (s, w) in scores.iter_mut().zip(row) {
                *s += x * w;
            }
        }
        Ok(scores)
    }

    /// Exact flip distribution `p` for one instance: `p[y] = 1 - q_i` and the
    /// remaining mass `q_i` follows the softmax of the scores with `y` masked.
    pub fn flip_distribution(&self, features: &[f32], clean_label: usize, index: u64) -> Result<Vec<f64>> {
        let scores = self.scores(features, clean_label)?;
        let q = self.sample_flip_rate(index);
        Ok(masked_flip_distribution(&scores, clean_label, q))
    }

    pub fn flip_label(&self, features: &[f32], clean_label: usize, index: u64) -> Result<usize> {
        let p = self.flip_distribution(features, clean_label, index)?;
        let mut rng = rng::indexed_rng(rng::substream(self.seed, "idn.flip"), index);
        Ok(sample_categorical(&p, rng.random::<f64>()))
    }
}

impl LabelFlipper for IdnGeneratorState {
    fn flip(&self, features: &[f32], clean_label: usize, index: u64) -> Result<usize> {
        self.flip_label(features, clean_label, index)
    }
}

/// `q * softmax(scores with scores[y] = -inf)` plus `1 - q` on `y`.
pub fn masked_flip_distribution(scores: &[f64], clean_label: usize, flip_rate: f64) -> Vec<f64> {
    let mut p = vec![0f64; scores.len()];
    if scores.len() == 1 {
        p[0] = 1.0;
        return p;
    }
    let max = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != clean_label)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (j, s) in scores.iter().enumerate() {
        if j != clean_label {
            p[j] = (s - max).exp();
            total += p[j];
        }
    }
    for (j, v) in p.iter_mut().enumerate() {
        *v = if j == clean_label { 1.0 - flip_rate } else { flip_rate * *v / total };
    }
    p
}

/// Inverse-CDF draw from `p` with a uniform `u` in `[0, 1)`.
pub fn sample_categorical(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (j, &mass) in p.iter().enumerate() {
        acc += mass;
        if u < acc {
            return j;
        }
    }
    // u landed in the rounding slack above the cumulative sum
    p.iter().rposition(|&m| m > 0.0).unwrap_or(0)
}

/// With probability `rate`, a uniform draw from the other `C - 1` classes.
pub fn symmetric_flip(clean_label: usize, rate: f64, num_classes: usize, seed: u64, index: u64) -> usize {
    if num_classes <= 1 || rate <= 0.0 {
        return clean_label;
    }
    let mut rng = rng::indexed_rng(rng::substream(seed, "symmetric.flip"), index);
    if rng.random::<f64>() >= rate {
        return clean_label;
    }
    let k = rng.random_range(0..num_classes - 1);
    if k >= clean_label {
        k + 1
    } else {
        k
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SymmetricFlipper {
    pub rate: f64,
    pub num_classes: usize,
    pub seed: u64,
}

impl LabelFlipper for SymmetricFlipper {
    fn flip(&self, _features: &[f32], clean_label: usize, index: u64) -> Result<usize> {
        Ok(symmetric_flip(clean_label, self.rate, self.num_classes, self.seed, index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(c: usize, m: usize, tau: f64) -> IdnGeneratorState {
        IdnGeneratorState::new(c, m, tau, DEFAULT_RATE_STD, 11, ChannelStats::identity(1)).unwrap()
    }

    #[test]
    fn zero_rate_never_flips() {
        let s = state(5, 4, 0.0);
        for i in 0..200 {
            assert_eq!(s.sample_flip_rate(i), 0.0);
            assert_eq!(s.flip_label(&[0.3, 0.1, 0.9, 0.5], 2, i).unwrap(), 2);
        }
    }

    #[test]
    fn flip_rate_mean_matches_tau() {
        let s = state(3, 2, 0.4);
        let n = 10_000;
        let mean = (0..n).map(|i| s.sample_flip_rate(i)).sum::<f64>() / n as f64;
        assert!((0.39..=0.41).contains(&mean), "mean {mean}");
        assert_eq!(s.sample_flip_rate(17), s.sample_flip_rate(17));
        assert!((0..n).all(|i| (0.0..=1.0).contains(&s.sample_flip_rate(i))));
    }

    #[test]
    fn binary_flips_go_to_the_other_class() {
        let s = state(2, 3, 0.45);
        for i in 0..500 {
            let y = (i % 2) as usize;
            let f = [i as f32 / 500.0, 0.2, 0.7];
            let p = s.flip_distribution(&f, y, i).unwrap();
            assert!((p[1 - y] - s.sample_flip_rate(i)).abs() < 1e-12);
            assert!(s.flip_label(&f, y, i).unwrap() < 2);
        }
    }

    #[test]
    fn distribution_is_valid_and_masks_clean_label() {
        let s = state(6, 5, 0.3);
        for i in 0..100u64 {
            let f: Vec<f32> = (0..5).map(|k| ((i * 7 + k) % 11) as f32 / 11.0).collect();
            let y = (i % 6) as usize;
            let p = s.flip_distribution(&f, y, i).unwrap();
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((p[y] - (1.0 - s.sample_flip_rate(i))).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_features_changes_the_distribution() {
        let s = state(4, 6, 0.4);
        let f = [0.9f32, 0.1, 0.5, 0.3, 0.0, 0.7];
        let mut g = f;
        g.reverse();
        let p = s.flip_distribution(&f, 1, 3).unwrap();
        let q = s.flip_distribution(&g, 1, 3).unwrap();
        let gap: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
        assert!(gap > 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let s = state(3, 4, 0.2);
        assert!(matches!(s.flip_label(&[0.0; 3], 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn symmetric_edge_cases() {
        for i in 0..100 {
            assert_eq!(symmetric_flip(3, 0.0, 10, 1, i), 3);
            assert_eq!(symmetric_flip(0, 0.9, 1, 1, i), 0);
            assert_ne!(symmetric_flip(4, 0.999_999, 10, 1, i), 4);
        }
    }

    #[test]
    fn categorical_sampling_respects_zero_mass() {
        assert_eq!(sample_categorical(&[0.0, 1.0, 0.0], 0.0), 1);
        assert_eq!(sample_categorical(&[0.5, 0.5, 0.0], 0.999_999_999_999), 1);
        assert_eq!(sample_categorical(&[0.25, 0.25, 0.5], 0.3), 1);
    }
}
