//! Monte Carlo behaviour of the reparameterized ELBO estimator.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reidvae::model::{reparameterize, ArchConfig, Branch, DiagonalGaussian};
use reidvae::objective::{elbo, elbo_given, ElboConfig};

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn model() -> Branch {
    Branch::new(&ArchConfig::tiny(3, [1, 2, 2]), DType::F64, 8).unwrap()
}

fn input(rows: usize) -> Tensor {
    let row = [0.2f64, 0.7, 0.4, 0.9];
    let v: Vec<f64> = (0..rows).flat_map(|_| row).collect();
    Tensor::from_vec(v, (rows, 1, 2, 2), &Device::Cpu).unwrap()
}

#[test]
fn reparameterized_samples_have_the_target_moments() {
    let n = 100_000;
    let mean = [1.5f64, -0.5, 0.0];
    let log_var = [0.0f64, -2.0, 1.0];
    let g = DiagonalGaussian::new(
        Tensor::from_vec(mean.repeat(n), (n, 3), &Device::Cpu).unwrap(),
        Tensor::from_vec(log_var.repeat(n), (n, 3), &Device::Cpu).unwrap(),
    )
    .unwrap();
    let z = reparameterize(&g, 3).unwrap().to_vec2::<f64>().unwrap();
    for j in 0..3 {
        let col: Vec<f64> = z.iter().map(|r| r[j]).collect();
        let (m, se) = mean_se(&col);
        let var = log_var[j].exp();
        assert!((m - mean[j]).abs() < 4.0 * se, "dim {j}: mean {m} vs {}", mean[j]);
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        // Sample variance has standard error var * sqrt(2 / (n - 1)) for Gaussians.
        assert!((v - var).abs() < 4.0 * var * (2.0 / (n as f64 - 1.0)).sqrt(), "dim {j}: variance {v} vs {var}");
    }
}

#[test]
fn single_sample_elbo_is_unbiased() {
    let branch = model();
    let cfg = ElboConfig::default();
    let x = input(1);
    let noisy = [1usize];
    let singles: Vec<f64> = (0..100_000u64)
        .map(|s| elbo(&branch, branch.prior(), &x, &noisy, s, &cfg).unwrap().breakdown.total)
        .collect();

    // Reference: one large batch of identical rows, each with its own noise.
    let chunk = 100_000;
    let reference: Vec<f64> = (0..10u64)
        .flat_map(|i| {
            let out = elbo(&branch, branch.prior(), &input(chunk), &vec![1; chunk], 1 << 40 | i, &cfg).unwrap();
            out.per_example.to_vec1::<f64>().unwrap()
        })
        .collect();
    let (a, sa) = mean_se(&singles);
    let (b, sb) = mean_se(&reference);
    println!("single {a:.4} ± {sa:.1e}, reference {b:.4} ± {sb:.1e}");
    assert!((a - b).abs() < 4.0 * (sa * sa + sb * sb).sqrt());
}

/// Per-class term `T_y` through a classifier that puts all its mass on `y`.
fn class_term(branch: &Branch, x: &Tensor, noisy: &[usize], y: usize, seed: u64, samples: usize) -> f64 {
    let c = branch.arch().num_classes;
    let mut row = vec![-30.0f64; c];
    row[y] = 0.0;
    let log_q = Tensor::from_vec(row, (1, c), &Device::Cpu).unwrap();
    let cfg = ElboConfig { samples, enumerate_limit: 0, top_m: 1 };
    let out = elbo_given(branch, branch.prior(), x, noisy, &log_q, seed, &cfg).unwrap();
    assert_eq!(out.breakdown.classifier_entropy, 0.0);
    out.breakdown.total
}

#[test]
fn enumeration_matches_sampled_classes() {
    let branch = model();
    let x = input(1);
    let noisy = [2usize];
    let q = branch.classify(&x).unwrap().to_vec2::<f64>().unwrap().remove(0);
    let entropy: f64 = -q.iter().map(|p| p * p.ln()).sum::<f64>();

    let stats: Vec<(f64, f64)> = (0..3)
        .map(|y| mean_se(&(0..10u64).map(|s| class_term(&branch, &x, &noisy, y, 50 + 10 * y as u64 + s, 2000)).collect::<Vec<_>>()))
        .collect();
    let terms: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let term_se = q.iter().zip(&stats).map(|(p, s)| (p * s.1).powi(2)).sum::<f64>().sqrt();
    let enumerated: Vec<f64> = (0..20u64)
        .map(|s| elbo(&branch, branch.prior(), &x, &noisy, 7 + s, &ElboConfig { samples: 1000, ..ElboConfig::default() }).unwrap().breakdown.total)
        .collect();
    let (enum_mean, enum_se) = mean_se(&enumerated);

    // Score-function view: draw the class, score T_y, add the entropy.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws: Vec<f64> = (0..50_000)
        .map(|_| {
            let u: f64 = rng.random();
            let y = if u < q[0] { 0 } else if u < q[0] + q[1] { 1 } else { 2 };
            terms[y] + entropy
        })
        .collect();
    let (sampled, sampled_se) = mean_se(&draws);
    let exact: f64 = q.iter().zip(&terms).map(|(p, t)| p * t).sum::<f64>() + entropy;
    println!("enumerated {enum_mean:.4} ± {enum_se:.1e}, sampled {sampled:.4} ± {sampled_se:.1e}, mixture {exact:.4}");
    assert!((enum_mean - sampled).abs() < 4.0 * (enum_se.powi(2) + sampled_se.powi(2) + term_se.powi(2)).sqrt());
    assert!((enum_mean - exact).abs() < 4.0 * (enum_se.powi(2) + term_se.powi(2)).sqrt());
}
