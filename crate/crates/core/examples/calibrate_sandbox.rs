//! Recomputes the sandbox annotation bias and the Bayes oracle accuracy.
//!
//! `cargo run --release --example calibrate_sandbox`

use reidvae::scm::{bayes_accuracy, calibrate_annotation_bias, realized_sandbox_noise_rate, sample_scm, ScmConfig};

fn main() -> reidvae::Result<()> {
    let base = ScmConfig::sandbox_default();
    let bias = calibrate_annotation_bias(&base, 0.3, 20_000, 0)?;
    println!("annotation_bias = {bias:?}");
    let config = ScmConfig { annotation_bias: bias, ..base };
    for seed in [1, 2, 3] {
        let rate = realized_sandbox_noise_rate(&sample_scm(&config, 10_000, seed)?)?;
        println!("seed {seed}: realized noise rate {rate:.4}");
    }
    let eval = sample_scm(&config, 1_000, 99)?;
    let acc = bayes_accuracy(&config, &eval, 10_000, 0)?;
    println!("bayes accuracy (1000 samples, 10^4 draws) = {acc:.4}");
    Ok(())
}
