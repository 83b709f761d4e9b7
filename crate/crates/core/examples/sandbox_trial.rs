//! Trains one method on the default sandbox and prints per-epoch metrics.
//!
//! `cargo run --example sandbox_trial -- <reidvae|ce|coteaching> [epochs] [alpha] [lr] [seed] [warmup] [std]`
//!
//! Optimizer is SGD unless `ADAM` is set. `K`, `HIDDEN`, `BATCH`, `STRENGTH` and `CLEAN` override the rest.

use reidvae::data::{apply_noise, sandbox_bundle, NoiseFamily, NoiseSpec, SANDBOX_TEST_SIZE, SANDBOX_TRAIN_SIZE};
use reidvae::eval::CleanEvaluator;
use reidvae::scm::{ScmConfig, SandboxFlipper};
use reidvae::trainer::{train, train_baseline_ce, train_baseline_coteaching, TrainConfig};

fn main() -> reidvae::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let method = args.get(1).map_or("reidvae", |s| s.as_str());
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let seed = arg(5, 0.0) as u64;
    let mut scm = ScmConfig::sandbox_default();
    if let Ok(v) = std::env::var("STRENGTH") {
        scm.annotation_strength = v.parse().unwrap();
        scm.annotation_bias = reidvae::scm::calibrate_annotation_bias(&scm, 0.3, 20_000, 0)?;
    }
    let clean = sandbox_bundle(&scm, SANDBOX_TRAIN_SIZE, SANDBOX_TEST_SIZE, seed)?;
    let flipper = SandboxFlipper::from_bundle(&clean)?;
    let bundle = if std::env::var("CLEAN").is_ok() {
        let spec = NoiseSpec::new(NoiseFamily::None, 0.0, seed)?;
        apply_noise(&clean, &spec, &reidvae::idn::SymmetricFlipper { rate: 0.0, num_classes: 3, seed })?
    } else {
        apply_noise(&clean, &NoiseSpec::new(NoiseFamily::Idn, 0.3, seed)?, &flipper)?
    };
    println!("realized noise {:.4}", flipper.rate());
    let mut config = TrainConfig::tiny(arg(2, 20.0) as usize, seed);
    config.alpha = arg(3, 1.0);
    config.learning_rate = arg(4, 2e-3);
    config.warmup_epochs = arg(6, 5.0) as usize;
    if let Some(s) = args.get(7) { config.model.likelihood = reidvae::model::Likelihood::Gaussian { std: s.parse().unwrap() }; }
    if let Ok(v) = std::env::var("BATCH") { config.batch_size = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("HIDDEN") { config.model.backbone = reidvae::nn::Backbone::Mlp { hidden: vec![v.parse().unwrap()] }; }
    if let Ok(v) = std::env::var("K") { config.model.content_dim_per_class = v.parse().unwrap(); }
    if std::env::var("ADAM").is_ok() { config.optimizer = reidvae::optim::OptimizerConfig::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }; }
    let mut eval = CleanEvaluator::new(&bundle)?;
    let view = bundle.training_view();
    let start = std::time::Instant::now();
    let report = match method {
        "ce" => train_baseline_ce(&view, &config, &mut eval)?.report,
        "coteaching" => train_baseline_coteaching(&view, &config, &mut eval)?.report,
        _ => {
            let out = train(&view, &config, &mut eval)?;
            for (b, m) in out.models.iter().enumerate() {
                let pred = reidvae::trainer::predict(&[m as &dyn reidvae::model::ClassProbs], eval.test_inputs(), None)?;
                let mut conf = [[0usize; 3]; 3];
                for (p, y) in pred.iter().zip(eval.test_labels()) {
                    conf[*y][*p] += 1;
                }
                println!("branch {b} confusion (rows clean) {conf:?}");
            }
            out.report
        }
    };
    for e in &report.epochs {
        let ev = e.eval.as_ref().unwrap();
        let elbo = e.elbo.first().map(|b| format!("rec {:.1} nl {:.3} klc {:.2} kls {:.2} H {:.3}", b.reconstruction_ll, b.noisy_label_ll, b.kl_content, b.kl_style, b.classifier_entropy)).unwrap_or_default();
        println!(
            "epoch {:2} keep {:.3} loss {:?} co {:?} acc {:?} ens {:.4} purity {:?} {elbo}",
            e.epoch, e.keep_fraction, e.loss.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>(), e.co_teaching.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>(), ev.accuracy, ev.ensemble_accuracy, ev.purity
        );
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
