//! One FashionMNIST-10k run with instance-dependent noise.
//!
//! `cargo run --example fashion_trial -- <reidvae|ce|coteaching> [epochs] [rate] [seed] [alpha] [lr]`

use reidvae::data::{apply_noise, load_dataset, NoiseFamily, NoiseSpec};
use reidvae::eval::CleanEvaluator;
use reidvae::idn::{IdnGeneratorState, DEFAULT_RATE_STD};
use reidvae::nn::Backbone;
use reidvae::trainer::{train, train_baseline_ce, train_baseline_coteaching, TrainConfig};

fn main() -> reidvae::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let method = args.get(1).map_or("reidvae", |s| s.as_str());
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let rate = arg(3, 0.4);
    let seed = arg(4, 0.0) as u64;
    let subset = std::env::var("SUBSET").ok().and_then(|v| v.parse().ok()).unwrap_or(10_000);
    let clean = load_dataset("fashion_mnist", Some(subset), seed)?;
    let flipper = IdnGeneratorState::for_bundle(&clean, rate, DEFAULT_RATE_STD, seed)?;
    let bundle = apply_noise(&clean, &NoiseSpec::new(NoiseFamily::Idn, rate, seed)?, &flipper)?;
    let mut config = TrainConfig::tiny(arg(2, 20.0) as usize, seed);
    config.alpha = arg(5, 1.0);
    config.learning_rate = arg(6, 0.05);
    config.batch_size = 128;
    if std::env::var("ADAM").is_ok() {
        config.optimizer = reidvae::optim::OptimizerConfig::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
    }
    config.model.backbone = Backbone::Conv { channels: vec![16, 32], hidden: 128 };
    config.model.encoder_hidden = 64;
    config.model.decoder_hidden = vec![256];
    config.model.noisy_decoder_hidden = vec![64];
    config.model.style_dim = 8;
    config.model.content_dim_per_class = 2;
    if let Ok(v) = std::env::var("STD") {
        config.model.likelihood = reidvae::model::Likelihood::Gaussian { std: v.parse().unwrap() };
    }
    if let Ok(v) = std::env::var("WARMUP") {
        config.warmup_epochs = v.parse().unwrap();
    }
    let mut eval = CleanEvaluator::new(&bundle)?;
    let view = bundle.training_view();
    let start = std::time::Instant::now();
    let report = match method {
        "ce" => train_baseline_ce(&view, &config, &mut eval)?.report,
        "coteaching" => train_baseline_coteaching(&view, &config, &mut eval)?.report,
        _ => train(&view, &config, &mut eval)?.report,
    };
    println!("elapsed {:.0}s", start.elapsed().as_secs_f64());
    for e in &report.epochs {
        let ev = e.eval.as_ref().unwrap();
        let elbo = e.elbo.first().map(|b| format!("rec {:.1} nl {:.3} klc {:.2} kls {:.2} H {:.3}", b.reconstruction_ll, b.noisy_label_ll, b.kl_content, b.kl_style, b.classifier_entropy)).unwrap_or_default();
        println!("epoch {:2} loss {:?} co {:?} acc {:?} ens {:.4} purity {:?} {elbo}", e.epoch, e.loss, e.co_teaching, ev.accuracy, ev.ensemble_accuracy, ev.purity);
    }
    Ok(())
}
