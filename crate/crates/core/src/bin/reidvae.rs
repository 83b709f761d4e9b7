use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reidvae::data::{load_cache, save_cache, NoiseFamily, DATA_ROOT_ENV};
use reidvae::eval::{noise_audit, CleanEvaluator};
use reidvae::experiment::{self, DatasetConfig, ExperimentConfig, RunOptions, CACHE_ROOT_ENV};
use reidvae::model::{Branch, ClassProbs, StandaloneClassifier};
use reidvae::trainer::{Method, TrainConfig};
use reidvae::{Error, Result};

#[derive(Parser)]
#[command(name = "reidvae", version, about = "Learning with instance-dependent label noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a noisy dataset bundle and write it to a cache file.
    Synthesize {
        /// `fashion_mnist`, `sandbox` or `dir:<path>` (relative to the data root).
        #[arg(long)]
        dataset: String,
        /// Class-stratified training subset size.
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long, value_enum, default_value = "idn")]
        noise: NoiseArg,
        #[arg(long, default_value_t = 0.0)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method on a bundle.
    Train {
        #[arg(long)]
        bundle: PathBuf,
        /// TOML file holding a training configuration.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "reidvae")]
        method: MethodArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score saved checkpoints on the clean test split of a bundle.
    Evaluate {
        #[arg(long)]
        bundle: PathBuf,
        /// Checkpoint files; two for reidvae and coteaching, one for ce.
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "reidvae")]
        method: MethodArg,
    },
    /// Run an experiment config: every seed and method, then tables and plots.
    Run {
        config: PathBuf,
        /// Output directory (defaults to `output_dir` in the config, then `runs/<name>`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Bundle cache root.
        #[arg(long, env = CACHE_ROOT_ENV, default_value = ".cache/reidvae")]
        cache: PathBuf,
        #[arg(long)]
        no_cache: bool,
    },
    /// Merge finished run directories into one table with plots.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum NoiseArg {
    None,
    Symmetric,
    Idn,
    External,
}

impl From<NoiseArg> for NoiseFamily {
    fn from(n: NoiseArg) -> Self {
        match n {
            NoiseArg::None => NoiseFamily::None,
            NoiseArg::Symmetric => NoiseFamily::Symmetric,
            NoiseArg::Idn => NoiseFamily::Idn,
            NoiseArg::External => NoiseFamily::External,
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MethodArg {
    Reidvae,
    Ce,
    Coteaching,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Reidvae => Method::Reidvae,
            MethodArg::Ce => Method::Ce,
            MethodArg::Coteaching => Method::Coteaching,
        }
    }
}

fn read_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    let config: TrainConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Synthesize { dataset, subset, noise, rate, seed, out } => {
            let spec = reidvae::data::NoiseSpec::new(noise.into(), rate, reidvae::rng::substream(seed, "noise"))?;
            let bundle = experiment::build_bundle(&DatasetConfig { name: dataset, subset }, &spec, seed)?;
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            save_cache(&bundle, &out)?;
            let mut summary = serde_json::json!({
                "bundle": out,
                "train": bundle.train.len(),
                "test": bundle.test.len(),
                "num_classes": bundle.num_classes,
                "noise": spec,
            });
            if bundle.train.iter().all(|e| e.has_clean_label()) {
                summary["realized_rate"] = noise_audit(&bundle)?.rate.into();
            }
            print_json(&summary)?;
        }
        Command::Train { bundle, config, method, seed, out } => {
            let bundle = load_cache(&bundle, None)?;
            let train = read_train_config(&config)?;
            let report = experiment::train_method(&bundle, method.into(), &train, seed, &out)?;
            let eval = report.final_eval().expect("the last epoch is always evaluated");
            print_json(&serde_json::json!({
                "accuracy": eval.accuracy,
                "ensemble_accuracy": eval.ensemble_accuracy,
                "purity": eval.purity,
                "checkpoints": report.checkpoints,
            }))?;
        }
        Command::Evaluate { bundle, checkpoints, method } => {
            let bundle = load_cache(&bundle, None)?;
            let evaluator = CleanEvaluator::new(&bundle)?;
            let dtype = candle_core::DType::F32;
            let (accuracy, ensemble) = match Method::from(method) {
                Method::Reidvae => {
                    let models = checkpoints.iter().map(|p| Branch::load(p, dtype)).collect::<Result<Vec<_>>>()?;
                    evaluator.evaluate(&models.iter().map(|m| m as &dyn ClassProbs).collect::<Vec<_>>())?
                }
                _ => {
                    let models = checkpoints.iter().map(|p| StandaloneClassifier::load(p, dtype)).collect::<Result<Vec<_>>>()?;
                    evaluator.evaluate(&models.iter().map(|m| m as &dyn ClassProbs).collect::<Vec<_>>())?
                }
            };
            print_json(&serde_json::json!({ "accuracy": accuracy, "ensemble_accuracy": ensemble }))?;
        }
        Command::Run { config, out, cache, no_cache } => {
            let config = ExperimentConfig::from_path(&config)?;
            let out = out
                .or_else(|| config.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("runs").join(&config.name));
            let options = RunOptions { cache_root: (!no_cache).then_some(cache) };
            let summary = experiment::run_experiment(&config, &out, &options)?;
            let aggregate = summary.table.aggregate();
            print!("{}", reidvae::eval::markdown_summary(&aggregate));
            eprintln!(
                "{}: {} trained, {} skipped, {} failed",
                out.display(),
                summary.trained.len(),
                summary.skipped.len(),
                summary.failed.len()
            );
            for (seed, method, error) in &summary.failed {
                eprintln!("seed {seed} {}: {error}", method.as_str());
            }
            return Ok(summary.failed.is_empty());
        }
        Command::Report { dirs, out } => {
            let table = experiment::report(&dirs, &out)?;
            print!("{}", reidvae::eval::markdown_summary(&table.aggregate()));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    log::debug!("data root from {DATA_ROOT_ENV}: {}", reidvae::data::data_root().display());
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
