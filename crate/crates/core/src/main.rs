use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use exposure_attack::attack::Method;
use exposure_attack::harness::{
    emit_report, emit_training_report, generate_synthetic_dataset, load_dataset, prepare_corpus, prepare_models,
    read_manifest, read_results, run_ablation, run_transfer_matrix, run_whitebox, run_whitebox_sweep, AblationAxis,
    ExperimentConfig, SyntheticSpec,
};
use exposure_attack::image::write_manifest;
use exposure_attack::Result;

#[derive(Parser)]
#[command(name = "expoattack", version, about = "Adversarial exposure attacks on small CNN classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic fundus dataset as PNGs with train/test manifests.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        /// Output directory (gets `train/` and `test/`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or load) every configured model and report accuracies.
    Train(Common),
    /// Whitebox attack on the first model with the `[attack]` settings.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long)]
        kernel_size: Option<usize>,
    },
    /// Whitebox success / SSIM / naturalness curves over the `[sweep]` grid.
    Sweep(Common),
    /// Transfer matrix over all models for every `[transfer]` method.
    Transfer(Common),
    /// Transfer matrices along the pyramid-level (L) or kernel-size (K) grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "L")]
        axis: AblationAxis,
    },
    /// Rebuild the CSV tables of a finished run from its `results.jsonl`.
    Report {
        /// Directory of the earlier run.
        #[arg(long)]
        input: PathBuf,
        /// Where to write the tables (defaults to the input directory).
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    sample_limit: Option<usize>,
    #[arg(long)]
    saved_images: Option<usize>,
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = load_config(self.config.as_ref())?;
        cfg.seed = self.seed;
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(n) = self.sample_limit {
            cfg.sample_limit = n;
        }
        if let Some(n) = self.saved_images {
            cfg.saved_images = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            let spec: SyntheticSpec = load_config(config.as_ref())?.dataset.synthetic;
            let (train, test) = generate_synthetic_dataset(&spec, seed)?;
            let a = write_manifest(&train, out.join("train"))?;
            let b = write_manifest(&test, out.join("test"))?;
            eprintln!("wrote {} and {}", a.display(), b.display());
        }
        Command::Train(common) => {
            let cfg = common.config()?;
            let data = load_dataset(&cfg)?;
            let (_, summaries) = prepare_models(&cfg, &data)?;
            for s in &summaries {
                eprintln!(
                    "{} ({}): train {:.4}, test {:.4}{}",
                    s.name,
                    s.arch,
                    s.train_accuracy,
                    s.test_accuracy,
                    if s.trained { "" } else { " (loaded)" }
                );
            }
            let path = emit_training_report(&summaries, &cfg, &cfg.output_dir)?;
            eprintln!("wrote {}", path.display());
        }
        Command::Attack {
            common,
            method,
            alpha,
            epsilon,
            levels,
            kernel_size,
        } => {
            let mut cfg = common.config()?;
            let a = &mut cfg.attack;
            a.method = method.unwrap_or(a.method);
            a.alpha = alpha.unwrap_or(a.alpha);
            a.epsilon = epsilon.unwrap_or(a.epsilon);
            a.levels = levels.unwrap_or(a.levels);
            a.kernel_size = kernel_size.unwrap_or(a.kernel_size);
            cfg.validate()?;
            let data = load_dataset(&cfg)?;
            let (models, _) = prepare_models(&cfg, &data)?;
            let corpus = prepare_corpus(&cfg, &data)?;
            let records = run_whitebox(&cfg, &models, data.attack_set(cfg.sample_limit), corpus.as_ref())?;
            emit_report(&records, &cfg, "attack", &cfg.output_dir)?;
        }
        Command::Sweep(common) => {
            let cfg = common.config()?;
            let data = load_dataset(&cfg)?;
            let (models, _) = prepare_models(&cfg, &data)?;
            let corpus = prepare_corpus(&cfg, &data)?;
            let records = run_whitebox_sweep(&cfg, &models, data.attack_set(cfg.sample_limit), corpus.as_ref())?;
            emit_report(&records, &cfg, "sweep", &cfg.output_dir)?;
        }
        Command::Transfer(common) => {
            let cfg = common.config()?;
            let data = load_dataset(&cfg)?;
            let (models, _) = prepare_models(&cfg, &data)?;
            let records = run_transfer_matrix(&cfg, &models, data.attack_set(cfg.sample_limit))?;
            emit_report(&records, &cfg, "transfer", &cfg.output_dir)?;
        }
        Command::Ablate { common, axis } => {
            let cfg = common.config()?;
            let data = load_dataset(&cfg)?;
            let (models, _) = prepare_models(&cfg, &data)?;
            let records = run_ablation(&cfg, &models, data.attack_set(cfg.sample_limit), axis)?;
            emit_report(&records, &cfg, "ablate", &cfg.output_dir)?;
        }
        Command::Report { input, output_dir } => {
            let manifest = read_manifest(input.join("manifest.json"))?;
            let records = read_results(input.join("results.jsonl"))?;
            let out = output_dir.unwrap_or(input);
            emit_report(&records, &manifest.config, "report", &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
