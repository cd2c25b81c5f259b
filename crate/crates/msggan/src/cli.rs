//! Command-line interface: training, sampling, evaluation, stability
//! analysis, learning-rate sweeps, connection-mode ablations, and
//! architecture inspection behind one binary.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::arch_spec::ConnectionMode;
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::open_source;
use crate::device;
use crate::error::{Error, Result};
use crate::extractor::open_extractor;
use crate::generator;
use crate::metrics;
use crate::rng;
use crate::training::{self, ComparisonRow};

#[derive(Parser, Debug)]
#[command(
    name = "msggan",
    version,
    about = "Multi-scale GAN training: every generator scale feeds the discriminator"
)]
pub struct Cli {
    /// Experiment config as flat JSON; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override the config's random seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train until the real-image budget is spent.
    Train {
        /// Checkpoint file or run directory to resume from.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Render image grids (all scales, plus the top scale alone) from a
    /// checkpoint. Uses averaged generator weights when the checkpoint
    /// carries them.
    Sample {
        /// Checkpoint file or run directory.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Number of samples (one grid row each in the per-scale sheet).
        #[arg(long, default_value_t = 36)]
        n: usize,
    },
    /// Score a checkpoint against the configured dataset: distribution
    /// distance in feature space, plus a class-entropy score when the
    /// extractor exposes class posteriors.
    Evaluate {
        /// Checkpoint file or run directory.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Recompute the fixed-latent stability curve of a finished run
    /// directory and rewrite its stability.csv.
    Stability {
        /// Run directory holding checkpoints/*.snap.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
    },
    /// Train one independent run per learning rate and compare final scores.
    SweepLr {
        /// Comma-separated learning rates, e.g. 0.001,0.003,0.01.
        #[arg(long, value_delimiter = ',', required = true, value_name = "LRS")]
        lrs: Vec<f64>,
    },
    /// Train one independent run per connection mode and compare final
    /// scores.
    Ablate {
        /// Comma-separated modes from none|coarse|middle|fine|all.
        #[arg(long, value_delimiter = ',', required = true, value_name = "MODES")]
        modes: Vec<String>,
    },
    /// Print the resolved architecture (blocks, channels, parameter counts).
    Arch,
}

/// `path` may be a checkpoint file or a run directory; directories resolve
/// to their newest checkpoint.
fn resolve_checkpoint_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("checkpoints").join("latest.ckpt")
    } else {
        path.to_path_buf()
    }
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

fn print_comparison(key: &str, rows: &[ComparisonRow]) {
    println!("{:<12} {:>14}  status", key, "fid_proxy");
    for row in rows {
        let fid = match row.fid_proxy {
            Some(f) => format!("{:.4}", f),
            None => "-".into(),
        };
        println!("{:<12} {:>14}  {}", row.label, fid, row.status());
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let device = device::select_from_env()?;
    log::info!("compute device: {} ({})", device.name(), device.description());
    let config = effective_config(&cli)?;

    match &cli.command {
        Command::Train { resume } => {
            let ckpt = match resume {
                Some(path) => Some(Checkpoint::load(&resolve_checkpoint_path(path))?),
                None => None,
            };
            let outcome = training::train(&config, ckpt.as_ref())?;
            println!("run directory: {}", outcome.out_dir.display());
            println!(
                "steps run: {}   real images shown: {}",
                outcome.steps_run, outcome.real_images_shown
            );
            if let Some(m) = &outcome.final_metrics {
                println!("final fid_proxy: {:.4}", m.fid_proxy);
            }
            println!("final checkpoint: {}", outcome.final_checkpoint.display());
            if let Some(step) = outcome.diverged {
                return Err(Error::Divergence {
                    step,
                    detail: "final checkpoint saved; inspect metrics.csv and lower the learning rate".into(),
                });
            }
        }
        Command::Sample { checkpoint, n } => {
            if *n < 1 {
                return Err(Error::InvalidArgument("sample count must be >= 1".into()));
            }
            let ckpt = Checkpoint::load(&resolve_checkpoint_path(checkpoint))?;
            let params = training::gen_params_from_checkpoint(&ckpt)?;
            let mut r = rng::stream(config.seed, "sample", 0);
            let z = generator::sample_latent::<f32, _>(*n, ckpt.spec.latent_dim, &mut r)?;
            let chunk = config.batch_size.max(1);
            let pyramid = training::generate_pyramid(&ckpt.spec, &params, &z, chunk)?;
            let dir = config.out_dir.join("samples");
            std::fs::create_dir_all(&dir)?;
            let scales_path = dir.join(format!("step_{:08}_scales.png", ckpt.step));
            metrics::save_png(&metrics::render_scale_grid(&pyramid)?, &scales_path)?;
            let top_path = dir.join(format!("step_{:08}_top.png", ckpt.step));
            let top = &pyramid[&ckpt.spec.final_resolution];
            metrics::save_png(&metrics::render_top_grid(top)?, &top_path)?;
            println!("wrote {}", scales_path.display());
            println!("wrote {}", top_path.display());
        }
        Command::Evaluate { checkpoint } => {
            let ckpt = Checkpoint::load(&resolve_checkpoint_path(checkpoint))?;
            let params = training::gen_params_from_checkpoint(&ckpt)?;
            let extractor = open_extractor::<f32>(&config.extractor)?;
            let source = open_source::<f32>(&config.dataset, &config.source_config())?;
            if source.resolution() != ckpt.spec.final_resolution {
                log::warn!(
                    "dataset resolution {} differs from generator output {}; \
                     features are pooled to a common grid before comparison",
                    source.resolution(),
                    ckpt.spec.final_resolution
                );
            }
            let eval_samples = config.eval_samples.min(source.len());
            let chunk = config.batch_size.max(1);
            let fid = training::evaluate_fid_proxy(
                &ckpt.spec,
                &params,
                source.as_ref(),
                extractor.as_ref(),
                eval_samples,
                config.seed,
                chunk,
            )?;
            println!("checkpoint step: {}", ckpt.step);
            println!("eval samples: {}", eval_samples);
            println!("fid_proxy: {:.6}", fid);

            // Class-entropy score over generated samples, when available.
            let mut z_rng = rng::stream(config.seed, "eval.z", 0);
            let z = generator::sample_latent::<f32, _>(
                eval_samples,
                ckpt.spec.latent_dim,
                &mut z_rng,
            )?;
            let pyramid = training::generate_pyramid(&ckpt.spec, &params, &z, chunk)?;
            let top = &pyramid[&ckpt.spec.final_resolution];
            if let Some(probs) = extractor.class_probs(top) {
                let splits = config.is_splits.min(eval_samples).max(1);
                if splits < config.is_splits {
                    log::warn!(
                        "only {} samples; class-entropy score uses {} splits instead of {}",
                        eval_samples, splits, config.is_splits
                    );
                }
                let (mean, std) = metrics::inception_score(&probs, splits)?;
                println!("class_entropy_score: {:.4} +/- {:.4}", mean, std);
            }
        }
        Command::Stability { run } => {
            let curve = training::write_stability_csv(run)?;
            println!("wrote {}", run.join("stability.csv").display());
            for scale in curve.scales() {
                let series = curve.series(scale);
                let (first_epoch, first) = series.first().copied().unwrap();
                let (last_epoch, last) = series.last().copied().unwrap();
                println!(
                    "scale {:>4}: mse {:.6} (epoch {}) -> {:.6} (epoch {})",
                    scale, first, first_epoch, last, last_epoch
                );
            }
        }
        Command::SweepLr { lrs } => {
            let rows = training::lr_sweep(&config, lrs)?;
            print_comparison("lr", &rows);
            println!("table: {}", config.out_dir.join("sweep_lr.csv").display());
        }
        Command::Ablate { modes } => {
            let parsed: Vec<ConnectionMode> = modes
                .iter()
                .map(|m| m.parse())
                .collect::<Result<Vec<_>>>()?;
            let rows = training::ablate(&config, &parsed)?;
            print_comparison("mode", &rows);
            println!("table: {}", config.out_dir.join("ablation.csv").display());
        }
        Command::Arch => {
            let spec = config.validate()?;
            print!("{}", spec.summary());
        }
    }
    Ok(())
}
