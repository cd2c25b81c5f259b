//! The alternating optimization loop: one discriminator update on the real
//! pyramid plus fresh fakes, then one generator update on fresh fakes, both
//! with RMSprop. Every random draw comes from a stream keyed by
//! (seed, purpose, step), so training is bit-reproducible and resuming from a
//! checkpoint re-derives exactly the streams an uninterrupted run would use.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::arch_spec::{ArchitectureSpec, ConnectionMode};
use crate::checkpoint::{Checkpoint, EpochSnapshot};
use crate::combine::{self, Combine};
use crate::config::{fnv1a64, ExperimentConfig};
use crate::data::{self, BatchIterator, DataSource, RealBatch};
use crate::discriminator;
use crate::error::{Error, Result};
use crate::extractor::{self, FeatureExtractor};
use crate::generator;
use crate::graph::Graph;
use crate::losses::{self, AdversarialLoss, LossReport};
use crate::metrics::{self, StabilityCurve};
use crate::optim::RmsProp;
use crate::params::ParamSet;
use crate::rng;
use crate::tensor::{Real, Shape, Tensor};

/// Latent rows held fixed across a run for snapshots and sample grids.
pub const STABILITY_LATENTS: usize = 36;

fn tensor_fingerprint(t: &Tensor<f32>) -> u64 {
    let mut bytes = Vec::with_capacity(t.data().len() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fnv1a64(&bytes)
}

/// Stacks `[k, c, h, w]` tensors along the batch axis.
fn concat_batch(parts: &[Tensor<f32>]) -> Tensor<f32> {
    assert!(!parts.is_empty());
    let [_, c, h, w] = parts[0].shape().0;
    let n: usize = parts.iter().map(|p| p.shape().n()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for p in parts {
        assert_eq!(p.shape().0[1..], [c, h, w]);
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(Shape::nchw(n, c, h, w), data)
}

/// Everything that evolves during a run and lands in checkpoints.
pub struct TrainingState {
    pub gen_params: ParamSet<f32>,
    pub disc_params: ParamSet<f32>,
    pub gen_opt: RmsProp<f32>,
    pub disc_opt: RmsProp<f32>,
    /// Exponential moving average of generator parameters, when enabled.
    pub gen_ema: Option<ParamSet<f32>>,
    pub step: u64,
    pub real_images_shown: u64,
    pub epoch: u64,
    pub batch_in_epoch: u64,
    /// Fixed `[36, latent, 1, 1]` rows sampled once at initialization.
    pub fixed_eval_latents: Tensor<f32>,
}

/// Per-step outcome: the loss report plus the L2 gradient norm that reached
/// each generator to-RGB head (0 where no gradient path exists).
pub struct StepReport {
    pub loss: LossReport,
    pub rgb_grad_norms: BTreeMap<usize, f64>,
}

/// A configured run: resolved architecture, strategies, and mutable state.
pub struct Trainer {
    pub config: ExperimentConfig,
    pub spec: ArchitectureSpec,
    pub state: TrainingState,
    combine: Arc<dyn Combine<f32>>,
    loss: Arc<dyn AdversarialLoss<f32>>,
}

impl Trainer {
    /// Fresh state from a validated config: N(0,1) parameters (scaled at bind
    /// time when equalized_lr is on), zeroed moments, fixed latents drawn
    /// once from the seed.
    pub fn init(config: &ExperimentConfig) -> Result<Trainer> {
        let spec = config.validate()?;
        let combine = combine::for_kind::<f32>(spec.combine_kind);
        let loss = losses::for_kind::<f32>(spec.loss_kind, &config.penalty_options());
        let gen_params = ParamSet::init(
            generator::param_defs(&spec),
            config.equalized_lr,
            &mut rng::stream(config.seed, "init.gen", 0),
        );
        let disc_params = ParamSet::init(
            discriminator::param_defs(&spec, combine.as_ref()),
            config.equalized_lr,
            &mut rng::stream(config.seed, "init.disc", 0),
        );
        let gen_opt = RmsProp::new(config.lr, &gen_params);
        let disc_opt = RmsProp::new(config.lr, &disc_params);
        let gen_ema = config.ema_generator.then(|| gen_params.clone());
        let z = generator::sample_latent::<f32, _>(
            STABILITY_LATENTS,
            spec.latent_dim,
            &mut rng::stream(config.seed, "eval.latents", 0),
        )?;
        let fixed_eval_latents = generator::normalize_latent(&z);
        Ok(Trainer {
            config: config.clone(),
            spec,
            state: TrainingState {
                gen_params,
                disc_params,
                gen_opt,
                disc_opt,
                gen_ema,
                step: 0,
                real_images_shown: 0,
                epoch: 0,
                batch_in_epoch: 0,
                fixed_eval_latents,
            },
            combine,
            loss,
        })
    }

    pub fn latents_fingerprint(&self) -> u64 {
        tensor_fingerprint(&self.state.fixed_eval_latents)
    }

    /// Run the generator on fresh latents from `purpose`/`step` and return
    /// its images at every scale as plain tensors (detached).
    fn sample_fakes(&self, batch: usize, purpose: &str) -> Result<BTreeMap<usize, Tensor<f32>>> {
        let z = generator::sample_latent::<f32, _>(
            batch,
            self.spec.latent_dim,
            &mut rng::stream(self.config.seed, purpose, self.state.step),
        )?;
        let z = generator::normalize_latent(&z);
        let mut g = Graph::new();
        let bound = self.state.gen_params.bind(&mut g);
        let zv = g.leaf(z);
        let images = generator::forward(&mut g, &self.spec, &bound, zv)?;
        Ok(images.into_iter().map(|(r, v)| (r, g.value(v).clone())).collect())
    }

    /// One discriminator update then one generator update; advances counters.
    pub fn train_step(&mut self, batch: &RealBatch<f32>) -> Result<StepReport> {
        let n = batch.images.shape().n();
        let step = self.state.step;

        // -- discriminator update: fakes are detached tensors ---------------
        let fakes = self.sample_fakes(n, "train.z.disc")?;
        let mut disc_report;
        {
            let mut g = Graph::new();
            let bound = self.state.disc_params.bind(&mut g);
            let real_vars: BTreeMap<usize, _> =
                batch.pyramid.iter().map(|(&r, t)| (r, g.leaf(t.clone()))).collect();
            let fake_vars: BTreeMap<usize, _> = fakes
                .iter()
                .filter(|(r, _)| self.spec.connection_mask.contains(r))
                .map(|(&r, t)| (r, g.leaf(t.clone())))
                .collect();
            let spec = &self.spec;
            let combine = self.combine.as_ref();
            let mut critic = |g: &mut Graph<f32>, images: &BTreeMap<usize, _>| {
                discriminator::forward(g, spec, combine, &bound, images)
            };
            let out = self.loss.disc_loss(
                &mut g,
                &real_vars,
                &fake_vars,
                &mut critic,
                &mut rng::stream(self.config.seed, "train.alpha", step),
            )?;
            let total = g.value(out.total).item().to_f64();
            if !total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("discriminator loss {}", total),
                });
            }
            disc_report = out.report(&g, f64::NAN);
            let grad_vars = g.grad(out.total, &bound.leaves);
            let grads: Vec<Option<Tensor<f32>>> =
                grad_vars.into_iter().map(|ov| ov.map(|v| g.value(v).clone())).collect();
            self.state.disc_opt.step(&mut self.state.disc_params, &grads);
        }

        // -- generator update: gradients flow through the discriminator -----
        let rgb_grad_norms;
        {
            let z = generator::sample_latent::<f32, _>(
                n,
                self.spec.latent_dim,
                &mut rng::stream(self.config.seed, "train.z.gen", step),
            )?;
            let z = generator::normalize_latent(&z);
            let mut g = Graph::new();
            let bound_gen = self.state.gen_params.bind(&mut g);
            let bound_disc = self.state.disc_params.bind(&mut g);
            let zv = g.leaf(z);
            let images = generator::forward(&mut g, &self.spec, &bound_gen, zv)?;
            let subset = discriminator::masked_subset(&self.spec, &images);
            let scores =
                discriminator::forward(&mut g, &self.spec, self.combine.as_ref(), &bound_disc, &subset)?;
            let gen_loss_var = self.loss.gen_loss(&mut g, scores);
            let gen_loss = g.value(gen_loss_var).item().to_f64();
            if !gen_loss.is_finite() {
                return Err(Error::Divergence { step, detail: format!("generator loss {}", gen_loss) });
            }
            disc_report.gen_loss = gen_loss;
            let grad_vars = g.grad(gen_loss_var, &bound_gen.leaves);
            let grads: Vec<Option<Tensor<f32>>> =
                grad_vars.into_iter().map(|ov| ov.map(|v| g.value(v).clone())).collect();
            rgb_grad_norms = self
                .spec
                .gen_blocks
                .iter()
                .map(|b| {
                    let idx = self.state.gen_params.index_of(&format!("gen.rgb{}.weight", b.resolution));
                    let norm = grads[idx].as_ref().map_or(0.0, |t| {
                        t.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
                    });
                    (b.resolution, norm)
                })
                .collect();
            self.state.gen_opt.step(&mut self.state.gen_params, &grads);
        }

        if let Some(ema) = &mut self.state.gen_ema {
            let beta = self.config.ema_beta as f32;
            for (e, p) in ema.values_mut().iter_mut().zip(self.state.gen_params.values()) {
                for (ev, &pv) in e.data_mut().iter_mut().zip(p.data()) {
                    *ev = beta * *ev + (1.0 - beta) * pv;
                }
            }
        }

        self.state.step += 1;
        self.state.real_images_shown += n as u64;
        Ok(StepReport { loss: disc_report, rgb_grad_norms })
    }

    /// Full state as a versioned checkpoint.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut blocks = BTreeMap::new();
        let sets = [
            ("", &self.state.gen_params, &self.state.gen_opt),
            ("", &self.state.disc_params, &self.state.disc_opt),
        ];
        for (_, params, opt) in sets {
            for (def, value) in params.defs().iter().zip(params.values()) {
                blocks.insert(def.name.clone(), value.clone());
            }
            for (def, moment) in params.defs().iter().zip(opt.moments()) {
                blocks.insert(format!("opt.{}", def.name), moment.clone());
            }
        }
        if let Some(ema) = &self.state.gen_ema {
            for (def, value) in ema.defs().iter().zip(ema.values()) {
                blocks.insert(format!("ema.{}", def.name), value.clone());
            }
        }
        blocks.insert("state.fixed_eval_latents".into(), self.state.fixed_eval_latents.clone());
        Checkpoint {
            spec: self.spec.clone(),
            config_hash: self.config.hash(),
            seed: self.config.seed,
            equalized_lr: self.config.equalized_lr,
            step: self.state.step,
            real_images_shown: self.state.real_images_shown,
            epoch: self.state.epoch,
            batch_in_epoch: self.state.batch_in_epoch,
            blocks,
        }
    }

    /// Rebuilds a trainer mid-run. The architecture, seed, and equalization
    /// flag must match the config; a changed config hash is only warned
    /// about, so cadence or output settings may differ.
    pub fn from_checkpoint(config: &ExperimentConfig, ckpt: &Checkpoint) -> Result<Trainer> {
        let mut t = Trainer::init(config)?;
        if ckpt.spec != t.spec {
            return Err(Error::IncompatibleCheckpoint(
                "checkpoint was trained with a different architecture".into(),
            ));
        }
        if ckpt.seed != config.seed {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint seed {} differs from config seed {}; resuming would change the trajectory",
                ckpt.seed, config.seed
            )));
        }
        if ckpt.equalized_lr != config.equalized_lr {
            return Err(Error::IncompatibleCheckpoint(
                "checkpoint equalized_lr flag differs from config".into(),
            ));
        }
        if ckpt.config_hash != config.hash() {
            log::warn!("resuming with a config whose hash differs from the checkpoint's");
        }
        let restore = |params: &mut ParamSet<f32>, opt: &mut RmsProp<f32>| -> Result<()> {
            for i in 0..params.len() {
                let name = params.defs()[i].name.clone();
                let block = ckpt
                    .blocks
                    .get(&name)
                    .ok_or_else(|| {
                        Error::IncompatibleCheckpoint(format!("missing parameter block '{}'", name))
                    })?
                    .clone();
                params.set_value(&name, block);
                let moment = ckpt.blocks.get(&format!("opt.{}", name)).ok_or_else(|| {
                    Error::IncompatibleCheckpoint(format!("missing moment block 'opt.{}'", name))
                })?;
                opt.set_moment(i, moment.clone());
            }
            Ok(())
        };
        restore(&mut t.state.gen_params, &mut t.state.gen_opt)?;
        restore(&mut t.state.disc_params, &mut t.state.disc_opt)?;
        if config.ema_generator {
            let mut ema = t.state.gen_params.clone();
            let mut any = false;
            for i in 0..ema.len() {
                let name = format!("ema.{}", ema.defs()[i].name.clone());
                if let Some(block) = ckpt.blocks.get(&name) {
                    let pname = ema.defs()[i].name.clone();
                    ema.set_value(&pname, block.clone());
                    any = true;
                }
            }
            if !any {
                log::warn!("checkpoint has no parameter averages; starting them from the loaded parameters");
            }
            t.state.gen_ema = Some(ema);
        }
        let latents = ckpt.blocks.get("state.fixed_eval_latents").ok_or_else(|| {
            Error::IncompatibleCheckpoint("missing block 'state.fixed_eval_latents'".into())
        })?;
        t.state.fixed_eval_latents = latents.clone();
        t.state.step = ckpt.step;
        t.state.real_images_shown = ckpt.real_images_shown;
        t.state.epoch = ckpt.epoch;
        t.state.batch_in_epoch = ckpt.batch_in_epoch;
        Ok(t)
    }

    /// Generator output at every scale for the run's fixed latents.
    pub fn snapshot(&self) -> Result<EpochSnapshot> {
        let images = generate_pyramid(
            &self.spec,
            &self.state.gen_params,
            &self.state.fixed_eval_latents,
            self.config.batch_size,
        )?;
        Ok(EpochSnapshot {
            epoch: self.state.epoch,
            latents_fingerprint: self.latents_fingerprint(),
            images,
        })
    }
}

/// Chunked generator forward over a fixed latent batch; concatenates each
/// scale's images across chunks so peak memory stays at one chunk's graph.
pub fn generate_pyramid(
    spec: &ArchitectureSpec,
    gen_params: &ParamSet<f32>,
    latents: &Tensor<f32>,
    chunk: usize,
) -> Result<BTreeMap<usize, Tensor<f32>>> {
    let [n, latent, _, _] = latents.shape().0;
    if latent != spec.latent_dim {
        return Err(Error::InvalidArgument(format!(
            "latents have width {}, architecture wants {}",
            latent, spec.latent_dim
        )));
    }
    let chunk = chunk.max(1);
    let mut parts: BTreeMap<usize, Vec<Tensor<f32>>> = BTreeMap::new();
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let slice = Tensor::from_vec(
            Shape::nchw(len, latent, 1, 1),
            latents.data()[start * latent..(start + len) * latent].to_vec(),
        );
        let mut g = Graph::new();
        let bound = gen_params.bind(&mut g);
        let zv = g.leaf(slice);
        let images = generator::forward(&mut g, spec, &bound, zv)?;
        for (r, v) in images {
            parts.entry(r).or_default().push(g.value(v).clone());
        }
        start += len;
    }
    Ok(parts.into_iter().map(|(r, p)| (r, concat_batch(&p))).collect())
}

/// Generator parameters alone from a checkpoint, preferring averaged blocks
/// when the run maintained them.
pub fn gen_params_from_checkpoint(ckpt: &Checkpoint) -> Result<ParamSet<f32>> {
    let defs = generator::param_defs(&ckpt.spec);
    let mut params = ParamSet::init(
        defs,
        ckpt.equalized_lr,
        &mut rng::stream(ckpt.seed, "init.gen", 0),
    );
    for i in 0..params.len() {
        let name = params.defs()[i].name.clone();
        let block = ckpt
            .blocks
            .get(&format!("ema.{}", name))
            .or_else(|| ckpt.blocks.get(&name))
            .ok_or_else(|| {
                Error::IncompatibleCheckpoint(format!("missing parameter block '{}'", name))
            })?;
        params.set_value(&name, block.clone());
    }
    Ok(params)
}

/// Distribution distance between generated and real images in the chosen
/// feature space. Fake images come from fixed latents derived from the seed,
/// so successive evaluations during one run are comparable.
pub fn evaluate_fid_proxy(
    spec: &ArchitectureSpec,
    gen_params: &ParamSet<f32>,
    source: &dyn DataSource<f32>,
    extractor: &dyn FeatureExtractor<f32>,
    eval_samples: usize,
    seed: u64,
    chunk: usize,
) -> Result<f64> {
    let real_stats = real_feature_stats(source, extractor, eval_samples)?;
    let fake_stats = generated_feature_stats(spec, gen_params, extractor, eval_samples, seed, chunk)?;
    metrics::frechet_distance(&fake_stats, &real_stats)
}

/// Feature statistics of the first `eval_samples` dataset images (a fixed,
/// order-independent subset).
pub fn real_feature_stats(
    source: &dyn DataSource<f32>,
    extractor: &dyn FeatureExtractor<f32>,
    eval_samples: usize,
) -> Result<metrics::FeatureStats> {
    if source.len() < eval_samples {
        return Err(Error::InvalidArgument(format!(
            "dataset holds {} images, fewer than eval_samples {}",
            source.len(),
            eval_samples
        )));
    }
    let images: Vec<Tensor<f32>> = (0..eval_samples).map(|i| source.image(i)).collect();
    let batch = concat_batch(&images);
    metrics::feature_stats(&extractor.features(&batch))
}

/// Feature statistics of `eval_samples` generated images from the fixed
/// evaluation latents.
pub fn generated_feature_stats(
    spec: &ArchitectureSpec,
    gen_params: &ParamSet<f32>,
    extractor: &dyn FeatureExtractor<f32>,
    eval_samples: usize,
    seed: u64,
    chunk: usize,
) -> Result<metrics::FeatureStats> {
    let z = generator::sample_latent::<f32, _>(
        eval_samples,
        spec.latent_dim,
        &mut rng::stream(seed, "eval.z", 0),
    )?;
    let z = generator::normalize_latent(&z);
    let pyramid = generate_pyramid(spec, gen_params, &z, chunk)?;
    let top = &pyramid[&spec.final_resolution];
    metrics::feature_stats(&extractor.features(top))
}

// ---------------------------------------------------------------------------
// Full runs
// ---------------------------------------------------------------------------

/// One metric CSV row.
#[derive(Clone, Copy, Debug)]
pub struct MetricRow {
    pub step: u64,
    pub real_images_shown: u64,
    pub gen_loss: f64,
    pub disc_loss: f64,
    pub penalty: f64,
    pub fid_proxy: f64,
}

pub const METRICS_HEADER: &str = "step,real_images_shown,gen_loss,disc_loss,penalty,fid_proxy";

/// What a completed (or diverged) run produced.
#[derive(Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    /// Step at which training diverged, if it did.
    pub diverged: Option<u64>,
    pub steps_run: u64,
    pub real_images_shown: u64,
    /// The last metric row written, if any.
    pub final_metrics: Option<MetricRow>,
    pub stability: Option<StabilityCurve>,
}

fn prepare_out_dir(dir: &Path, resuming: bool) -> Result<()> {
    if dir.exists() && !resuming && fs::read_dir(dir)?.next().is_some() {
        return Err(Error::InvalidConfig(format!(
            "output directory {} is not empty; refusing to touch an existing run",
            dir.display()
        )));
    }
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::create_dir_all(dir.join("grids"))?;
    Ok(())
}

fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<PathBuf> {
    let path = dir.join("checkpoints").join(format!("step_{:08}.ckpt", ckpt.step));
    ckpt.save(&path)?;
    ckpt.save(&dir.join("checkpoints").join("latest.ckpt"))?;
    Ok(path)
}

fn write_snapshot_artifacts(dir: &Path, snap: &EpochSnapshot) -> Result<()> {
    snap.save(&dir.join("checkpoints").join(format!("epoch_{:06}.snap", snap.epoch)))?;
    let scales = metrics::render_scale_grid(&snap.images)?;
    metrics::save_png(&scales, &dir.join("grids").join(format!("epoch_{:06}_scales.png", snap.epoch)))?;
    let top_res = *snap.images.keys().next_back().unwrap();
    let top = metrics::render_top_grid(&snap.images[&top_res])?;
    metrics::save_png(&top, &dir.join("grids").join(format!("epoch_{:06}_top.png", snap.epoch)))?;
    Ok(())
}

/// All epoch snapshots stored in a run directory, in epoch order.
pub fn load_snapshots(run_dir: &Path) -> Result<Vec<EpochSnapshot>> {
    let dir = run_dir.join("checkpoints");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {}", dir.display(), e)))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("snap"))
        .collect();
    paths.sort();
    let mut snaps = Vec::with_capacity(paths.len());
    for p in paths {
        snaps.push(EpochSnapshot::load(&p)?);
    }
    Ok(snaps)
}

/// Recomputes the stability curve from a run directory's snapshots and writes
/// `stability.csv` there.
pub fn write_stability_csv(run_dir: &Path) -> Result<StabilityCurve> {
    let snaps = load_snapshots(run_dir)?;
    let curve = metrics::stability_curve(&snaps)?;
    fs::write(run_dir.join("stability.csv"), curve.to_csv())?;
    Ok(curve)
}

/// Runs training to the configured budget (or resumes from a checkpoint),
/// writing `config.json`, `metrics.csv`, periodic checkpoints, per-epoch
/// snapshots with sample grids, and `stability.csv` into the output
/// directory. Divergence is caught, checkpointed, and reported in the
/// outcome rather than returned as an error.
pub fn train(config: &ExperimentConfig, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    let spec = config.validate()?;
    let out_dir = config.out_dir.clone();
    prepare_out_dir(&out_dir, resume.is_some())?;
    config.save(&out_dir.join("config.json"))?;

    let mut trainer = match resume {
        Some(ckpt) => Trainer::from_checkpoint(config, ckpt)?,
        None => Trainer::init(config)?,
    };
    let source = data::open_source::<f32>(&config.dataset, &config.source_config())?;
    let feat = extractor::open_extractor::<f32>(&config.extractor)?;
    let mut iterator = BatchIterator::new(
        source.clone(),
        config.batch_size,
        config.seed,
        spec.connection_mask.clone(),
    )?;
    if resume.is_some() {
        iterator.set_position(trainer.state.epoch, trainer.state.batch_in_epoch);
    }

    let metrics_path = out_dir.join("metrics.csv");
    if !metrics_path.exists() {
        fs::write(&metrics_path, format!("{}\n", METRICS_HEADER))?;
    }
    let mut metrics_file = fs::OpenOptions::new().append(true).open(&metrics_path)?;

    let real_stats = real_feature_stats(
        source.as_ref(),
        feat.as_ref(),
        config.eval_samples.min(source.len()),
    )?;
    let eval_samples = config.eval_samples.min(source.len());

    save_checkpoint(&out_dir, &trainer.to_checkpoint())?;
    if resume.is_none() {
        write_snapshot_artifacts(&out_dir, &trainer.snapshot()?)?;
    }

    let mut diverged = None;
    let mut final_metrics: Option<MetricRow> = None;
    let mut last_report: Option<StepReport> = None;

    while trainer.state.real_images_shown < config.budget {
        let batch = iterator.next_batch()?;
        let epoch_before = trainer.state.epoch;
        match trainer.train_step(&batch) {
            Ok(report) => {
                trainer.state.epoch = iterator.epoch();
                trainer.state.batch_in_epoch = iterator.batch_in_epoch();
                if trainer.state.epoch != epoch_before {
                    write_snapshot_artifacts(&out_dir, &trainer.snapshot()?)?;
                    log::info!(
                        "epoch {} begins at step {} ({} real images shown)",
                        trainer.state.epoch,
                        trainer.state.step,
                        trainer.state.real_images_shown
                    );
                }
                let finished = trainer.state.real_images_shown >= config.budget;
                if trainer.state.step % config.metrics_every_steps == 0 || finished {
                    let fid = {
                        let fake = generated_feature_stats(
                            &trainer.spec,
                            &trainer.state.gen_params,
                            feat.as_ref(),
                            eval_samples,
                            config.seed,
                            config.batch_size,
                        )?;
                        metrics::frechet_distance(&fake, &real_stats)?
                    };
                    let row = MetricRow {
                        step: trainer.state.step,
                        real_images_shown: trainer.state.real_images_shown,
                        gen_loss: report.loss.gen_loss,
                        disc_loss: report.loss.disc_loss,
                        penalty: report.loss.penalty,
                        fid_proxy: fid,
                    };
                    writeln!(
                        metrics_file,
                        "{},{},{},{},{},{}",
                        row.step, row.real_images_shown, row.gen_loss, row.disc_loss, row.penalty, row.fid_proxy
                    )?;
                    log::debug!("to-RGB gradient norms: {:?}", report.rgb_grad_norms);
                    final_metrics = Some(row);
                }
                if trainer.state.step % config.checkpoint_every_steps == 0 {
                    save_checkpoint(&out_dir, &trainer.to_checkpoint())?;
                }
                last_report = Some(report);
            }
            Err(Error::Divergence { step, detail }) => {
                log::error!("training diverged at step {}: {}", step, detail);
                diverged = Some(step);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let _ = last_report;

    let final_checkpoint = save_checkpoint(&out_dir, &trainer.to_checkpoint())?;
    let stability = match write_stability_csv(&out_dir) {
        Ok(curve) => Some(curve),
        Err(Error::InvalidArgument(msg)) if msg.contains("need ≥ 2 epochs") => None,
        Err(e) => return Err(e),
    };

    Ok(TrainOutcome {
        out_dir,
        final_checkpoint,
        diverged,
        steps_run: trainer.state.step,
        real_images_shown: trainer.state.real_images_shown,
        final_metrics,
        stability,
    })
}

// ---------------------------------------------------------------------------
// Sweeps and ablations
// ---------------------------------------------------------------------------

/// One line of a sweep/ablation comparison table.
#[derive(Clone, Debug)]
pub struct ComparisonRow {
    pub label: String,
    pub out_dir: PathBuf,
    pub fid_proxy: Option<f64>,
    pub diverged: Option<u64>,
    pub error: Option<String>,
}

impl ComparisonRow {
    pub fn status(&self) -> String {
        if let Some(e) = &self.error {
            format!("error: {}", e)
        } else if let Some(s) = self.diverged {
            format!("diverged at step {}", s)
        } else {
            "ok".into()
        }
    }
}

pub fn comparison_csv(key: &str, rows: &[ComparisonRow]) -> String {
    let mut out = format!("{},fid_proxy,status\n", key);
    for r in rows {
        out.push_str(&format!(
            "{0},{1},{2}\n",
            r.label,
            r.fid_proxy.map(|f| f.to_string()).unwrap_or_default(),
            r.status()
        ));
    }
    out
}

fn run_child(config: &ExperimentConfig, label: &str) -> ComparisonRow {
    match train(config, None) {
        Ok(outcome) => ComparisonRow {
            label: label.to_string(),
            out_dir: outcome.out_dir,
            fid_proxy: outcome.final_metrics.map(|m| m.fid_proxy),
            diverged: outcome.diverged,
            error: None,
        },
        Err(e) => ComparisonRow {
            label: label.to_string(),
            out_dir: config.out_dir.clone(),
            fid_proxy: None,
            diverged: None,
            error: Some(e.to_string()),
        },
    }
}

/// Independent runs per learning rate, shared seed; per-run failures land in
/// their row instead of aborting siblings. Writes `sweep_lr.csv` under the
/// parent output directory.
pub fn lr_sweep(config: &ExperimentConfig, lrs: &[f64]) -> Result<Vec<ComparisonRow>> {
    if lrs.is_empty() {
        return Err(Error::InvalidArgument("learning-rate sweep needs at least one rate".into()));
    }
    let parent = config.out_dir.clone();
    prepare_out_dir(&parent, false)?;
    let mut rows = Vec::new();
    for &lr in lrs {
        let label = format!("{}", lr);
        let mut child = config.clone();
        child.lr = lr;
        child.out_dir = parent.join(format!("lr_{}", label));
        log::info!("sweep: lr = {}", label);
        rows.push(run_child(&child, &label));
    }
    fs::write(parent.join("sweep_lr.csv"), comparison_csv("lr", &rows))?;
    Ok(rows)
}

/// Independent runs per connection mode, shared seed; duplicates are dropped
/// with a warning. Writes `ablation.csv` under the parent output directory.
pub fn ablate(config: &ExperimentConfig, modes: &[ConnectionMode]) -> Result<Vec<ComparisonRow>> {
    let mut seen = Vec::new();
    for &m in modes {
        if seen.contains(&m) {
            log::warn!("duplicate ablation mode '{}' ignored", m.as_str());
        } else {
            seen.push(m);
        }
    }
    if seen.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one mode".into()));
    }
    let parent = config.out_dir.clone();
    prepare_out_dir(&parent, false)?;
    let mut rows = Vec::new();
    for mode in seen {
        let mut child = config.clone();
        child.connection_mode = mode.as_str().to_string();
        child.out_dir = parent.join(format!("mode_{}", mode.as_str()));
        log::info!("ablation: mode = {}", mode.as_str());
        rows.push(run_child(&child, mode.as_str()));
    }
    fs::write(parent.join("ablation.csv"), comparison_csv("mode", &rows))?;
    Ok(rows)
}
