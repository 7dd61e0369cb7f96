//! Multi-pretext pretraining: cropping, masking, multi-task loss, AdamW with
//! warmup and cosine decay, logging and checkpoints.

pub mod batch;
pub mod checkpoint;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::{collate, optical_input, prepare_sample, Batch, PreparedSample, SampleTarget};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use crate::error::{Error, Result};
use crate::losses::{aggregate_multitask, task_loss, LossMode, TaskTerm};
use crate::masking::sample_mask;
use crate::model::{EncoderConfig, ModelConfig, MpMae};
use crate::nn::{AdamW, AdamWConfig, GradBuffer, Graph, ParamStore, Var};
use crate::schema::{select_tasks, BandStats, LossKind, Registry, TaskSpec, SENTINEL2};
use crate::synthgen::{mix_seed, SampleSource};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Samples per optimizer step.
    pub effective_batch: usize,
    /// Samples per forward pass; gradients accumulate up to `effective_batch`.
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub optimizer: AdamWConfig,
    pub masking_ratio: f64,
    pub loss_mode: LossMode,
    /// Hold every task's log-variance at its initial value.
    pub freeze_log_vars: bool,
    pub crop_size: usize,
    pub seed: u64,
    /// Task selector: `all`, `s2`, `pixel`, `image` or a comma list.
    pub tasks: String,
    /// Standardize optical targets per patch before the loss.
    pub patch_norm_optical: bool,
    pub split: String,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 200,
            base_lr: 1.5e-4,
            effective_batch: 256,
            batch_size: 32,
            warmup_epochs: 20,
            optimizer: AdamWConfig::default(),
            masking_ratio: 0.6,
            loss_mode: LossMode::Uncertainty,
            freeze_log_vars: false,
            crop_size: 56,
            seed: 0,
            tasks: "all".into(),
            patch_norm_optical: true,
            split: "pretrain".into(),
            checkpoint_every: 0,
            model: ModelConfig {
                encoder: EncoderConfig::pico(56, 8),
                decoder: Default::default(),
            },
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.batch_size == 0 || self.effective_batch == 0 || self.effective_batch % self.batch_size != 0 {
            return fail(format!(
                "effective_batch {} must be a positive multiple of batch_size {}",
                self.effective_batch, self.batch_size
            ));
        }
        if !(self.masking_ratio > 0.0 && self.masking_ratio < 1.0) {
            return fail(format!("masking_ratio {} must lie in (0, 1)", self.masking_ratio));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return fail(format!("base_lr {} must be positive", self.base_lr));
        }
        if self.crop_size != self.model.encoder.image_size {
            return fail(format!(
                "crop_size {} differs from the encoder image_size {}",
                self.crop_size, self.model.encoder.image_size
            ));
        }
        self.model.encoder.validate()
    }

    /// `base_lr · effective_batch / 256`.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.effective_batch as f64 / 256.0
    }
}

/// Linear warmup from 0 over `warmup_steps`, then cosine decay reaching 0 at
/// the last step.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, peak: f64) -> f64 {
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(1).saturating_sub(warmup_steps);
    if span == 0 {
        return if step + 1 >= total_steps && total_steps > warmup_steps + 1 { 0.0 } else { peak };
    }
    let t = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEpoch {
    pub task_id: String,
    pub raw_loss: f64,
    pub s_t: f64,
    pub weighted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean aggregated loss in the configured mode.
    pub total_loss: f64,
    /// Mean of Σ_t L_t, comparable across modes.
    pub equal_total: f64,
    pub lr: f64,
    pub wall_secs: f64,
    pub tasks: Vec<TaskEpoch>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub loss_mode: LossMode,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// `epoch,task_id,raw_loss,s_t,weighted,lr`, one row per task plus a
    /// `total` row per epoch. Wall time is kept out so logs compare exactly.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,task_id,raw_loss,s_t,weighted,lr\n");
        for e in &self.epochs {
            for t in &e.tasks {
                let _ = writeln!(s, "{},{},{},{},{},{}", e.epoch, t.task_id, t.raw_loss, t.s_t, t.weighted, e.lr);
            }
            let _ = writeln!(s, "{},total,{},0,{},{}", e.epoch, e.equal_total, e.total_loss, e.lr);
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,wall_secs\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.3}", e.epoch, e.wall_secs);
        }
        s
    }
}

/// Metadata stored alongside the tensors of a pretraining checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainMeta {
    pub kind: String,
    pub config: PretrainConfig,
    pub tasks: Vec<TaskSpec>,
    /// Completed epochs.
    pub epoch: usize,
    pub opt_step: u64,
    /// Seed of the next epoch's stream; epochs derive theirs from the run seed.
    pub next_epoch_seed: u64,
    pub stats_hash: String,
    pub log: TrainLog,
}

pub const PRETRAIN_KIND: &str = "pretrain";
const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";

pub fn stats_hash(stats: &BandStats) -> Result<String> {
    use sha2::{Digest, Sha256};
    let h = Sha256::digest(stats.to_canonical_json()?.as_bytes());
    Ok(h.iter().map(|b| format!("{b:02x}")).collect())
}

/// Pretraining state: model, optimizer, epoch counter and log.
pub struct Pretrainer {
    pub config: PretrainConfig,
    pub model: MpMae,
    pub opt: AdamW,
    pub epoch: usize,
    pub log: TrainLog,
    stats_hash: String,
}

struct StepPlan {
    index: usize,
    top: usize,
    left: usize,
    mask: Arc<crate::masking::PatchMask>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    mix_seed(mix_seed(seed, 0x7e_a1), epoch as u64)
}

impl Pretrainer {
    pub fn new(config: &PretrainConfig, registry: &Registry, stats: &BandStats) -> Result<Self> {
        config.validate()?;
        let tasks = select_tasks(registry, &config.tasks)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x1417));
        let mut model = MpMae::new(&config.model, &tasks, &mut rng)?;
        if config.freeze_log_vars {
            model.store.set_frozen_prefix(crate::model::UNCERTAINTY_PREFIX, true);
        }
        let opt = AdamW::new(config.optimizer, &model.store);
        Ok(Pretrainer {
            config: config.clone(),
            model,
            opt,
            epoch: 0,
            log: TrainLog {
                loss_mode: config.loss_mode,
                epochs: Vec::new(),
            },
            stats_hash: stats_hash(stats)?,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: PretrainMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Config(format!("not a pretraining checkpoint: {e}")))?;
        if meta.kind != PRETRAIN_KIND {
            return Err(Error::Config(format!("checkpoint kind `{}` is not `{PRETRAIN_KIND}`", meta.kind)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = MpMae::new(&meta.config.model, &meta.tasks, &mut rng)?;
        model.store.load_named(&ck.tensors, "")?;
        if meta.config.freeze_log_vars {
            model.store.set_frozen_prefix(crate::model::UNCERTAINTY_PREFIX, true);
        }
        let mut opt = AdamW::new(meta.config.optimizer, &model.store);
        opt.step = meta.opt_step;
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
        for (i, n) in names.iter().enumerate() {
            for (prefix, dst) in [(OPT_M, &mut opt.m), (OPT_V, &mut opt.v)] {
                let key = format!("{prefix}{n}");
                let t = ck
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor `{key}`")))?;
                if t.shape() != dst[i].shape() {
                    return Err(Error::ShapeMismatch {
                        name: key,
                        expected: dst[i].shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
                dst[i] = t.clone();
            }
        }
        Ok(Pretrainer {
            config: meta.config,
            model,
            opt,
            epoch: meta.epoch,
            log: meta.log,
            stats_hash: meta.stats_hash,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = std::collections::BTreeMap::new();
        for (i, (n, t)) in self.model.store.iter().enumerate() {
            tensors.insert(n.to_string(), t.clone());
            tensors.insert(format!("{OPT_M}{n}"), self.opt.m[i].clone());
            tensors.insert(format!("{OPT_V}{n}"), self.opt.v[i].clone());
        }
        let meta = PretrainMeta {
            kind: PRETRAIN_KIND.into(),
            config: self.config.clone(),
            tasks: self.model.tasks().into_iter().cloned().collect(),
            epoch: self.epoch,
            opt_step: self.opt.step,
            next_epoch_seed: epoch_seed(self.config.seed, self.epoch),
            stats_hash: self.stats_hash.clone(),
            log: self.log.clone(),
        };
        Ok(Checkpoint {
            meta: serde_json::to_value(meta)?,
            tensors,
        })
    }

    pub fn tasks(&self) -> Vec<TaskSpec> {
        self.model.tasks().into_iter().cloned().collect()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.effective_batch)
    }

    fn plan_epoch(&self, indices: &[usize], raster: usize) -> Result<Vec<StepPlan>> {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(self.config.seed, self.epoch));
        let mut order = indices.to_vec();
        order.shuffle(&mut rng);
        let crop = self.config.crop_size;
        if crop > raster {
            return Err(Error::Config(format!("crop_size {crop} exceeds raster size {raster}")));
        }
        let grid = self.model.grid();
        order
            .into_iter()
            .map(|index| {
                let top = rng.random_range(0..=raster - crop);
                let left = rng.random_range(0..=raster - crop);
                let mask = Arc::new(sample_mask(grid, self.config.masking_ratio, &mut rng)?);
                Ok(StepPlan { index, top, left, mask })
            })
            .collect()
    }

    /// Forward one batch and return per-task terms and the aggregated loss.
    pub fn forward_batch(&self, g: &mut Graph, batch: &Batch) -> Result<(Var, Vec<TaskTerm>)> {
        let model = &self.model;
        debug_assert_eq!(batch.masks.masks().len(), batch.len(), "one shared mask per sample");
        let x = g.constant(batch.input.clone());
        let preds = model.forward(g, x, &batch.masks)?;
        let hidden = batch.masks.hidden(self.config.crop_size);
        let patch = model.config.encoder.patch_size;
        let mut results = Vec::with_capacity(preds.outputs.len());
        for ((d, &out), target) in model.decoders.iter().zip(&preds.outputs).zip(&batch.targets) {
            let norm = (self.config.patch_norm_optical
                && d.task.loss_kind == LossKind::MaskedRegression
                && d.task.target_modalities() == [SENTINEL2])
                .then_some(patch);
            results.push(task_loss(g, &d.task, out, target, &hidden, norm)?);
        }
        let log_vars: Vec<Var> = model.log_vars.iter().map(|&id| g.param(&model.store, id)).collect();
        aggregate_multitask(g, &results, &log_vars, self.config.loss_mode)
    }

    /// One pass over `indices` of `source`.
    pub fn run_epoch(&mut self, source: &dyn SampleSource, stats: &BandStats, indices: &[usize]) -> Result<&EpochRecord> {
        if indices.is_empty() {
            return Err(Error::invalid("pretraining split is empty"));
        }
        let started = Instant::now();
        let registry = source.registry().clone();
        let raster = registry.raster_size();
        let plans = self.plan_epoch(indices, raster)?;
        let tasks = self.tasks();
        let steps = self.steps_per_epoch(indices.len());
        let total_steps = steps * self.config.epochs;
        let warmup = steps * self.config.warmup_epochs;
        let peak = self.config.peak_lr();
        let eff = self.config.effective_batch;
        let micro = self.config.batch_size;
        let epoch = self.epoch;

        let mut sums: Vec<(f64, f64, f64)> = vec![(0.0, 0.0, 0.0); tasks.len()];
        let mut total = 0.0f64;
        let mut equal_total = 0.0f64;
        let mut seen = 0usize;
        let mut last_lr = 0.0;
        let mut grads = GradBuffer::new(&self.model.store);

        let (tx, rx) = sync_channel::<Result<PreparedSample>>(2 * micro);
        std::thread::scope(|scope| -> Result<()> {
            let producer_tasks = tasks.clone();
            let registry = &registry;
            let plans = &plans;
            let crop = self.config.crop_size;
            scope.spawn(move || {
                for p in plans {
                    let item = source.sample(p.index).and_then(|raw| {
                        prepare_sample(&raw, registry, stats, &producer_tasks, (p.top, p.left, crop), Some(p.mask.clone()))
                    });
                    if tx.send(item).is_err() {
                        return;
                    }
                }
            });
            for (step, chunk) in plans.chunks(eff).enumerate() {
                grads.clear();
                for mb in chunk.chunks(micro) {
                    let items: Vec<PreparedSample> = mb
                        .iter()
                        .map(|_| rx.recv().map_err(|_| Error::InvalidState("sample loader stopped".into()))?)
                        .collect::<Result<_>>()?;
                    let batch = collate(&items, &tasks)?;
                    let mut g = Graph::new();
                    let (loss, terms) = self.forward_batch(&mut g, &batch)?;
                    for t in &terms {
                        if !(t.raw_loss.is_finite() && t.weighted.is_finite()) {
                            return Err(Error::NumericFailure {
                                task: t.task_id.clone(),
                                epoch: epoch + 1,
                            });
                        }
                    }
                    let w = mb.len() as f64;
                    total += w * g.value(loss).item() as f64;
                    for t in &terms {
                        let i = tasks.iter().position(|x| x.task_id == t.task_id).unwrap();
                        sums[i].0 += w * t.raw_loss as f64;
                        sums[i].1 += w * t.weighted as f64;
                        sums[i].2 += w;
                        equal_total += w * t.raw_loss as f64;
                    }
                    seen += mb.len();
                    let scaled = g.scale(loss, mb.len() as f32 / chunk.len() as f32);
                    g.backward(scaled);
                    grads.absorb(&g);
                }
                if !grads.all_finite() {
                    return Err(Error::NumericFailure {
                        task: "gradient".into(),
                        epoch: epoch + 1,
                    });
                }
                let lr = lr_schedule(epoch * steps + step, total_steps, warmup, peak);
                self.opt.update(&mut self.model.store, &grads, lr as f32);
                last_lr = lr;
            }
            Ok(())
        })?;

        let n = seen as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            total_loss: total / n,
            equal_total: equal_total / n,
            lr: last_lr,
            wall_secs: started.elapsed().as_secs_f64(),
            tasks: tasks
                .iter()
                .zip(&sums)
                .zip(&self.model.log_vars)
                .map(|((t, s), &id)| TaskEpoch {
                    task_id: t.task_id.clone(),
                    raw_loss: if s.2 > 0.0 { s.0 / s.2 } else { f64::NAN },
                    s_t: self.model.store.value(id).item() as f64,
                    weighted: if s.2 > 0.0 { s.1 / s.2 } else { f64::NAN },
                })
                .collect(),
        };
        log::info!(
            "epoch {} loss {:.5} (Σ raw {:.5}) lr {:.3e} {:.1}s",
            record.epoch,
            record.total_loss,
            record.equal_total,
            record.lr,
            record.wall_secs
        );
        self.log.epochs.push(record);
        self.epoch += 1;
        Ok(self.log.epochs.last().unwrap())
    }
}

/// Where and how often to write artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Stop after this many total epochs (for interrupted-run tests).
    pub stop_after: Option<usize>,
}

pub const FINAL_CHECKPOINT: &str = "checkpoint.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";

fn write_artifacts(dir: &Path, trainer: &Pretrainer, name: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&dir.join(name), &trainer.checkpoint()?)?;
    let log = dir.join(TRAIN_LOG);
    std::fs::write(&log, trainer.log.to_csv()).map_err(|e| Error::io(&log, e))?;
    let timing = dir.join("timing.csv");
    std::fs::write(&timing, trainer.log.timing_csv()).map_err(|e| Error::io(&timing, e))
}

/// Train `trainer` until its configured epoch count (or `stop_after`).
pub fn run_pretraining(
    trainer: &mut Pretrainer,
    source: &dyn SampleSource,
    stats: &BandStats,
    options: &RunOptions,
) -> Result<()> {
    let indices = source.split(&trainer.config.split)?;
    let end = options.stop_after.unwrap_or(usize::MAX).min(trainer.config.epochs);
    while trainer.epoch < end {
        trainer.run_epoch(source, stats, &indices)?;
        if let Some(dir) = &options.out_dir {
            let every = trainer.config.checkpoint_every;
            if every > 0 && trainer.epoch % every == 0 {
                write_artifacts(dir, trainer, &format!("epoch_{:04}.ckpt", trainer.epoch))?;
            }
        }
    }
    if let Some(dir) = &options.out_dir {
        write_artifacts(dir, trainer, FINAL_CHECKPOINT)?;
    }
    Ok(())
}

/// Encoder-only view of a pretraining checkpoint for downstream use.
pub fn encoder_from_checkpoint(ck: &Checkpoint) -> Result<(EncoderConfig, ParamStore)> {
    let meta: PretrainMeta = serde_json::from_value(ck.meta.clone())
        .map_err(|e| Error::Config(format!("not a pretraining checkpoint: {e}")))?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    crate::model::Encoder::build(&meta.config.model.encoder, &mut store, crate::model::ENCODER_PREFIX, &mut rng)?;
    store.load_named(&ck.tensors, "")?;
    Ok((meta.config.model.encoder, store))
}
