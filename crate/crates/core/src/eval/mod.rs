//! Downstream evaluation: linear probes, fine-tuning, U-Net segmentation and
//! label-efficiency sweeps.

pub mod metrics;
pub mod store;
pub mod tasks;
pub mod unet;

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Encoder, EncoderConfig, Norm, ENCODER_PREFIX, OPTICAL_BANDS};
use crate::nn::{AdamW, AdamWConfig, GradBuffer, Graph, ParamStore, Tensor, Var};
use crate::pretrain::{lr_schedule, Checkpoint, PretrainMeta};
use crate::synthgen::mix_seed;

pub use metrics::{confusion_counts, macro_iou, mean_iou, micro_f1, overall_accuracy, ClassCounts};
pub use store::{MetricReport, ResultsStore};
pub use tasks::{stratified_subsample, DownstreamData, DownstreamTask, Labels, TaskKind};
pub use unet::{build_unet_segmenter, fine_tune_segmenter_two_phase, SegmentationOutcome, UNet, SKIP_COUNT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    Lp,
    Ft,
}

impl ProbeMode {
    pub fn name(self) -> &'static str {
        match self {
            ProbeMode::Lp => "lp",
            ProbeMode::Ft => "ft",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub frozen_epochs: usize,
    pub full_epochs: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            batch_size: 32,
            base_lr: 0.01,
            frozen_epochs: 50,
            full_epochs: 150,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub epochs: usize,
    pub effective_batch: usize,
    pub batch_size: usize,
    /// Fine-tuning base learning rate, scaled by `effective_batch / 256`.
    pub base_lr: f64,
    /// Linear-probe base learning rate, scaled the same way.
    pub lp_base_lr: f64,
    pub warmup_epochs: usize,
    pub optimizer: AdamWConfig,
    /// Sigmoid threshold for multi-label decisions.
    pub threshold: f64,
    pub seed: u64,
    pub segmentation: SegmentationConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            mode: ProbeMode::Lp,
            epochs: 100,
            effective_batch: 128,
            batch_size: 32,
            base_lr: 2e-4,
            lp_base_lr: 0.02,
            warmup_epochs: 5,
            optimizer: AdamWConfig::default(),
            threshold: 0.5,
            seed: 0,
            segmentation: SegmentationConfig::default(),
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("probe epochs must be positive".into());
        }
        if self.batch_size == 0 || self.effective_batch == 0 || self.effective_batch % self.batch_size != 0 {
            return fail(format!(
                "effective_batch {} must be a positive multiple of batch_size {}",
                self.effective_batch, self.batch_size
            ));
        }
        for (name, v) in [("base_lr", self.base_lr), ("lp_base_lr", self.lp_base_lr), ("segmentation.base_lr", self.segmentation.base_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} {v} must be positive"));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail(format!("threshold {} must lie in (0, 1)", self.threshold));
        }
        if self.segmentation.batch_size == 0 || self.segmentation.frozen_epochs + self.segmentation.full_epochs == 0 {
            return fail("segmentation batch size and epoch counts must be positive".into());
        }
        Ok(())
    }
}

// --------------------------------------------------------------- encoders

/// A pretrained (or freshly initialized) encoder under a stable identifier.
#[derive(Clone, Debug)]
pub struct EvalEncoder {
    pub id: String,
    pub encoder: Encoder,
    pub store: ParamStore,
}

impl EvalEncoder {
    pub fn random(config: &EncoderConfig, seed: u64, id: &str) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::build(config, &mut store, ENCODER_PREFIX, &mut rng)?;
        Ok(EvalEncoder {
            id: id.into(),
            encoder,
            store,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, id: &str) -> Result<Self> {
        let meta: PretrainMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Config(format!("not a pretraining checkpoint: {e}")))?;
        let mut enc = EvalEncoder::random(&meta.config.model.encoder, 0, id)?;
        enc.store.load_named(&ck.tensors, "")?;
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    pub fn hash(&self) -> String {
        self.store.hash_prefix(ENCODER_PREFIX)
    }

    pub(crate) fn check_input(&self, size: usize) -> Result<()> {
        let s = self.config().image_size;
        if s != size {
            return Err(Error::ShapeMismatch {
                name: "encoder input".into(),
                expected: vec![s, s, OPTICAL_BANDS],
                found: vec![size, size, OPTICAL_BANDS],
            });
        }
        Ok(())
    }
}

pub(crate) fn batch_input(data: &DownstreamData, idx: &[usize]) -> Tensor {
    let s = data.size;
    let mut v = Vec::with_capacity(idx.len() * s * s * OPTICAL_BANDS);
    for &i in idx {
        v.extend_from_slice(&data.inputs[i]);
    }
    Tensor::new(&[idx.len(), s, s, OPTICAL_BANDS], v)
}

fn ones(n: usize, h: usize, w: usize) -> Rc<Tensor> {
    Rc::new(Tensor::full(&[n, h, w, 1], 1.0))
}

pub(crate) const FEATURE_BATCH: usize = 64;

fn pooled(enc: &EvalEncoder, frozen: &ParamStore, x: Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(x);
    let y = enc.encoder.forward(&mut g, frozen, x, None)?;
    if g.requires_grad(y.tokens) {
        return Err(Error::InvariantViolation("encoder features carry gradient history during linear probing".into()));
    }
    let (n, h, w, _) = g.value(y.tokens).dims4();
    let p = g.masked_mean_pool(y.tokens, &ones(n, h, w));
    Ok(g.value(p).clone())
}

impl EvalEncoder {
    /// `[n, S, S, 12]` standardized optical input → `[n, C]` pooled
    /// final-stage features, all encoder parameters frozen.
    pub fn embed(&self, x: Tensor) -> Result<Tensor> {
        let (_, h, w, c) = x.dims4();
        let s = self.config().image_size;
        if (h, w, c) != (s, s, OPTICAL_BANDS) {
            return Err(Error::ShapeMismatch {
                name: "encoder input".into(),
                expected: vec![s, s, OPTICAL_BANDS],
                found: vec![h, w, c],
            });
        }
        let mut store = self.store.clone();
        store.set_frozen_prefix(ENCODER_PREFIX, true);
        pooled(self, &store, x)
    }
}

/// Global-average-pooled final-stage features from a dense forward with every
/// encoder parameter frozen. Returns `[n, C]` rows in `idx` order.
pub fn extract_features(enc: &EvalEncoder, data: &DownstreamData, idx: &[usize]) -> Result<Vec<Vec<f32>>> {
    enc.check_input(data.size)?;
    let mut store = enc.store.clone();
    store.set_frozen_prefix(ENCODER_PREFIX, true);
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(FEATURE_BATCH) {
        let t = pooled(enc, &store, batch_input(data, chunk))?;
        let c = t.shape()[1];
        out.extend(t.data().chunks_exact(c).map(|r| r.to_vec()));
    }
    Ok(out)
}

// --------------------------------------------------------------- training

pub(crate) struct FitPlan<'a> {
    pub label: &'a str,
    pub epochs: usize,
    pub effective_batch: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
}

/// Mini-batch AdamW over `train` with warmup + cosine decay. `loss` returns
/// the mean loss of one micro-batch. Returns the mean loss of the last epoch.
pub(crate) fn fit(
    store: &mut ParamStore,
    opt: &mut AdamW,
    train: &[usize],
    plan: &FitPlan,
    mut loss: impl FnMut(&mut Graph, &ParamStore, &[usize]) -> Result<Var>,
) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let steps = train.len().div_ceil(plan.effective_batch);
    let total = steps * plan.epochs;
    let warmup = steps * plan.warmup_epochs.min(plan.epochs.saturating_sub(1));
    let mut grads = GradBuffer::new(store);
    let mut last = 0.0;
    for epoch in 0..plan.epochs {
        let mut order = train.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(plan.seed, epoch as u64)));
        let mut sum = 0.0f64;
        for (step, chunk) in order.chunks(plan.effective_batch).enumerate() {
            grads.clear();
            for mb in chunk.chunks(plan.batch_size) {
                let mut g = Graph::new();
                let l = loss(&mut g, store, mb)?;
                let v = g.value(l).item();
                if !v.is_finite() {
                    return Err(Error::NumericFailure {
                        task: plan.label.into(),
                        epoch: epoch + 1,
                    });
                }
                sum += v as f64 * mb.len() as f64;
                let scaled = g.scale(l, mb.len() as f32 / chunk.len() as f32);
                g.backward(scaled);
                grads.absorb(&g);
            }
            if !grads.all_finite() {
                return Err(Error::NumericFailure {
                    task: plan.label.into(),
                    epoch: epoch + 1,
                });
            }
            let lr = lr_schedule(epoch * steps + step, total, warmup, plan.peak_lr);
            opt.update(store, &grads, lr as f32);
        }
        last = sum / train.len() as f64;
    }
    Ok(last)
}

/// Scores of a classification head, turned into the task metric.
pub(crate) fn score(task: &DownstreamTask, idx: &[usize], logits: &[f32], threshold: f64) -> Result<f64> {
    let k = task.classes;
    match &task.labels {
        Labels::Class(labels) => {
            let pred: Vec<u32> = logits.chunks_exact(k).map(argmax).collect();
            let truth: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
            overall_accuracy(&pred, &truth)
        }
        Labels::MultiHot(labels) => {
            let cut = (threshold / (1.0 - threshold)).ln() as f32;
            let pred: Vec<bool> = logits.iter().map(|&s| s > cut).collect();
            let truth: Vec<bool> = idx.iter().flat_map(|&i| labels[i].iter().copied()).collect();
            micro_f1(&pred, &truth)
        }
        Labels::Pixel => {
            let pred: Vec<u32> = logits.chunks_exact(k).map(argmax).collect();
            let truth: Vec<u32> = idx.iter().flat_map(|&i| task.data.landcover[i].iter().copied()).collect();
            macro_iou(&pred, &truth, k, Some(task.data.ignore()))
        }
    }
}

pub(crate) fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best as u32
}

/// Classification loss of `scores` (`[n, K]`) against the labels of `idx`.
fn head_loss(g: &mut Graph, task: &DownstreamTask, scores: Var, idx: &[usize]) -> Result<Var> {
    match &task.labels {
        Labels::Class(labels) => {
            let l: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
            g.cross_entropy(scores, Rc::new(l), Rc::new(vec![1.0; idx.len()]))
                .ok_or_else(|| Error::invalid("empty batch"))
        }
        Labels::MultiHot(labels) => {
            let t: Vec<f32> = idx
                .iter()
                .flat_map(|&i| labels[i].iter().map(|&b| if b { 1.0 } else { 0.0 }))
                .collect();
            Ok(g.bce_with_logits(scores, Rc::new(t)))
        }
        Labels::Pixel => Err(Error::Config("segmentation tasks need the U-Net segmenter".into())),
    }
}

fn require_classification(task: &DownstreamTask) -> Result<()> {
    if task.kind == TaskKind::Segmentation {
        return Err(Error::Config("probing and classifier fine-tuning need a classification task".into()));
    }
    Ok(())
}

/// Test-split result plus the metric on the training rows actually used.
#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub report: MetricReport,
    pub train_value: f64,
    pub final_loss: f64,
}

fn report(enc: &EvalEncoder, task: &DownstreamTask, mode: &str, fraction: f64, seed: u64, value: f64) -> MetricReport {
    MetricReport {
        checkpoint: enc.id.clone(),
        task: task.name().into(),
        mode: mode.into(),
        metric: task.kind.metric().into(),
        split: "test".into(),
        fraction,
        seed,
        value,
    }
}

/// Per-feature standardization with statistics of `rows`.
fn standardize_features(features: &mut [Vec<f32>], rows: &[usize]) {
    let c = features[0].len();
    let n = rows.len() as f64;
    for j in 0..c {
        let mean = rows.iter().map(|&i| features[i][j] as f64).sum::<f64>() / n;
        let var = rows.iter().map(|&i| (features[i][j] as f64 - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-6);
        for f in features.iter_mut() {
            f[j] = ((f[j] as f64 - mean) / sd) as f32;
        }
    }
}

/// Precomputed frozen features of every sample of a task's data.
pub struct FeatureCache {
    pub encoder_id: String,
    pub features: Vec<Vec<f32>>,
}

impl FeatureCache {
    pub fn new(enc: &EvalEncoder, data: &DownstreamData) -> Result<Self> {
        let before = enc.hash();
        let all: Vec<usize> = (0..data.len()).collect();
        let features = extract_features(enc, data, &all)?;
        if enc.hash() != before {
            return Err(Error::InvariantViolation("encoder parameters changed during feature extraction".into()));
        }
        Ok(FeatureCache {
            encoder_id: enc.id.clone(),
            features,
        })
    }
}

/// Train a single linear layer on standardized frozen features of `train`.
pub fn linear_probe_features(
    cache: &FeatureCache,
    task: &DownstreamTask,
    train: &[usize],
    cfg: &ProbeConfig,
    fraction: f64,
) -> Result<ProbeOutcome> {
    require_classification(task)?;
    cfg.validate()?;
    let mut feats = cache.features.clone();
    standardize_features(&mut feats, train);
    let c = feats[0].len();
    let k = task.classes;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x11f));
    let w = store.add_weight("probe.weight", &[c, k], &mut rng);
    let b = store.add_const("probe.bias", &[k], 0.0);
    let rows = |idx: &[usize]| Tensor::new(&[idx.len(), c], idx.iter().flat_map(|&i| feats[i].iter().copied()).collect());
    let mut opt = AdamW::new(cfg.optimizer, &store);
    let plan = FitPlan {
        label: task.name(),
        epochs: cfg.epochs,
        effective_batch: cfg.effective_batch,
        batch_size: cfg.effective_batch,
        peak_lr: cfg.lp_base_lr * cfg.effective_batch as f64 / 256.0,
        warmup_epochs: 0,
        seed: mix_seed(cfg.seed, 0x7a),
    };
    let final_loss = fit(&mut store, &mut opt, train, &plan, |g, store, mb| {
        let x = g.constant(rows(mb));
        let (wv, bv) = (g.param(store, w), g.param(store, b));
        let s = g.linear(x, wv, Some(bv));
        head_loss(g, task, s, mb)
    })?;
    let predict = |idx: &[usize]| {
        let mut g = Graph::new();
        let x = g.constant(rows(idx));
        let (wv, bv) = (g.constant(store.value(w).clone()), g.constant(store.value(b).clone()));
        let s = g.linear(x, wv, Some(bv));
        g.value(s).data().to_vec()
    };
    let test = task.split("test")?;
    let value = score(task, test, &predict(test), cfg.threshold)?;
    let train_value = score(task, train, &predict(train), cfg.threshold)?;
    Ok(ProbeOutcome {
        report: MetricReport {
            checkpoint: cache.encoder_id.clone(),
            task: task.name().into(),
            mode: ProbeMode::Lp.name().into(),
            metric: task.kind.metric().into(),
            split: "test".into(),
            fraction,
            seed: cfg.seed,
            value,
        },
        train_value,
        final_loss,
    })
}

/// Linear probe on the full training split; the encoder stays byte-identical.
pub fn linear_probe(enc: &EvalEncoder, task: &DownstreamTask, cfg: &ProbeConfig) -> Result<ProbeOutcome> {
    require_classification(task)?;
    let before = enc.hash();
    let cache = FeatureCache::new(enc, &task.data)?;
    let out = linear_probe_features(&cache, task, task.split("train")?, cfg, 1.0)?;
    if enc.hash() != before {
        return Err(Error::InvariantViolation("encoder parameters changed during linear probing".into()));
    }
    Ok(out)
}

/// LP at each training fraction and seed for every encoder; the test split is fixed.
pub fn label_efficiency_sweep(
    encoders: &[EvalEncoder],
    task: &DownstreamTask,
    fractions: &[f64],
    seeds: &[u64],
    cfg: &ProbeConfig,
) -> Result<Vec<MetricReport>> {
    require_classification(task)?;
    let train = task.split("train")?;
    let mut out = Vec::new();
    for enc in encoders {
        let before = enc.hash();
        let cache = FeatureCache::new(enc, &task.data)?;
        for &seed in seeds {
            for &f in fractions {
                let subset = stratified_subsample(train, |i| task.strata(i), f, seed)?;
                let c = ProbeConfig { seed, ..cfg.clone() };
                out.push(linear_probe_features(&cache, task, &subset, &c, f)?.report);
            }
        }
        if enc.hash() != before {
            return Err(Error::InvariantViolation(format!("encoder `{}` changed during the sweep", enc.id)));
        }
    }
    Ok(out)
}

/// Fine-tune encoder plus a pooled LN + linear head on the training split.
pub fn fine_tune_classifier(enc: &EvalEncoder, task: &DownstreamTask, cfg: &ProbeConfig) -> Result<(ProbeOutcome, ParamStore)> {
    fine_tune_classifier_on(enc, task, task.split("train")?, cfg)
}

pub fn fine_tune_classifier_on(
    enc: &EvalEncoder,
    task: &DownstreamTask,
    train: &[usize],
    cfg: &ProbeConfig,
) -> Result<(ProbeOutcome, ParamStore)> {
    require_classification(task)?;
    cfg.validate()?;
    enc.check_input(task.data.size)?;
    let mut store = enc.store.clone();
    let c = enc.config().final_width();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xf7));
    let norm = Norm::build(&mut store, "head.norm", c);
    let w = store.add_weight("head.weight", &[c, task.classes], &mut rng);
    let b = store.add_const("head.bias", &[task.classes], 0.0);
    let forward = |g: &mut Graph, store: &ParamStore, idx: &[usize]| -> Result<Var> {
        let x = g.constant(batch_input(&task.data, idx));
        let y = enc.encoder.forward(g, store, x, None)?;
        let (n, h, wd, _) = g.value(y.tokens).dims4();
        let p = g.masked_mean_pool(y.tokens, &ones(n, h, wd));
        let p = norm.forward(g, store, p);
        let (wv, bv) = (g.param(store, w), g.param(store, b));
        Ok(g.linear(p, wv, Some(bv)))
    };
    let mut opt = AdamW::new(cfg.optimizer, &store);
    let plan = FitPlan {
        label: task.name(),
        epochs: cfg.epochs,
        effective_batch: cfg.effective_batch,
        batch_size: cfg.batch_size,
        peak_lr: cfg.base_lr * cfg.effective_batch as f64 / 256.0,
        warmup_epochs: cfg.warmup_epochs,
        seed: mix_seed(cfg.seed, 0x7b),
    };
    let final_loss = fit(&mut store, &mut opt, train, &plan, |g, store, mb| {
        let s = forward(g, store, mb)?;
        head_loss(g, task, s, mb)
    })?;
    let predict = |idx: &[usize]| -> Result<Vec<f32>> {
        let mut out = Vec::new();
        for chunk in idx.chunks(FEATURE_BATCH) {
            let mut g = Graph::new();
            let s = forward(&mut g, &store, chunk)?;
            out.extend_from_slice(g.value(s).data());
        }
        Ok(out)
    };
    let test = task.split("test")?;
    let value = score(task, test, &predict(test)?, cfg.threshold)?;
    let train_value = score(task, train, &predict(train)?, cfg.threshold)?;
    let outcome = ProbeOutcome {
        report: report(enc, task, ProbeMode::Ft.name(), 1.0, cfg.seed, value),
        train_value,
        final_loss,
    };
    Ok((outcome, store))
}

#[cfg(test)]
mod tests {
    use super::tasks::tests_support::small_data;
    use super::*;

    fn tiny_encoder(size: usize, seed: u64) -> EvalEncoder {
        let cfg = EncoderConfig {
            widths: vec![4, 4, 8, 8],
            depths: vec![1, 1, 1, 1],
            ..EncoderConfig::tiny(size, 8)
        };
        EvalEncoder::random(&cfg, seed, "rand").unwrap()
    }

    fn quick(mode: ProbeMode, epochs: usize) -> ProbeConfig {
        ProbeConfig {
            mode,
            epochs,
            effective_batch: 8,
            batch_size: 8,
            lp_base_lr: 1.0,
            warmup_epochs: 0,
            ..Default::default()
        }
    }

    #[test]
    fn lp_keeps_encoder_bytes_and_learns() {
        let d = small_data(40, 16, 16);
        let task = d.task(TaskKind::MultiClass, 0.05);
        let enc = tiny_encoder(16, 1);
        let before = enc.hash();
        let out = linear_probe(&enc, &task, &quick(ProbeMode::Lp, 30)).unwrap();
        assert_eq!(enc.hash(), before);
        assert!((0.0..=1.0).contains(&out.report.value));
        assert_eq!(out.report.metric, "accuracy");
        assert!(out.train_value >= 0.5, "{}", out.train_value);
    }

    #[test]
    fn constant_labels_give_class_frequency() {
        let d = small_data(30, 16, 16);
        let mut task = d.task(TaskKind::MultiClass, 0.05);
        task.labels = Labels::Class(vec![3; d.len()]);
        let enc = tiny_encoder(16, 2);
        let out = linear_probe(&enc, &task, &quick(ProbeMode::Lp, 20)).unwrap();
        assert_eq!(out.report.value, 1.0);
    }

    #[test]
    fn sweep_at_full_fraction_matches_probe() {
        let d = small_data(40, 16, 16);
        let task = d.task(TaskKind::MultiLabel, 0.05);
        let enc = tiny_encoder(16, 3);
        let cfg = quick(ProbeMode::Lp, 10);
        let plain = linear_probe(&enc, &task, &cfg).unwrap();
        let sweep = label_efficiency_sweep(std::slice::from_ref(&enc), &task, &[0.2, 1.0], &[cfg.seed], &cfg).unwrap();
        assert_eq!(sweep.len(), 2);
        assert_eq!(sweep[1].fraction, 1.0);
        assert_eq!(sweep[1].value, plain.report.value);
        assert_eq!(sweep[1].metric, "micro_f1");
    }

    #[test]
    fn ft_overfits_eight_samples_and_moves_encoder() {
        let d = small_data(30, 16, 16);
        let task = d.task(TaskKind::MultiClass, 0.05);
        let enc = tiny_encoder(16, 4);
        let train: Vec<usize> = task.split("train").unwrap()[..8].to_vec();
        let cfg = ProbeConfig {
            base_lr: 0.3,
            ..quick(ProbeMode::Ft, 60)
        };
        let (out, store) = fine_tune_classifier_on(&enc, &task, &train, &cfg).unwrap();
        assert_eq!(out.train_value, 1.0);
        assert_ne!(store.hash_prefix(ENCODER_PREFIX), enc.hash());
    }

    #[test]
    fn segmentation_rejected_by_probe_and_size_checked() {
        let d = small_data(20, 16, 16);
        let enc = tiny_encoder(16, 5);
        assert!(matches!(
            linear_probe(&enc, &d.task(TaskKind::Segmentation, 0.05), &quick(ProbeMode::Lp, 1)),
            Err(Error::Config(_))
        ));
        let big = tiny_encoder(24, 5);
        assert!(matches!(
            linear_probe(&big, &d.task(TaskKind::MultiClass, 0.05), &quick(ProbeMode::Lp, 1)),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
