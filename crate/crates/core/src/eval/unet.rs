//! U-Net segmenter over the encoder's feature pyramid and its two-phase
//! fine-tuning schedule.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{batch_input, fit, score, EvalEncoder, FitPlan, MetricReport, ProbeConfig, TaskKind, FEATURE_BATCH};
use crate::error::{Error, Result};
use crate::model::{Conv, Encoder, Norm, StemKind, ENCODER_PREFIX};
use crate::nn::{AdamW, Graph, ParamStore, Var};
use crate::pretrain::Checkpoint;
use crate::synthgen::mix_seed;

use super::tasks::DownstreamTask;

pub const SKIP_COUNT: usize = 4;

/// Upsample → concat skip → 3×3 conv → LN → GELU.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub factor: usize,
    pub conv: Conv,
    pub norm: Norm,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub encoder: Encoder,
    pub classes: usize,
    pub ups: Vec<UpBlock>,
    pub head: Conv,
}

/// Attach a U-Net decoder to `enc`; returns the model and a parameter store
/// holding the encoder weights plus freshly initialized decoder weights.
pub fn build_unet_segmenter(enc: &EvalEncoder, classes: usize, seed: u64) -> Result<(UNet, ParamStore)> {
    let cfg = enc.config();
    if cfg.stem != StemKind::Modified {
        return Err(Error::Config("segmentation needs the full-resolution stem features of the modified stem".into()));
    }
    let mut store = enc.store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x0e7));
    let w = &cfg.widths;
    // deepest first: stages 2, 1, 0, then the stem's full-resolution map
    let skips = [(w[2], 2), (w[1], 2), (w[0], 2), (w[0], cfg.stem_stride())];
    let mut below = w[3];
    let mut ups = Vec::with_capacity(SKIP_COUNT);
    for (i, &(sw, factor)) in skips.iter().enumerate() {
        let name = format!("unet.up.{i}");
        ups.push(UpBlock {
            factor,
            conv: Conv::build(&mut store, &format!("{name}.conv"), below + sw, sw, 3, 1, 1, &mut rng),
            norm: Norm::build(&mut store, &format!("{name}.norm"), sw),
        });
        below = sw;
    }
    let head = Conv::build(&mut store, "unet.head", below, classes, 1, 1, 0, &mut rng);
    Ok((
        UNet {
            encoder: enc.encoder.clone(),
            classes,
            ups,
            head,
        },
        store,
    ))
}

impl UNet {
    /// `[N, S, S, 12]` → `[N, S, S, classes]`. `drop_skip` zeroes one skip
    /// feature (0 = deepest).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, drop_skip: Option<usize>) -> Result<Var> {
        let out = self.encoder.forward(g, store, x, None)?;
        let full = out
            .full_res
            .ok_or_else(|| Error::Config("encoder exposes no full-resolution features".into()))?;
        let skips = [out.stages[2], out.stages[1], out.stages[0], full];
        let mut y = out.stages[3];
        for (i, (up, &skip)) in self.ups.iter().zip(&skips).enumerate() {
            let skip = if drop_skip == Some(i) { g.scale(skip, 0.0) } else { skip };
            y = g.upsample_nearest(y, up.factor);
            y = g.concat_channels(y, skip);
            y = up.conv.forward(g, store, y);
            y = up.norm.forward(g, store, y);
            y = g.gelu(y);
        }
        Ok(self.head.forward(g, store, y))
    }

    fn loss(&self, g: &mut Graph, store: &ParamStore, task: &DownstreamTask, idx: &[usize]) -> Result<Var> {
        let x = g.constant(batch_input(&task.data, idx));
        let s = self.forward(g, store, x, None)?;
        let ignore = task.data.ignore();
        let mut labels = Vec::new();
        let mut weights = Vec::new();
        for &i in idx {
            for &c in &task.data.landcover[i] {
                labels.push(if c == ignore { 0 } else { c });
                weights.push(if c == ignore { 0.0 } else { 1.0 });
            }
        }
        g.cross_entropy(s, Rc::new(labels), Rc::new(weights))
            .ok_or_else(|| Error::InvalidState("segmentation batch without labelled pixels".into()))
    }

    pub fn predict(&self, store: &ParamStore, task: &DownstreamTask, idx: &[usize]) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        for chunk in idx.chunks(FEATURE_BATCH / 2) {
            let mut g = Graph::new();
            let x = g.constant(batch_input(&task.data, chunk));
            let s = self.forward(&mut g, store, x, None)?;
            out.extend_from_slice(g.value(s).data());
        }
        Ok(out)
    }

    pub fn evaluate(&self, store: &ParamStore, task: &DownstreamTask, idx: &[usize]) -> Result<f64> {
        score(task, idx, &self.predict(store, task, idx)?, 0.5)
    }
}

fn snapshot(store: &ParamStore, phase: &str, encoder_id: &str) -> Checkpoint {
    Checkpoint {
        meta: serde_json::json!({ "kind": "segmenter", "phase": phase, "encoder": encoder_id }),
        tensors: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect::<BTreeMap<_, _>>(),
    }
}

#[derive(Clone, Debug)]
pub struct SegmentationOutcome {
    /// Decoder-only endpoint.
    pub phase1: MetricReport,
    /// After full fine-tuning.
    pub phase2: MetricReport,
    pub phase1_train: f64,
    pub phase2_train: f64,
    pub encoder_hash_before: String,
    pub encoder_hash_after_phase1: String,
    pub encoder_hash_after_phase2: String,
    pub phase1_checkpoint: Checkpoint,
    pub phase2_checkpoint: Checkpoint,
}

/// Phase 1 trains the decoder on a frozen encoder, phase 2 everything. Both
/// endpoints are scored on the test split.
pub fn fine_tune_segmenter_two_phase(enc: &EvalEncoder, task: &DownstreamTask, cfg: &ProbeConfig) -> Result<SegmentationOutcome> {
    fine_tune_segmenter_on(enc, task, task.split("train")?, cfg)
}

pub fn fine_tune_segmenter_on(enc: &EvalEncoder, task: &DownstreamTask, train: &[usize], cfg: &ProbeConfig) -> Result<SegmentationOutcome> {
    if task.kind != TaskKind::Segmentation {
        return Err(Error::Config("two-phase fine-tuning needs the segmentation task".into()));
    }
    cfg.validate()?;
    enc.check_input(task.data.size)?;
    let seg = &cfg.segmentation;
    let (model, mut store) = build_unet_segmenter(enc, task.classes, cfg.seed)?;
    let before = store.hash_prefix(ENCODER_PREFIX);
    let test = task.split("test")?;
    let plan = |epochs: usize, salt: u64| FitPlan {
        label: task.name(),
        epochs,
        effective_batch: seg.batch_size,
        batch_size: seg.batch_size,
        peak_lr: seg.base_lr * seg.batch_size as f64 / 256.0,
        warmup_epochs: 0,
        seed: mix_seed(cfg.seed, salt),
    };

    store.set_frozen_prefix(ENCODER_PREFIX, true);
    if seg.frozen_epochs > 0 {
        let mut opt = AdamW::new(cfg.optimizer, &store);
        fit(&mut store, &mut opt, train, &plan(seg.frozen_epochs, 1), |g, s, mb| model.loss(g, s, task, mb))?;
    }
    let after1 = store.hash_prefix(ENCODER_PREFIX);
    if after1 != before {
        return Err(Error::InvariantViolation("encoder parameters changed while frozen".into()));
    }
    let phase1 = model.evaluate(&store, task, test)?;
    let phase1_train = model.evaluate(&store, task, train)?;
    let phase1_checkpoint = snapshot(&store, "decoder-only", &enc.id);

    store.set_frozen_prefix(ENCODER_PREFIX, false);
    if seg.full_epochs > 0 {
        let mut opt = AdamW::new(cfg.optimizer, &store);
        fit(&mut store, &mut opt, train, &plan(seg.full_epochs, 2), |g, s, mb| model.loss(g, s, task, mb))?;
    }
    let phase2 = model.evaluate(&store, task, test)?;
    let phase2_train = model.evaluate(&store, task, train)?;
    let rep = |mode: &str, value| MetricReport {
        checkpoint: enc.id.clone(),
        task: task.name().into(),
        mode: mode.into(),
        metric: task.kind.metric().into(),
        split: "test".into(),
        fraction: 1.0,
        seed: cfg.seed,
        value,
    };
    Ok(SegmentationOutcome {
        phase1: rep("seg-frozen", phase1),
        phase2: rep("seg-ft", phase2),
        phase1_train,
        phase2_train,
        encoder_hash_before: before,
        encoder_hash_after_phase1: after1,
        encoder_hash_after_phase2: store.hash_prefix(ENCODER_PREFIX),
        phase1_checkpoint,
        phase2_checkpoint: snapshot(&store, "full", &enc.id),
    })
}
