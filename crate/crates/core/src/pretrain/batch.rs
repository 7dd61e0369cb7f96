//! Crop, standardize and collate samples into batched model inputs and targets.

use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::losses::TaskTarget;
use crate::masking::PatchMask;
use crate::model::{MaskSet, OPTICAL_BANDS};
use crate::nn::Tensor;
use crate::schema::{standardize_sample, BandStats, LossKind, MultiModalSample, Registry, TaskSpec, SENTINEL2};

/// Per-sample supervision, before batching.
#[derive(Clone, Debug, PartialEq)]
pub enum SampleTarget {
    Pixel { values: Vec<f32>, valid: Vec<f32> },
    PixelLabels(Vec<u32>),
    Values { values: Vec<f32>, valid: bool },
    Label(u32),
}

/// One cropped, standardized training example.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub size: usize,
    /// `size × size × 12` standardized optical values, missing pixels zero.
    pub input: Vec<f32>,
    pub targets: Vec<SampleTarget>,
    pub mask: Option<Arc<PatchMask>>,
}

/// Gather bands `[b0, b1)` of a `(C, H, W)` layer into `H × W × (b1 − b0)`.
fn to_hwc(chw: &[f32], bands: std::ops::Range<usize>, hw: usize, out: &mut Vec<f32>, stride: usize, offset: usize) {
    for (j, b) in bands.enumerate() {
        for p in 0..hw {
            out[p * stride + offset + j] = chw[b * hw + p];
        }
    }
}

/// Standardized optical input of `sample` as `H × W × 12`.
pub fn optical_input(sample: &MultiModalSample, stats: &BandStats, registry: &Registry) -> Result<Vec<f32>> {
    let z = standardize_sample(sample, stats, registry)?;
    let hw = sample.size * sample.size;
    let mut out = vec![0.0; hw * OPTICAL_BANDS];
    to_hwc(z.layer(SENTINEL2)?, 0..OPTICAL_BANDS, hw, &mut out, OPTICAL_BANDS, 0);
    Ok(out)
}

/// Crop to `(top, left, size)`, standardize, and extract targets for `tasks`.
pub fn prepare_sample(
    raw: &MultiModalSample,
    registry: &Registry,
    stats: &BandStats,
    tasks: &[TaskSpec],
    crop: (usize, usize, usize),
    mask: Option<Arc<PatchMask>>,
) -> Result<PreparedSample> {
    let (top, left, size) = crop;
    let raw = if (top, left, size) == (0, 0, raw.size) {
        raw.clone()
    } else {
        raw.crop(registry, top, left, size)?
    };
    let z = standardize_sample(&raw, stats, registry)?;
    let hw = size * size;
    let mut input = vec![0.0; hw * OPTICAL_BANDS];
    to_hwc(z.layer(SENTINEL2)?, 0..OPTICAL_BANDS, hw, &mut input, OPTICAL_BANDS, 0);
    let mut targets = Vec::with_capacity(tasks.len());
    for task in tasks {
        let t = match task.loss_kind {
            LossKind::MaskedRegression => {
                let width = task.target_width();
                let mut values = vec![0.0; hw * width];
                let mut valid = vec![1.0f32; hw];
                let mut off = 0;
                for tb in &task.targets {
                    let src = raw.layer(&tb.modality)?;
                    for b in tb.bands.clone() {
                        for (p, v) in valid.iter_mut().enumerate() {
                            if !src[b * hw + p].is_finite() {
                                *v = 0.0;
                            }
                        }
                    }
                    to_hwc(z.layer(&tb.modality)?, tb.bands.clone(), hw, &mut values, width, off);
                    off += tb.bands.len();
                }
                SampleTarget::Pixel { values, valid }
            }
            LossKind::MaskedClassification => {
                let tb = &task.targets[0];
                let src = &raw.layer(&tb.modality)?[tb.bands.start * hw..][..hw];
                SampleTarget::PixelLabels(labels(src, task)?)
            }
            LossKind::ImageRegression => {
                let mut values = Vec::with_capacity(task.target_width());
                let mut valid = true;
                for tb in &task.targets {
                    let r = &raw.layer(&tb.modality)?[tb.bands.clone()];
                    valid &= r.iter().all(|v| v.is_finite());
                    values.extend_from_slice(&z.layer(&tb.modality)?[tb.bands.clone()]);
                }
                SampleTarget::Values { values, valid }
            }
            LossKind::ImageClassification => {
                let tb = &task.targets[0];
                SampleTarget::Label(labels(&raw.layer(&tb.modality)?[tb.bands.start..tb.bands.start + 1], task)?[0])
            }
        };
        targets.push(t);
    }
    Ok(PreparedSample {
        size,
        input,
        targets,
        mask,
    })
}

fn labels(src: &[f32], task: &TaskSpec) -> Result<Vec<u32>> {
    src.iter()
        .map(|&v| {
            if v.is_finite() && v >= 0.0 && (v as usize) < task.output_channels && v.fract() == 0.0 {
                Ok(v as u32)
            } else {
                Err(Error::CorruptDataset(format!("label {v} out of range for `{}`", task.task_id)))
            }
        })
        .collect()
}

/// Batched tensors for one forward pass.
pub struct Batch {
    pub input: Tensor,
    pub masks: MaskSet,
    pub targets: Vec<TaskTarget>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn collate(items: &[PreparedSample], tasks: &[TaskSpec]) -> Result<Batch> {
    let first = items.first().ok_or_else(|| Error::invalid("cannot collate an empty batch"))?;
    let n = items.len();
    let s = first.size;
    let input = Tensor::new(
        &[n, s, s, OPTICAL_BANDS],
        items.iter().flat_map(|it| it.input.iter().copied()).collect(),
    );
    let masks = MaskSet::new(
        items
            .iter()
            .map(|it| it.mask.clone().ok_or_else(|| Error::invalid("training sample without a mask")))
            .collect::<Result<_>>()?,
    );
    let mut targets = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        let col = items.iter().map(|it| &it.targets[t]);
        let target = match task.loss_kind {
            LossKind::MaskedRegression => {
                let (mut v, mut m) = (Vec::new(), Vec::new());
                for st in col {
                    let SampleTarget::Pixel { values, valid } = st else { unreachable!() };
                    v.extend_from_slice(values);
                    m.extend_from_slice(valid);
                }
                TaskTarget::Pixel {
                    values: Tensor::new(&[n, s, s, task.target_width()], v),
                    valid: Rc::new(Tensor::new(&[n, s, s, 1], m)),
                }
            }
            LossKind::MaskedClassification => {
                let mut l = Vec::with_capacity(n * s * s);
                for st in col {
                    let SampleTarget::PixelLabels(x) = st else { unreachable!() };
                    l.extend_from_slice(x);
                }
                TaskTarget::PixelLabels { labels: Rc::new(l) }
            }
            LossKind::ImageRegression => {
                let (mut v, mut m) = (Vec::new(), Vec::new());
                for st in col {
                    let SampleTarget::Values { values, valid } = st else { unreachable!() };
                    v.extend_from_slice(values);
                    m.push(if *valid { 1.0 } else { 0.0 });
                }
                TaskTarget::Values {
                    values: Tensor::new(&[n, task.target_width()], v),
                    valid: Rc::new(m),
                }
            }
            LossKind::ImageClassification => TaskTarget::Labels {
                labels: Rc::new(
                    col.map(|st| match st {
                        SampleTarget::Label(l) => *l,
                        _ => unreachable!(),
                    })
                    .collect(),
                ),
            },
        };
        targets.push(target);
    }
    Ok(Batch { input, masks, targets })
}
