//! Downstream classification and segmentation tasks derived from the
//! landcover layer of a generated dataset.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pretrain::optical_input;
use crate::schema::{BandStats, DYNAMIC_WORLD, DYNAMIC_WORLD_NO_DATA};
use crate::synthgen::{mix_seed, SampleSource};

pub const DOWNSTREAM_SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    MultiClass,
    MultiLabel,
    Segmentation,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::MultiClass, TaskKind::MultiLabel, TaskKind::Segmentation];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::MultiClass => "multi-class",
            TaskKind::MultiLabel => "multi-label",
            TaskKind::Segmentation => "segmentation",
        }
    }

    pub fn metric(self) -> &'static str {
        match self {
            TaskKind::MultiClass => "accuracy",
            TaskKind::MultiLabel => "micro_f1",
            TaskKind::Segmentation => "macro_iou",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown downstream task `{s}` (expected multi-class, multi-label or segmentation)")))
    }
}

/// Center-cropped standardized optical inputs and per-pixel landcover.
#[derive(Debug)]
pub struct DownstreamData {
    pub size: usize,
    pub classes: usize,
    /// `size × size × 12` per sample.
    pub inputs: Vec<Vec<f32>>,
    /// Landcover class per pixel, [`DownstreamData::ignore`] where unlabelled.
    pub landcover: Vec<Vec<u32>>,
    pub splits: BTreeMap<String, Vec<usize>>,
}

impl DownstreamData {
    /// Read every sample of the train/val/test splits, standardize the optical
    /// bands with `stats` and crop the centre `size × size` window.
    pub fn load(source: &dyn SampleSource, stats: &BandStats, size: usize) -> Result<Self> {
        let reg = source.registry();
        let dw = reg.expect(DYNAMIC_WORLD)?;
        let classes = dw.class_count.unwrap_or(0) as usize - 1;
        let mut splits = BTreeMap::new();
        let mut order = Vec::new();
        for name in DOWNSTREAM_SPLITS {
            let idx = source.split(name)?;
            if idx.is_empty() {
                return Err(Error::Config(format!("downstream split `{name}` is empty")));
            }
            let start = order.len();
            order.extend(idx);
            splits.insert(name.to_string(), (start..order.len()).collect());
        }
        let mut inputs = Vec::with_capacity(order.len());
        let mut landcover = Vec::with_capacity(order.len());
        for &i in &order {
            let raw = source.sample(i)?;
            if raw.size < size {
                return Err(Error::ShapeMismatch {
                    name: "downstream raster (must cover the encoder input)".into(),
                    expected: vec![size, size],
                    found: vec![raw.size, raw.size],
                });
            }
            let off = (raw.size - size) / 2;
            let s = if raw.size == size { raw } else { raw.crop(reg, off, off, size)? };
            inputs.push(optical_input(&s, stats, reg)?);
            let lc = s
                .layer(DYNAMIC_WORLD)?
                .iter()
                .map(|&v| {
                    let v = v as u32;
                    if v == DYNAMIC_WORLD_NO_DATA { classes as u32 } else { v - 1 }
                })
                .collect();
            landcover.push(lc);
        }
        Ok(DownstreamData {
            size,
            classes,
            inputs,
            landcover,
            splits,
        })
    }

    pub fn ignore(&self) -> u32 {
        self.classes as u32
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Config(format!("no `{name}` split")))
    }

    fn histogram(&self, i: usize) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &c in &self.landcover[i] {
            if (c as usize) < self.classes {
                h[c as usize] += 1;
            }
        }
        h
    }

    /// Most frequent labelled class; ties go to the lower index.
    pub fn modal_class(&self, i: usize) -> u32 {
        let h = self.histogram(i);
        let mut best = 0;
        for (c, &n) in h.iter().enumerate() {
            if n > h[best] {
                best = c;
            }
        }
        best as u32
    }

    pub fn task(self: &Arc<Self>, kind: TaskKind, presence: f64) -> DownstreamTask {
        let n = self.len();
        let labels = match kind {
            TaskKind::MultiClass => Labels::Class((0..n).map(|i| self.modal_class(i)).collect()),
            TaskKind::MultiLabel => Labels::MultiHot(
                (0..n)
                    .map(|i| {
                        let h = self.histogram(i);
                        let total: usize = h.iter().sum();
                        h.iter().map(|&c| total > 0 && c as f64 > presence * total as f64).collect()
                    })
                    .collect(),
            ),
            TaskKind::Segmentation => Labels::Pixel,
        };
        DownstreamTask {
            kind,
            classes: self.classes,
            data: self.clone(),
            labels,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Class(Vec<u32>),
    MultiHot(Vec<Vec<bool>>),
    /// Per-pixel landcover from the shared data.
    Pixel,
}

#[derive(Clone, Debug)]
pub struct DownstreamTask {
    pub kind: TaskKind,
    pub classes: usize,
    pub data: Arc<DownstreamData>,
    pub labels: Labels,
}

impl DownstreamTask {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        self.data.split(name)
    }

    /// Class used for stratification: the label itself for scene tasks, the
    /// modal class otherwise.
    pub fn strata(&self, i: usize) -> u32 {
        match &self.labels {
            Labels::Class(c) => c[i],
            _ => self.data.modal_class(i),
        }
    }
}

/// Keep `round(fraction · n_c)` of each class, at least one for every class
/// present. Order within a class is shuffled with `seed`; the result is sorted.
pub fn stratified_subsample(indices: &[usize], strata: impl Fn(usize) -> u32, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("training fraction {fraction} must lie in (0, 1]")));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_class.entry(strata(i)).or_default().push(i);
    }
    let mut out = Vec::new();
    for (c, mut members) in by_class {
        let take = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, c as u64)));
        out.extend_from_slice(&members[..take]);
    }
    out.sort_unstable();
    Ok(out)
}
