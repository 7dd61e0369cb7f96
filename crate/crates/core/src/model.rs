//! Masked convolutional encoder, shared mask token and per-task decoders.

use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{PatchGrid, PatchMask};
use crate::nn::{Graph, ParamId, ParamStore, SpatialWeights, Tensor, Var};
use crate::schema::{LossKind, TaskSpec};

pub const OPTICAL_BANDS: usize = 12;
const BLOCK_KERNEL: usize = 7;
const EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    /// Full-resolution 3×3 conv, then a depthwise downsampling conv.
    Modified,
    /// One patchifying conv.
    Original,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub image_size: usize,
    pub patch_size: usize,
    pub stem: StemKind,
}

impl EncoderConfig {
    pub fn atto(image_size: usize, patch_size: usize) -> Self {
        EncoderConfig {
            in_channels: OPTICAL_BANDS,
            depths: vec![2, 2, 6, 2],
            widths: vec![40, 80, 160, 320],
            image_size,
            patch_size,
            stem: StemKind::Modified,
        }
    }

    /// Half the Atto widths; the desk-scale default.
    pub fn pico(image_size: usize, patch_size: usize) -> Self {
        EncoderConfig {
            widths: vec![20, 40, 80, 160],
            ..Self::atto(image_size, patch_size)
        }
    }

    /// Smallest useful configuration, for tests and smoke runs.
    pub fn tiny(image_size: usize, patch_size: usize) -> Self {
        EncoderConfig {
            depths: vec![1, 1, 1, 1],
            widths: vec![8, 16, 32, 64],
            ..Self::atto(image_size, patch_size)
        }
    }

    /// Stride of the stem; the four stages add a further factor of 8.
    pub fn stem_stride(&self) -> usize {
        self.patch_size / 8
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.image_size, self.patch_size)
    }

    /// Feature side after the stem (stage 0) and after each later stage.
    pub fn stage_resolutions(&self) -> Vec<usize> {
        let r0 = self.image_size / self.stem_stride();
        (0..4).map(|i| r0 >> i).collect()
    }

    pub fn final_width(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depths.len() != 4 || self.widths.len() != 4 {
            return fail("encoder needs exactly 4 stages".into());
        }
        if self.widths.contains(&0) || self.depths.contains(&0) {
            return fail(format!(
                "zero width or depth in widths {:?} depths {:?}",
                self.widths, self.depths
            ));
        }
        if self.in_channels == 0 {
            return fail("in_channels must be positive".into());
        }
        if self.patch_size < 8 || self.patch_size % 8 != 0 {
            return fail(format!("patch_size {} must be a positive multiple of 8", self.patch_size));
        }
        self.grid().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub width: usize,
    pub blocks: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { width: 256, blocks: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
}

// ----------------------------------------------------------------- masks

/// Per-sample patch masks with visibility maps cached per feature resolution.
pub struct MaskSet {
    masks: Vec<Arc<PatchMask>>,
    keep: std::cell::RefCell<BTreeMap<usize, SpatialWeights>>,
}

impl MaskSet {
    pub fn new(masks: Vec<Arc<PatchMask>>) -> Self {
        MaskSet {
            masks,
            keep: Default::default(),
        }
    }

    pub fn masks(&self) -> &[Arc<PatchMask>] {
        &self.masks
    }

    /// `[N, res, res, 1]`, 1 at visible cells.
    pub fn keep(&self, res: usize) -> SpatialWeights {
        self.keep
            .borrow_mut()
            .entry(res)
            .or_insert_with(|| {
                let refs: Vec<&PatchMask> = self.masks.iter().map(|m| m.as_ref()).collect();
                Rc::new(crate::masking::keep_tensor(&refs, res))
            })
            .clone()
    }

    /// `[N, res, res, 1]`, 1 at masked cells.
    pub fn hidden(&self, res: usize) -> SpatialWeights {
        Rc::new(self.keep(res).map(|k| 1.0 - k))
    }
}

fn mask_opt(g: &mut Graph, x: Var, keep: Option<&SpatialWeights>) -> Var {
    match keep {
        Some(k) => g.mask_spatial(x, k),
        None => x,
    }
}

// ----------------------------------------------------------------- layers

#[derive(Clone, Debug)]
pub struct Norm {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn build(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Norm {
            weight: store.add_const(&format!("{name}.weight"), &[c], 1.0),
            bias: store.add_const(&format!("{name}.bias"), &[c], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.layer_norm(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub depthwise: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Conv {
            weight: store.add_weight(&format!("{name}.weight"), &[kernel * kernel * c_in, c_out], rng),
            bias: store.add_const(&format!("{name}.bias"), &[c_out], 0.0),
            kernel,
            stride,
            pad,
            depthwise: false,
        }
    }

    fn build_depthwise(store: &mut ParamStore, name: &str, c: usize, kernel: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        Conv {
            weight: store.add_weight(&format!("{name}.weight"), &[kernel * kernel, c], rng),
            bias: store.add_const(&format!("{name}.bias"), &[c], 0.0),
            kernel,
            stride,
            pad,
            depthwise: true,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        if self.depthwise {
            g.depthwise(x, w, Some(b), self.kernel, self.stride, self.pad)
        } else {
            g.conv2d(x, w, Some(b), self.kernel, self.stride, self.pad)
        }
    }
}

/// Depthwise 7×7 → LN → 1×1 (4×) → GELU → GRN → 1×1, plus the residual.
#[derive(Clone, Debug)]
pub struct Block {
    pub dw: Conv,
    pub norm: Norm,
    pub pw1: Conv,
    pub grn_gamma: ParamId,
    pub grn_beta: ParamId,
    pub pw2: Conv,
}

impl Block {
    fn build(store: &mut ParamStore, name: &str, c: usize, rng: &mut impl Rng) -> Self {
        let h = EXPANSION * c;
        Block {
            dw: Conv::build_depthwise(store, &format!("{name}.dw"), c, BLOCK_KERNEL, 1, BLOCK_KERNEL / 2, rng),
            norm: Norm::build(store, &format!("{name}.norm"), c),
            pw1: Conv::build(store, &format!("{name}.pw1"), c, h, 1, 1, 0, rng),
            grn_gamma: store.add_const(&format!("{name}.grn.gamma"), &[h], 0.0),
            grn_beta: store.add_const(&format!("{name}.grn.beta"), &[h], 0.0),
            pw2: Conv::build(store, &format!("{name}.pw2"), h, c, 1, 1, 0, rng),
        }
    }

    /// With `keep`, masked positions are zero on entry and on exit, never
    /// feed visible positions, and are excluded from the GRN statistics.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, keep: Option<&SpatialWeights>) -> Var {
        let y = self.dw.forward(g, store, x);
        let y = mask_opt(g, y, keep);
        let y = self.norm.forward(g, store, y);
        let y = self.pw1.forward(g, store, y);
        let y = g.gelu(y);
        let y = mask_opt(g, y, keep);
        let gm = g.param(store, self.grn_gamma);
        let bt = g.param(store, self.grn_beta);
        let y = g.grn(y, gm, bt);
        let y = self.pw2.forward(g, store, y);
        let y = mask_opt(g, y, keep);
        g.add(x, y)
    }
}

#[derive(Clone, Debug)]
pub enum Stem {
    Modified { conv: Conv, down: Conv, norm: Norm },
    Original { conv: Conv, norm: Norm },
}

#[derive(Clone, Debug)]
pub struct Stage {
    /// LN + 2×2 stride-2 conv; absent for the first stage.
    pub down: Option<(Norm, Conv)>,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stem: Stem,
    pub stages: Vec<Stage>,
}

/// Encoder activations: tokens plus the feature pyramid.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[N, 7, 7, final_width]` for the default grids.
    pub tokens: Var,
    /// Output of each of the four stages.
    pub stages: Vec<Var>,
    /// Stem features at input resolution (modified stem only).
    pub full_res: Option<Var>,
}

impl Encoder {
    pub fn build(config: &EncoderConfig, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let w = &config.widths;
        let s = config.stem_stride();
        let stem = match config.stem {
            StemKind::Modified => Stem::Modified {
                conv: Conv::build(store, &format!("{prefix}stem.conv"), config.in_channels, w[0], 3, 1, 1, rng),
                down: Conv::build_depthwise(store, &format!("{prefix}stem.down"), w[0], s, s, 0, rng),
                norm: Norm::build(store, &format!("{prefix}stem.norm"), w[0]),
            },
            StemKind::Original => Stem::Original {
                conv: Conv::build(store, &format!("{prefix}stem.conv"), config.in_channels, w[0], s, s, 0, rng),
                norm: Norm::build(store, &format!("{prefix}stem.norm"), w[0]),
            },
        };
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let name = format!("{prefix}stages.{i}");
            let down = (i > 0).then(|| {
                (
                    Norm::build(store, &format!("{name}.down.norm"), w[i - 1]),
                    Conv::build(store, &format!("{name}.down.conv"), w[i - 1], w[i], 2, 2, 0, rng),
                )
            });
            let blocks = (0..config.depths[i])
                .map(|j| Block::build(store, &format!("{name}.blocks.{j}"), w[i], rng))
                .collect();
            stages.push(Stage { down, blocks });
        }
        Ok(Encoder {
            config: config.clone(),
            stem,
            stages,
        })
    }

    /// `x` is `[N, S, S, in_channels]`, already standardized. With `masks`,
    /// hidden patches are zeroed at the input and kept at zero through every
    /// stage; without, the forward is dense.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, masks: Option<&MaskSet>) -> Result<EncoderOutput> {
        let (_, h, w, c) = g.value(x).dims4();
        let s = self.config.image_size;
        if h != s || w != s || c != self.config.in_channels {
            return Err(Error::invalid(format!(
                "encoder expects [N, {s}, {s}, {}], got [_, {h}, {w}, {c}]",
                self.config.in_channels
            )));
        }
        let res = self.config.stage_resolutions();
        let keep = |r: usize| masks.map(|m| m.keep(r));
        let x = mask_opt(g, x, keep(s).as_ref());
        let (mut y, full_res) = match &self.stem {
            Stem::Modified { conv, down, norm } => {
                let f = conv.forward(g, store, x);
                let f = mask_opt(g, f, keep(s).as_ref());
                let y = down.forward(g, store, f);
                let y = norm.forward(g, store, y);
                (mask_opt(g, y, keep(res[0]).as_ref()), Some(f))
            }
            Stem::Original { conv, norm } => {
                let y = conv.forward(g, store, x);
                let y = norm.forward(g, store, y);
                (mask_opt(g, y, keep(res[0]).as_ref()), None)
            }
        };
        let mut outs = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter().enumerate() {
            let k = keep(res[i]);
            if let Some((norm, conv)) = &stage.down {
                y = norm.forward(g, store, y);
                y = conv.forward(g, store, y);
                y = mask_opt(g, y, k.as_ref());
            }
            for b in &stage.blocks {
                y = b.forward(g, store, y, k.as_ref());
            }
            outs.push(y);
        }
        Ok(EncoderOutput {
            tokens: y,
            stages: outs,
            full_res,
        })
    }
}

// ---------------------------------------------------------------- decoders

#[derive(Clone, Debug)]
pub struct Decoder {
    pub task: TaskSpec,
    pub proj: Conv,
    pub block: Block,
    /// 1×1 conv to `p²·channels` (pixel tasks) or linear to `channels`.
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

impl Decoder {
    fn build(task: &TaskSpec, in_width: usize, cfg: &DecoderConfig, patch: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let name = format!("decoders.{}", task.task_id);
        let out = if task.loss_kind.is_pixel() {
            patch * patch * task.output_channels
        } else {
            task.output_channels
        };
        Decoder {
            task: task.clone(),
            proj: Conv::build(store, &format!("{name}.proj"), in_width, cfg.width, 1, 1, 0, rng),
            block: Block::build(store, &format!("{name}.block"), cfg.width, rng),
            head_weight: store.add_weight(&format!("{name}.head.weight"), &[cfg.width, out], rng),
            head_bias: store.add_const(&format!("{name}.head.bias"), &[out], 0.0),
        }
    }

    fn trunk(&self, g: &mut Graph, store: &ParamStore, dense: Var) -> Var {
        let y = self.proj.forward(g, store, dense);
        self.block.forward(g, store, y, None)
    }

    /// `[N, S, S, channels]` prediction for a pixel task.
    pub fn decode_pixel(&self, g: &mut Graph, store: &ParamStore, dense: Var, patch: usize) -> Result<Var> {
        if !self.task.loss_kind.is_pixel() {
            return Err(Error::Config(format!("`{}` is not a pixel-level task", self.task.task_id)));
        }
        let y = self.trunk(g, store, dense);
        let w = g.param(store, self.head_weight);
        let b = g.param(store, self.head_bias);
        let y = g.conv2d(y, w, Some(b), 1, 1, 0);
        Ok(g.depth_to_space(y, patch))
    }

    /// `[N, channels]` prediction pooled over the hidden cells.
    pub fn decode_image(&self, g: &mut Graph, store: &ParamStore, dense: Var, hidden: &SpatialWeights) -> Result<Var> {
        if self.task.loss_kind.is_pixel() {
            return Err(Error::Config(format!("`{}` is not an image-level task", self.task.task_id)));
        }
        let (n, gh, gw) = hidden.dims4_spatial();
        for s in 0..n {
            if hidden.data()[s * gh * gw..(s + 1) * gh * gw].iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidState(format!(
                    "sample {s} has no masked cells to pool for `{}`",
                    self.task.task_id
                )));
            }
        }
        let y = self.trunk(g, store, dense);
        let pooled = g.masked_mean_pool(y, hidden);
        let w = g.param(store, self.head_weight);
        let b = g.param(store, self.head_bias);
        Ok(g.linear(pooled, w, Some(b)))
    }
}

trait SpatialDims {
    fn dims4_spatial(&self) -> (usize, usize, usize);
}

impl SpatialDims for Tensor {
    fn dims4_spatial(&self) -> (usize, usize, usize) {
        let (n, h, w, _) = self.dims4();
        (n, h, w)
    }
}

// ------------------------------------------------------------------ model

/// Learnable parameter counts by component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub encoder: usize,
    pub mask_token: usize,
    pub decoders: usize,
    pub uncertainty: usize,
    pub total: usize,
}

pub const ENCODER_PREFIX: &str = "encoder.";
pub const MASK_TOKEN: &str = "encoder.mask_token";
pub const UNCERTAINTY_PREFIX: &str = "uncertainty.";

/// Forward outputs per task, in task order.
#[derive(Clone, Debug)]
pub struct TaskPredictions {
    pub outputs: Vec<Var>,
    pub encoder: EncoderOutput,
}

pub struct MpMae {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub mask_token: ParamId,
    pub decoders: Vec<Decoder>,
    /// `s_t = log σ̂_t²` per task.
    pub log_vars: Vec<ParamId>,
    pub store: ParamStore,
}

impl MpMae {
    pub fn new(config: &ModelConfig, tasks: &[TaskSpec], rng: &mut impl Rng) -> Result<Self> {
        if config.decoder.blocks != 1 {
            return Err(Error::Config(format!("decoder block count must be 1, got {}", config.decoder.blocks)));
        }
        if config.decoder.width == 0 {
            return Err(Error::Config("decoder width must be positive".into()));
        }
        if tasks.is_empty() {
            return Err(Error::Config("at least one pretext task is required".into()));
        }
        let mut store = ParamStore::new();
        let encoder = Encoder::build(&config.encoder, &mut store, ENCODER_PREFIX, rng)?;
        let fw = config.encoder.final_width();
        let mask_token = store.add_weight(MASK_TOKEN, &[fw], rng);
        store.set_no_decay(mask_token, true);
        let decoders = tasks
            .iter()
            .map(|t| Decoder::build(t, fw, &config.decoder, config.encoder.patch_size, &mut store, rng))
            .collect();
        let log_vars = tasks
            .iter()
            .map(|t| store.add_const(&format!("{UNCERTAINTY_PREFIX}{}", t.task_id), &[1], 0.0))
            .collect();
        Ok(MpMae {
            config: config.clone(),
            encoder,
            mask_token,
            decoders,
            log_vars,
            store,
        })
    }

    pub fn tasks(&self) -> Vec<&TaskSpec> {
        self.decoders.iter().map(|d| &d.task).collect()
    }

    pub fn grid(&self) -> PatchGrid {
        self.config.encoder.grid().expect("validated at construction")
    }

    pub fn encode(&self, g: &mut Graph, x: Var, masks: Option<&MaskSet>) -> Result<EncoderOutput> {
        self.encoder.forward(g, &self.store, x, masks)
    }

    /// Hidden cells of `z` replaced by the mask token.
    pub fn fill_mask_tokens(&self, g: &mut Graph, z: Var, masks: &MaskSet) -> Var {
        let side = self.grid().side();
        let token = g.param(&self.store, self.mask_token);
        g.fill_mask(z, token, &masks.keep(side))
    }

    pub fn decoder(&self, task_id: &str) -> Result<&Decoder> {
        self.decoders
            .iter()
            .find(|d| d.task.task_id == task_id)
            .ok_or_else(|| Error::Config(format!("no decoder for task `{task_id}`")))
    }

    pub fn decode_pixel_task(&self, g: &mut Graph, dense: Var, task_id: &str) -> Result<Var> {
        self.decoder(task_id)?
            .decode_pixel(g, &self.store, dense, self.config.encoder.patch_size)
    }

    pub fn decode_image_task(&self, g: &mut Graph, dense: Var, masks: &MaskSet, task_id: &str) -> Result<Var> {
        let hidden = masks.hidden(self.grid().side());
        self.decoder(task_id)?.decode_image(g, &self.store, dense, &hidden)
    }

    /// Masked encode, fill, and decode every task.
    pub fn forward(&self, g: &mut Graph, x: Var, masks: &MaskSet) -> Result<TaskPredictions> {
        let enc = self.encode(g, x, Some(masks))?;
        let dense = self.fill_mask_tokens(g, enc.tokens, masks);
        let hidden = masks.hidden(self.grid().side());
        let mut outputs = Vec::with_capacity(self.decoders.len());
        for d in &self.decoders {
            let o = match d.task.loss_kind {
                LossKind::MaskedRegression | LossKind::MaskedClassification => {
                    d.decode_pixel(g, &self.store, dense, self.config.encoder.patch_size)?
                }
                _ => d.decode_image(g, &self.store, dense, &hidden)?,
            };
            outputs.push(o);
        }
        Ok(TaskPredictions { outputs, encoder: enc })
    }

    pub fn count_parameters(&self) -> ParamCounts {
        count_parameters(&self.store)
    }
}

pub fn count_parameters(store: &ParamStore) -> ParamCounts {
    let token = store.count_prefix(MASK_TOKEN);
    let encoder = store.count_prefix(ENCODER_PREFIX) - token;
    let decoders = store.count_prefix("decoders.");
    let uncertainty = store.count_prefix(UNCERTAINTY_PREFIX);
    ParamCounts {
        encoder,
        mask_token: token,
        decoders,
        uncertainty,
        total: store.count(),
    }
}

/// Stack standardized `(C, H, W)` optical rasters into `[N, H, W, C]`.
pub fn stack_inputs(rasters: &[&[f32]], channels: usize, size: usize) -> Tensor {
    let items: Vec<Tensor> = rasters.iter().map(|r| Tensor::from_chw(channels, size, size, r)).collect();
    Tensor::stack(&items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::sample_mask;
    use crate::schema::{build_modality_registry, default_tasks, select_tasks, RegistryConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tasks(sel: &str) -> Vec<TaskSpec> {
        let reg = build_modality_registry(&RegistryConfig::default()).unwrap();
        select_tasks(&reg, sel).unwrap()
    }

    fn random_input(n: usize, s: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(&[n, s, s, 12], (0..n * s * s * 12).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn tiny_model(sel: &str, dec: usize) -> MpMae {
        let cfg = ModelConfig {
            encoder: EncoderConfig::tiny(56, 8),
            decoder: DecoderConfig { width: dec, blocks: 1 },
        };
        MpMae::new(&cfg, &tasks(sel), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn token_grid_is_seven_for_all_configs() {
        for (s, p) in [(224, 32), (112, 16), (56, 8)] {
            for stem in [StemKind::Modified, StemKind::Original] {
                let cfg = EncoderConfig {
                    stem,
                    ..EncoderConfig::tiny(s, p)
                };
                let mut store = ParamStore::new();
                let enc = Encoder::build(&cfg, &mut store, "e.", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
                let mut g = Graph::new();
                let x = g.constant(Tensor::zeros(&[1, s, s, 12]));
                let out = enc.forward(&mut g, &store, x, None).unwrap();
                assert_eq!(g.value(out.tokens).dims4(), (1, 7, 7, 64), "({s},{p}) {stem:?}");
                if stem == StemKind::Modified {
                    assert_eq!(g.value(out.full_res.unwrap()).dims4().1, s);
                }
            }
        }
    }

    #[test]
    fn original_stem_strides_by_four_at_224() {
        let cfg = EncoderConfig {
            stem: StemKind::Original,
            ..EncoderConfig::tiny(224, 32)
        };
        let mut store = ParamStore::new();
        let enc = Encoder::build(&cfg, &mut store, "e.", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 224, 224, 12]));
        let out = enc.forward(&mut g, &store, x, None).unwrap();
        assert_eq!(g.value(out.stages[0]).dims4().1, 56);
    }

    #[test]
    fn atto_parameter_count() {
        let mut store = ParamStore::new();
        Encoder::build(&EncoderConfig::atto(112, 16), &mut store, ENCODER_PREFIX, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let n = store.count() as f64;
        assert!((n - 3.7e6).abs() / 3.7e6 < 0.10, "{n}");
    }

    #[test]
    fn decoder_params_scale_with_task_count() {
        let one = tiny_model("biome", 16).count_parameters();
        let two = tiny_model("biome,ecoregion", 16).count_parameters();
        assert_eq!(one.encoder, two.encoder);
        // ecoregion (16 classes) head is 2·16+2 wider than biome (14)
        assert_eq!(two.decoders, 2 * one.decoders + 2 * 16 + 2);
        assert_eq!(two.uncertainty, 2);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut e = EncoderConfig::tiny(56, 8);
        e.widths[2] = 0;
        let cfg = ModelConfig {
            encoder: e,
            decoder: DecoderConfig::default(),
        };
        assert!(MpMae::new(&cfg, &tasks("all"), &mut rng).is_err());
        let cfg = ModelConfig {
            encoder: EncoderConfig::tiny(56, 8),
            decoder: DecoderConfig { width: 8, blocks: 2 },
        };
        assert!(MpMae::new(&cfg, &tasks("all"), &mut rng).is_err());
    }

    #[test]
    fn output_shapes() {
        let m = tiny_model("all", 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mask = Arc::new(sample_mask(m.grid(), 0.6, &mut rng).unwrap());
        let masks = MaskSet::new(vec![mask.clone(), mask]);
        let mut g = Graph::new();
        let x = g.constant(random_input(2, 56, &mut rng));
        let p = m.forward(&mut g, x, &masks).unwrap();
        let shapes: Vec<Vec<usize>> = p.outputs.iter().map(|&o| g.value(o).shape().to_vec()).collect();
        assert_eq!(shapes[0], vec![2, 56, 56, 12]);
        assert_eq!(shapes[4], vec![2, 56, 56, 10]);
        assert_eq!(shapes[6], vec![2, 14]);
        assert_eq!(shapes[8], vec![2, 12]);
        assert_eq!(shapes[9], vec![2, 2]);
    }

    #[test]
    fn grn_identity_at_zero_init_and_doubles_single_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new(&[1, 3, 3, 4], (0..36).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let z = g.constant(Tensor::zeros(&[4]));
        let y = g.grn(xv, z, z);
        assert_eq!(g.value(y), &x);
        let x2 = g.constant(x.map(|v| 2.0 * v));
        let y2 = g.grn(x2, z, z);
        assert_eq!(g.value(y2), &x.map(|v| 2.0 * v));
        let one = Tensor::new(&[1, 2, 2, 1], vec![0.5, -1.0, 2.0, 0.25]);
        let xv = g.constant(one.clone());
        let gm = g.constant(Tensor::full(&[1], 1.0));
        let bt = g.constant(Tensor::zeros(&[1]));
        let y = g.grn(xv, gm, bt);
        assert!(g.value(y).max_abs_diff(&one.map(|v| 2.0 * v)) < 1e-5);
    }

    #[test]
    fn fill_mask_tokens_selects_cells() {
        let m = tiny_model("s2", 8);
        let grid = m.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::new(&[1, 7, 7, 64], (0..49 * 64).map(|_| rng.random_range(-1.0..1.0)).collect());
        let token = m.store.value(m.mask_token).clone();
        for mask in [
            PatchMask::all_masked(grid),
            PatchMask::all_visible(grid),
            sample_mask(grid, 0.6, &mut rng).unwrap(),
        ] {
            let masks = MaskSet::new(vec![Arc::new(mask.clone())]);
            let mut g = Graph::new();
            let zv = g.constant(z.clone());
            let out = m.fill_mask_tokens(&mut g, zv, &masks);
            let o = g.value(out).data();
            for cell in 0..49 {
                let expect: &[f32] = if mask.masked[cell] {
                    token.data()
                } else {
                    &z.data()[cell * 64..(cell + 1) * 64]
                };
                assert_eq!(&o[cell * 64..(cell + 1) * 64], expect);
            }
        }
    }

    #[test]
    fn zero_head_gives_zero_raster() {
        let mut m = tiny_model("s2", 8);
        let d = &m.decoders[0];
        let (hw, hb) = (d.head_weight, d.head_bias);
        m.store.value_mut(hw).data_mut().fill(0.0);
        m.store.value_mut(hb).data_mut().fill(0.0);
        let mut g = Graph::new();
        let dense = g.constant(Tensor::zeros(&[1, 7, 7, 64]));
        let out = m.decode_pixel_task(&mut g, dense, "sentinel2").unwrap();
        assert_eq!(g.value(out).shape(), &[1, 56, 56, 12]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        assert!(m.decode_pixel_task(&mut g, dense, "biome").is_err());
        assert!(m.decode_pixel_task(&mut g, dense, "nope").is_err());
    }

    #[test]
    fn image_pool_needs_a_masked_cell() {
        let m = tiny_model("biome", 8);
        let masks = MaskSet::new(vec![Arc::new(PatchMask::all_visible(m.grid()))]);
        let mut g = Graph::new();
        let dense = g.constant(Tensor::zeros(&[1, 7, 7, 64]));
        let err = m.decode_image_task(&mut g, dense, &masks, "biome").unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)));
    }

    #[test]
    fn single_masked_cell_pools_to_that_cell() {
        let m = tiny_model("biome", 8);
        let grid = m.grid();
        let mut masked = vec![false; 49];
        masked[17] = true;
        let masks = MaskSet::new(vec![Arc::new(PatchMask::from_masked(grid, masked).unwrap())]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dense_t = Tensor::new(&[1, 7, 7, 64], (0..49 * 64).map(|_| rng.random_range(-1.0..1.0)).collect());
        let d = m.decoder("biome").unwrap();
        let mut g = Graph::new();
        let dense = g.constant(dense_t);
        let out = m.decode_image_task(&mut g, dense, &masks, "biome").unwrap();
        let trunk = d.trunk(&mut g, &m.store, dense);
        let cell: Vec<f32> = g.value(trunk).data()[17 * 8..18 * 8].to_vec();
        let cv = g.constant(Tensor::new(&[1, 8], cell));
        let w = g.param(&m.store, d.head_weight);
        let b = g.param(&m.store, d.head_bias);
        let direct = g.linear(cv, w, Some(b));
        assert!(g.value(out).max_abs_diff(g.value(direct)) < 1e-6);
    }

    #[test]
    fn default_task_list_builds() {
        let reg = build_modality_registry(&RegistryConfig::default()).unwrap();
        let t = default_tasks(&reg).unwrap();
        let m = MpMae::new(
            &ModelConfig {
                encoder: EncoderConfig::tiny(56, 8),
                decoder: DecoderConfig { width: 8, blocks: 1 },
            },
            &t,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(m.decoders.len(), 12);
        assert!(!m.store.decays(m.mask_token));
    }
}
