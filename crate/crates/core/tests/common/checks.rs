//! Measurements behind the model-level properties, shared by the focused
//! integration tests and the acceptance run.

use std::sync::Arc;

use mpmae::losses::{aggregate_multitask, masked_mse_var, task_loss, LossMode};
use mpmae::masking::PatchMask;
use mpmae::model::{DecoderConfig, EncoderConfig, MaskSet, ModelConfig, StemKind, ENCODER_PREFIX};
use mpmae::nn::{Graph, Tensor, Var};
use mpmae::pretrain::{Batch, PretrainConfig, Pretrainer};
use mpmae::schema::{LossKind, SENTINEL2};
use mpmae::synthgen::SampleSource;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub fn random_encoder_config(rng: &mut impl Rng) -> EncoderConfig {
    let patch = if rng.random_bool(0.5) { 8 } else { 16 };
    let side = rng.random_range(2..=4);
    EncoderConfig {
        in_channels: rng.random_range(2..=12),
        depths: (0..4).map(|_| rng.random_range(1..=2)).collect(),
        widths: (0..4).map(|_| rng.random_range(4..=12)).collect(),
        image_size: side * patch,
        patch_size: patch,
        stem: if rng.random_bool(0.5) { StemKind::Modified } else { StemKind::Original },
    }
}

/// Largest |graph − oracle| over visible cells of every stage, and the largest
/// magnitude found at hidden cells of the graph output, across `configs`
/// random configurations.
pub fn masked_equivalence(configs: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut leak) = (0.0f64, 0.0f64);
    for _ in 0..configs {
        let cfg = random_encoder_config(&mut rng);
        let mut store = mpmae::nn::ParamStore::new();
        let enc = mpmae::model::Encoder::build(&cfg, &mut store, ENCODER_PREFIX, &mut rng).unwrap();
        randomize(&mut store, 0.4, &mut rng);
        let n = rng.random_range(1..=2);
        let s = cfg.image_size;
        let x = random_tensor(&[n, s, s, cfg.in_channels], &mut rng);
        let masks = random_masks(&cfg, n, 0.6, &mut rng);
        let set = MaskSet::new(masks.iter().cloned().map(Arc::new).collect());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = enc.forward(&mut g, &store, xv, Some(&set)).unwrap();
        let reference = oracle_encoder(&store, &cfg, &x, Some(&masks));
        for (v, r) in out.stages.iter().zip(&reference) {
            let t = g.value(*v);
            for nn in 0..r.n {
                for y in 0..r.h {
                    for xx in 0..r.w {
                        let base = ((nn * r.h + y) * r.w + xx) * r.c;
                        for c in 0..r.c {
                            let a = t.data()[base + c] as f64;
                            if visible(&masks[nn], r.h, y, xx) {
                                worst = worst.max((a - r.data[base + c]).abs());
                            } else {
                                leak = leak.max(a.abs());
                            }
                        }
                    }
                }
            }
        }
    }
    (worst, leak)
}

/// Largest |graph − oracle| for a dense (unmasked) forward.
pub fn dense_equivalence(configs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let cfg = random_encoder_config(&mut rng);
        let mut store = mpmae::nn::ParamStore::new();
        let enc = mpmae::model::Encoder::build(&cfg, &mut store, ENCODER_PREFIX, &mut rng).unwrap();
        randomize(&mut store, 0.4, &mut rng);
        let s = cfg.image_size;
        let x = random_tensor(&[1, s, s, cfg.in_channels], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = enc.forward(&mut g, &store, xv, None).unwrap();
        let reference = oracle_encoder(&store, &cfg, &x, None);
        for (v, r) in out.stages.iter().zip(&reference) {
            for (a, b) in g.value(*v).data().iter().zip(&r.data) {
                worst = worst.max((*a as f64 - b).abs());
            }
        }
    }
    worst
}

pub fn tiny_pretrain_config(widths: [usize; 4], crop: usize, patch: usize, tasks: &str) -> PretrainConfig {
    PretrainConfig {
        crop_size: crop,
        tasks: tasks.into(),
        effective_batch: 4,
        batch_size: 4,
        model: ModelConfig {
            encoder: EncoderConfig {
                widths: widths.to_vec(),
                depths: vec![1, 1, 1, 1],
                ..EncoderConfig::tiny(crop, patch)
            },
            decoder: DecoderConfig { width: 8, blocks: 1 },
        },
        ..Default::default()
    }
}

fn pixel_mask(mask: &PatchMask, size: usize) -> Vec<bool> {
    (0..size * size).map(|p| !visible(mask, size, p / size, p % size)).collect()
}

/// Isolation through the full model on a real batch:
/// `(max visible-token change after rewriting hidden pixels, loss change after
/// rewriting hidden pixels, loss change after rewriting visible pixels,
/// max decoder-output change after rewriting visible pixels)`. At init the
/// loss change from visible content can sit below f32 resolution, so the
/// output change is the reliable sign that visible content flows through.
pub fn information_isolation(seed: u64) -> (f64, f64, f64, f64) {
    let (src, stats) = small_source(seed, 32, 4);
    let cfg = tiny_pretrain_config([8, 8, 16, 16], 32, 8, "all");
    let trainer = Pretrainer::new(&cfg, src.registry(), &stats).unwrap();
    let batch = training_batch(&src, &stats, &cfg, src.registry(), 3, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    let run = |b: &Batch| {
        let mut g = Graph::new();
        let (loss, _) = trainer.forward_batch(&mut g, b).unwrap();
        let x = g.constant(b.input.clone());
        let enc = trainer.model.encode(&mut g, x, Some(&b.masks)).unwrap();
        let x = g.constant(b.input.clone());
        let preds = trainer.model.forward(&mut g, x, &b.masks).unwrap();
        let out: Vec<f32> = preds.outputs.iter().flat_map(|&o| g.value(o).data().to_vec()).collect();
        (g.value(loss).item() as f64, g.value(enc.tokens).clone(), out)
    };
    let (base_loss, base_tokens, base_out) = run(&batch);
    let perturb = |hidden: bool, rng: &mut ChaCha8Rng| {
        let mut data = batch.input.data().to_vec();
        let (_, s, _, c) = batch.input.dims4();
        for (i, m) in batch.masks.masks().iter().enumerate() {
            for (p, &is_hidden) in pixel_mask(m, s).iter().enumerate() {
                if is_hidden == hidden {
                    for v in &mut data[(i * s * s + p) * c..][..c] {
                        *v += rng.random_range(-3.0f32..3.0);
                    }
                }
            }
        }
        Batch {
            input: Tensor::new(batch.input.shape(), data),
            masks: MaskSet::new(batch.masks.masks().to_vec()),
            targets: batch.targets.clone(),
        }
    };
    let (hid_loss, hid_tokens, _) = run(&perturb(true, &mut rng));
    let (vis_loss, _, vis_out) = run(&perturb(false, &mut rng));
    let out_change = vis_out.iter().zip(&base_out).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
    let side = cfg.model.encoder.grid().unwrap().side();
    let mut token_change = 0.0f64;
    let c = base_tokens.shape()[3];
    for (i, m) in batch.masks.masks().iter().enumerate() {
        for cell in 0..side * side {
            if !m.masked[cell] {
                let off = (i * side * side + cell) * c;
                for j in 0..c {
                    token_change = token_change.max((hid_tokens.data()[off + j] - base_tokens.data()[off + j]).abs() as f64);
                }
            }
        }
    }
    (token_change, (hid_loss - base_loss).abs(), (vis_loss - base_loss).abs(), out_change)
}

/// Total loss with every pixel-regression target bound as a differentiable
/// leaf. Returns `(largest |∂L/∂target| at visible pixels, largest at hidden)`.
pub fn target_gradient_isolation(seed: u64) -> (f64, f64) {
    let (src, stats) = small_source(seed, 32, 4);
    let mut cfg = tiny_pretrain_config([8, 8, 16, 16], 32, 8, "all");
    cfg.loss_mode = LossMode::Uncertainty;
    let mut trainer = Pretrainer::new(&cfg, src.registry(), &stats).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &id in &trainer.model.log_vars {
        trainer.model.store.value_mut(id).data_mut()[0] = rng.random_range(-1.0..1.0);
    }
    let batch = training_batch(&src, &stats, &cfg, src.registry(), 2, seed);
    let model = &trainer.model;
    let mut g = Graph::new();
    let x = g.constant(batch.input.clone());
    let preds = model.forward(&mut g, x, &batch.masks).unwrap();
    let hidden = batch.masks.hidden(cfg.crop_size);
    let mut results = Vec::new();
    let mut leaves: Vec<Var> = Vec::new();
    for ((d, &out), target) in model.decoders.iter().zip(&preds.outputs).zip(&batch.targets) {
        if d.task.loss_kind == LossKind::MaskedRegression {
            let mpmae::losses::TaskTarget::Pixel { values, valid } = target else { unreachable!() };
            let t = g.leaf(values.clone(), true);
            leaves.push(t);
            let norm = (d.task.target_modalities() == [SENTINEL2]).then_some(cfg.model.encoder.patch_size);
            let (loss, count) = masked_mse_var(&mut g, out, t, &hidden, valid, norm);
            results.push(mpmae::losses::TaskLossResult {
                task_id: d.task.task_id.clone(),
                loss: if count == 0 { None } else { loss },
                valid_element_count: count,
            });
        } else {
            results.push(task_loss(&mut g, &d.task, out, target, &hidden, None).unwrap());
        }
    }
    let log_vars: Vec<Var> = model.log_vars.iter().map(|&id| g.param(&model.store, id)).collect();
    let (total, _) = aggregate_multitask(&mut g, &results, &log_vars, cfg.loss_mode).unwrap();
    g.backward(total);
    let (mut vis, mut hid) = (0.0f64, 0.0f64);
    let s = cfg.crop_size;
    let hmask: Vec<Vec<bool>> = batch.masks.masks().iter().map(|m| pixel_mask(m, s)).collect();
    for t in leaves {
        let grad = g.grad(t).expect("target gradient");
        let c = grad.shape()[3];
        for (i, hm) in hmask.iter().enumerate() {
            for (p, &h) in hm.iter().enumerate() {
                for j in 0..c {
                    let v = grad.data()[(i * s * s + p) * c + j].abs() as f64;
                    if h {
                        hid = hid.max(v);
                    } else {
                        vis = vis.max(v);
                    }
                }
            }
        }
    }
    (vis, hid)
}

/// Relative error between the analytic directional derivative of a scalar
/// readout of the masked encoder (f32 graph, reverse mode) and a
/// Richardson-extrapolated central difference of the same readout through the
/// f64 reference encoder. Directions cover all encoder weights jointly and
/// several single tensors; returns the worst case.
pub fn encoder_finite_differences(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        in_channels: 12,
        widths: vec![8, 8, 8, 8],
        depths: vec![1, 1, 1, 1],
        ..EncoderConfig::tiny(32, 8)
    };
    let mut store = mpmae::nn::ParamStore::new();
    let enc = mpmae::model::Encoder::build(&cfg, &mut store, ENCODER_PREFIX, &mut rng).unwrap();
    randomize(&mut store, 0.3, &mut rng);
    let x = random_tensor(&[2, 32, 32, 12], &mut rng);
    let masks = random_masks(&cfg, 2, 0.6, &mut rng);
    let set = MaskSet::new(masks.iter().cloned().map(Arc::new).collect());

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = enc.forward(&mut g, &store, xv, Some(&set)).unwrap();
    let mut readout = Vec::new();
    let mut terms = Vec::new();
    for &v in &out.stages {
        let r = random_tensor(g.value(v).shape(), &mut rng);
        let rv = g.constant(r.clone());
        let p = g.mul(v, rv);
        terms.push(g.sum(p));
        readout.push(r);
    }
    let total = g.add_n(&terms);
    g.backward(total);
    let grads: Vec<(mpmae::nn::ParamId, Tensor)> = g.param_grads().into_iter().map(|(id, t)| (id, t.clone())).collect();

    let base = params64(&store);
    let reference = |params: &Params64| -> f64 {
        oracle_encoder64(params, &cfg, &x, Some(&masks))
            .iter()
            .zip(&readout)
            .map(|(a, r)| a.data.iter().zip(r.data()).map(|(u, w)| u * *w as f64).sum::<f64>())
            .sum()
    };
    let weight_ids: Vec<_> = store
        .ids()
        .filter(|&id| store.name(id).starts_with(ENCODER_PREFIX) && store.name(id) != mpmae::model::MASK_TOKEN)
        .collect();
    let mut directions: Vec<Vec<mpmae::nn::ParamId>> = vec![weight_ids];
    for name in [
        "encoder.stem.conv.weight",
        "encoder.stem.down.weight",
        "encoder.stages.0.blocks.0.dw.weight",
        "encoder.stages.1.down.conv.weight",
        "encoder.stages.2.blocks.0.grn.gamma",
        "encoder.stages.3.blocks.0.pw2.weight",
    ] {
        directions.push(vec![store.id(name).unwrap()]);
    }
    let mut worst = 0.0f64;
    for ids in directions {
        let dirs: Vec<Vec<f32>> = ids
            .iter()
            .map(|&id| (0..store.value(id).len()).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let norm = dirs.iter().flatten().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let mut analytic = 0.0f64;
        for (id, d) in ids.iter().zip(&dirs) {
            if let Some((_, gr)) = grads.iter().find(|(g, _)| g == id) {
                analytic += gr.data().iter().zip(d).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() / norm;
            }
        }
        let shifted = |step: f64| {
            let mut s = base.clone();
            for (id, d) in ids.iter().zip(&dirs) {
                for (p, v) in s.get_mut(store.name(*id)).unwrap().iter_mut().zip(d) {
                    *p += step * *v as f64 / norm;
                }
            }
            reference(&s)
        };
        let central = |h: f64| (shifted(h) - shifted(-h)) / (2.0 * h);
        let h = 1e-3;
        let fd = (4.0 * central(h / 2.0) - central(h)) / 3.0;
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}
