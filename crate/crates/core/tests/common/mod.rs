//! Shared helpers for integration tests: an f64 loop-based reference encoder
//! and small synthetic batches.
#![allow(dead_code)]

pub mod checks;

use std::sync::Arc;

use mpmae::masking::{sample_mask, PatchMask};
use mpmae::model::{EncoderConfig, StemKind};
use mpmae::nn::{ParamStore, Tensor};
use mpmae::pretrain::{collate, prepare_sample, Batch, PretrainConfig};
use mpmae::schema::{BandStats, Registry};
use mpmae::synthgen::{compute_band_stats, SampleSource, SplitConfig, SyntheticSource, WorldConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// NHWC activations in f64.
#[derive(Clone, Debug)]
pub struct Act {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn from_tensor(t: &Tensor) -> Self {
        let (n, h, w, c) = t.dims4();
        Act {
            n,
            h,
            w,
            c,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    fn at(&self, n: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[((n * self.h + y) * self.w + x) * self.c + c]
    }
}

/// Encoder parameters widened to f64, keyed by name.
pub type Params64 = std::collections::BTreeMap<String, Vec<f64>>;

pub fn params64(store: &ParamStore) -> Params64 {
    store
        .iter()
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|&v| v as f64).collect()))
        .collect()
}

/// Dense convolution, weight rows ordered `(ky, kx, c_in)`.
fn conv(x: &Act, w: &[f64], b: &[f64], k: usize, stride: usize, pad: usize, c_out: usize) -> Act {
    let ho = (x.h + 2 * pad - k) / stride + 1;
    let wo = (x.w + 2 * pad - k) / stride + 1;
    let mut data = vec![0.0; x.n * ho * wo * c_out];
    for n in 0..x.n {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..c_out {
                    let mut acc = b[co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            for ci in 0..x.c {
                                acc += x.at(n, iy as usize, ix as usize, ci) * w[((ky * k + kx) * x.c + ci) * c_out + co];
                            }
                        }
                    }
                    data[((n * ho + oy) * wo + ox) * c_out + co] = acc;
                }
            }
        }
    }
    Act { n: x.n, h: ho, w: wo, c: c_out, data }
}

/// Depthwise convolution, weight `[k·k, C]`.
fn depthwise(x: &Act, w: &[f64], b: &[f64], k: usize, stride: usize, pad: usize) -> Act {
    let ho = (x.h + 2 * pad - k) / stride + 1;
    let wo = (x.w + 2 * pad - k) / stride + 1;
    let mut data = vec![0.0; x.n * ho * wo * x.c];
    for n in 0..x.n {
        for oy in 0..ho {
            for ox in 0..wo {
                for c in 0..x.c {
                    let mut acc = b[c];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && iy < x.h as isize && ix < x.w as isize {
                                acc += x.at(n, iy as usize, ix as usize, c) * w[(ky * k + kx) * x.c + c];
                            }
                        }
                    }
                    data[((n * ho + oy) * wo + ox) * x.c + c] = acc;
                }
            }
        }
    }
    Act { n: x.n, h: ho, w: wo, c: x.c, data }
}

fn layer_norm(x: &Act, g: &[f64], b: &[f64]) -> Act {
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(x.c) {
        let mean = row.iter().sum::<f64>() / x.c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.c as f64;
        let rs = 1.0 / (var + 1e-6).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rs * g[j] + b[j];
        }
    }
    out
}

fn gelu(x: &Act) -> Act {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        *v = 0.5 * *v * (1.0 + (k * (*v + 0.044715 * *v * *v * *v)).tanh());
    }
    out
}

fn grn(x: &Act, gamma: &[f64], beta: &[f64]) -> Act {
    let hw = x.h * x.w;
    let mut out = x.clone();
    for n in 0..x.n {
        let mut g = vec![0.0f64; x.c];
        for p in 0..hw {
            for (j, gj) in g.iter_mut().enumerate() {
                let v = x.data[(n * hw + p) * x.c + j];
                *gj += v * v;
            }
        }
        let g: Vec<f64> = g.iter().map(|v| v.sqrt()).collect();
        let mean = g.iter().sum::<f64>() / x.c as f64;
        for p in 0..hw {
            for j in 0..x.c {
                let i = (n * hw + p) * x.c + j;
                let v = x.data[i];
                out.data[i] = gamma[j] * (v * g[j] / (mean + 1e-6)) + beta[j] + v;
            }
        }
    }
    out
}

fn add(a: &Act, b: &Act) -> Act {
    let mut out = a.clone();
    for (o, v) in out.data.iter_mut().zip(&b.data) {
        *o += v;
    }
    out
}

/// Visibility of feature cell `(y, x)` at resolution `res` under `mask`.
pub fn visible(mask: &PatchMask, res: usize, y: usize, x: usize) -> bool {
    let side = mask.grid.side();
    !mask.masked[(y * side / res) * side + x * side / res]
}

/// Zero every hidden cell.
fn remask(x: &Act, masks: Option<&[PatchMask]>) -> Act {
    let Some(masks) = masks else { return x.clone() };
    let mut out = x.clone();
    for n in 0..x.n {
        for y in 0..x.h {
            for xx in 0..x.w {
                if !visible(&masks[n], x.h, y, xx) {
                    let i = ((n * x.h + y) * x.w + xx) * x.c;
                    out.data[i..i + x.c].fill(0.0);
                }
            }
        }
    }
    out
}

/// Reference masked encoder: before and after every spatial operator, hidden
/// cells are zero-filled, so each convolution runs densely over a zero-filled
/// map and its output is re-masked. Returns the four stage outputs.
pub fn oracle_encoder(store: &ParamStore, cfg: &EncoderConfig, x: &Tensor, masks: Option<&[PatchMask]>) -> Vec<Act> {
    oracle_encoder64(&params64(store), cfg, x, masks)
}

pub fn oracle_encoder64(params: &Params64, cfg: &EncoderConfig, x: &Tensor, masks: Option<&[PatchMask]>) -> Vec<Act> {
    let p = |n: &str| -> &[f64] {
        let name = format!("encoder.{n}");
        params.get(&name).unwrap_or_else(|| panic!("missing parameter {name}"))
    };
    let w = &cfg.widths;
    let s = cfg.stem_stride();
    let x = remask(&Act::from_tensor(x), masks);
    let mut y = match cfg.stem {
        StemKind::Modified => {
            let f = conv(&x, p("stem.conv.weight"), p("stem.conv.bias"), 3, 1, 1, w[0]);
            let f = remask(&f, masks);
            let d = depthwise(&f, p("stem.down.weight"), p("stem.down.bias"), s, s, 0);
            remask(&layer_norm(&d, p("stem.norm.weight"), p("stem.norm.bias")), masks)
        }
        StemKind::Original => {
            let f = conv(&x, p("stem.conv.weight"), p("stem.conv.bias"), s, s, 0, w[0]);
            remask(&layer_norm(&f, p("stem.norm.weight"), p("stem.norm.bias")), masks)
        }
    };
    let mut outs = Vec::new();
    for i in 0..4 {
        if i > 0 {
            let n = format!("stages.{i}.down");
            let t = layer_norm(&y, p(&format!("{n}.norm.weight")), p(&format!("{n}.norm.bias")));
            let t = conv(&t, p(&format!("{n}.conv.weight")), p(&format!("{n}.conv.bias")), 2, 2, 0, w[i]);
            y = remask(&t, masks);
        }
        for j in 0..cfg.depths[i] {
            let b = |part: &str| p(&format!("stages.{i}.blocks.{j}.{part}"));
            let t = depthwise(&y, b("dw.weight"), b("dw.bias"), 7, 1, 3);
            let t = remask(&t, masks);
            let t = layer_norm(&t, b("norm.weight"), b("norm.bias"));
            let t = conv(&t, b("pw1.weight"), b("pw1.bias"), 1, 1, 0, 4 * w[i]);
            let t = remask(&gelu(&t), masks);
            let t = grn(&t, b("grn.gamma"), b("grn.beta"));
            let t = conv(&t, b("pw2.weight"), b("pw2.bias"), 1, 1, 0, w[i]);
            let t = remask(&t, masks);
            y = add(&y, &t);
        }
        outs.push(y.clone());
    }
    outs
}

/// Overwrite every parameter with N(0, scale²)-ish uniform noise so that no
/// layer is an identity at initialization.
pub fn randomize(store: &mut ParamStore, scale: f32, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let centre = if name.ends_with("norm.weight") { 1.0 } else { 0.0 };
        for v in store.value_mut(id).data_mut() {
            *v = centre + rng.random_range(-scale..scale);
        }
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5f32..1.5)).collect())
}

pub fn random_masks(cfg: &EncoderConfig, n: usize, ratio: f64, rng: &mut impl Rng) -> Vec<PatchMask> {
    let grid = cfg.grid().unwrap();
    (0..n).map(|_| sample_mask(grid, ratio, rng).unwrap()).collect()
}

/// A small generated source plus statistics over its pretraining split.
pub fn small_source(seed: u64, raster: usize, samples: u64) -> (SyntheticSource, BandStats) {
    let src = SyntheticSource::generate(
        &WorldConfig {
            seed,
            world_size: 96,
            raster_size: raster,
            samples_total: samples,
            ..Default::default()
        },
        &SplitConfig::default(),
    )
    .unwrap();
    let stats = compute_band_stats(&src, &src.split("pretrain").unwrap()).unwrap();
    (src, stats)
}

/// First `n` samples of `source` as one masked training batch.
pub fn training_batch(
    source: &SyntheticSource,
    stats: &BandStats,
    config: &PretrainConfig,
    registry: &Registry,
    n: usize,
    seed: u64,
) -> Batch {
    let tasks = mpmae::schema::select_tasks(registry, &config.tasks).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = config.model.encoder.grid().unwrap();
    let crop = config.crop_size;
    let items: Vec<_> = (0..n)
        .map(|i| {
            let mask = Arc::new(sample_mask(grid, config.masking_ratio, &mut rng).unwrap());
            prepare_sample(&source.sample(i).unwrap(), registry, stats, &tasks, (0, 0, crop), Some(mask)).unwrap()
        })
        .collect();
    collate(&items, &tasks).unwrap()
}
