//! Patch grids, random patch masks, patchify/unpatchify and per-patch
//! target normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const PATCH_VAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_size: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn new(image_size: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || image_size == 0 || image_size % patch_size != 0 {
            return Err(Error::invalid(format!(
                "patch size {patch_size} does not divide image size {image_size}"
            )));
        }
        Ok(PatchGrid { image_size, patch_size })
    }

    pub fn side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.side() * self.side()
    }
}

/// `true` marks a masked (hidden) patch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMask {
    pub grid: PatchGrid,
    pub masked: Vec<bool>,
}

/// Masked patch count for a ratio: `floor(ratio·n)`, kept within `1..n`
/// so both sets are non-empty.
pub fn masked_count(ratio: f64, n: usize) -> usize {
    let k = (ratio * n as f64 + 1e-9).floor() as usize;
    k.clamp(1, n.saturating_sub(1).max(1))
}

/// Hide a uniformly random subset of exactly [`masked_count`] patches.
pub fn sample_mask(grid: PatchGrid, ratio: f64, rng: &mut impl Rng) -> Result<PatchMask> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("masking ratio {ratio} outside (0, 1)")));
    }
    let n = grid.num_patches();
    let k = masked_count(ratio, n);
    let mut masked = vec![false; n];
    for i in rand::seq::index::sample(rng, n, k) {
        masked[i] = true;
    }
    Ok(PatchMask { grid, masked })
}

impl PatchMask {
    pub fn all_visible(grid: PatchGrid) -> Self {
        PatchMask {
            grid,
            masked: vec![false; grid.num_patches()],
        }
    }

    pub fn all_masked(grid: PatchGrid) -> Self {
        PatchMask {
            grid,
            masked: vec![true; grid.num_patches()],
        }
    }

    pub fn from_masked(grid: PatchGrid, masked: Vec<bool>) -> Result<Self> {
        if masked.len() != grid.num_patches() {
            return Err(Error::invalid(format!(
                "mask has {} cells, grid has {}",
                masked.len(),
                grid.num_patches()
            )));
        }
        Ok(PatchMask { grid, masked })
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.masked[row * self.grid.side() + col]
    }

    /// Visibility (1 = visible) at a feature resolution `res` that divides
    /// or is divided by the grid side, as `[res·res]`.
    pub fn keep_at(&self, res: usize) -> Vec<f32> {
        let g = self.grid.side();
        let mut out = vec![0f32; res * res];
        for y in 0..res {
            for x in 0..res {
                let (gy, gx) = (y * g / res, x * g / res);
                out[y * res + x] = if self.is_masked(gy, gx) { 0.0 } else { 1.0 };
            }
        }
        out
    }

    /// Pixel-resolution mask (`true` = masked), `[H·W]` row-major.
    pub fn upsample_to_pixels(&self) -> Vec<bool> {
        let s = self.grid.image_size;
        let p = self.grid.patch_size;
        let mut out = vec![false; s * s];
        for y in 0..s {
            for x in 0..s {
                out[y * s + x] = self.is_masked(y / p, x / p);
            }
        }
        out
    }

    /// LSB-first bit packing.
    pub fn to_bits(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.masked.len().div_ceil(8)];
        for (i, &m) in self.masked.iter().enumerate() {
            if m {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_bits(grid: PatchGrid, bytes: &[u8]) -> Result<Self> {
        let n = grid.num_patches();
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::invalid(format!("{} bytes cannot hold a {n}-cell mask", bytes.len())));
        }
        Ok(PatchMask {
            grid,
            masked: (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect(),
        })
    }
}

/// See [`PatchMask::upsample_to_pixels`].
pub fn upsample_mask_to_pixels(mask: &PatchMask) -> Vec<bool> {
    mask.upsample_to_pixels()
}

/// Stack per-sample visibility maps at resolution `res` into `[N, res, res, 1]`.
pub fn keep_tensor(masks: &[&PatchMask], res: usize) -> Tensor {
    let mut data = Vec::with_capacity(masks.len() * res * res);
    for m in masks {
        data.extend(m.keep_at(res));
    }
    Tensor::new(&[masks.len(), res, res, 1], data)
}

fn check_raster(raster: &[f32], channels: usize, grid: &PatchGrid) -> Result<()> {
    let s = grid.image_size;
    if raster.len() != channels * s * s {
        return Err(Error::invalid(format!(
            "raster has {} values, expected {channels}×{s}×{s}",
            raster.len()
        )));
    }
    Ok(())
}

/// `(C, H, W)` → `(num_patches, C·p²)`; patches row-major over the grid and
/// each patch vector ordered `(c, dy, dx)`.
pub fn patchify(raster: &[f32], channels: usize, grid: &PatchGrid) -> Result<Vec<Vec<f32>>> {
    check_raster(raster, channels, grid)?;
    let (s, p, g) = (grid.image_size, grid.patch_size, grid.side());
    let mut out = Vec::with_capacity(grid.num_patches());
    for gy in 0..g {
        for gx in 0..g {
            let mut v = Vec::with_capacity(channels * p * p);
            for c in 0..channels {
                for dy in 0..p {
                    let row = (c * s + gy * p + dy) * s + gx * p;
                    v.extend_from_slice(&raster[row..row + p]);
                }
            }
            out.push(v);
        }
    }
    Ok(out)
}

pub fn unpatchify(patches: &[Vec<f32>], channels: usize, grid: &PatchGrid) -> Result<Vec<f32>> {
    let (s, p, g) = (grid.image_size, grid.patch_size, grid.side());
    if patches.len() != grid.num_patches() || patches.iter().any(|v| v.len() != channels * p * p) {
        return Err(Error::invalid("patch set does not match the grid"));
    }
    let mut out = vec![0f32; channels * s * s];
    for gy in 0..g {
        for gx in 0..g {
            let v = &patches[gy * g + gx];
            for c in 0..channels {
                for dy in 0..p {
                    let row = (c * s + gy * p + dy) * s + gx * p;
                    let src = (c * p + dy) * p;
                    out[row..row + p].copy_from_slice(&v[src..src + p]);
                }
            }
        }
    }
    Ok(out)
}

/// Per patch and channel, shift valid pixels to zero mean and unit variance
/// (variance floored). Invalid pixels (`valid[p] == false` or non-finite) are 0.
pub fn patch_normalize(raster: &[f32], channels: usize, grid: &PatchGrid, valid: Option<&[bool]>) -> Result<Vec<f32>> {
    check_raster(raster, channels, grid)?;
    let (s, p, g) = (grid.image_size, grid.patch_size, grid.side());
    let ok = |c: usize, y: usize, x: usize| {
        valid.is_none_or(|v| v[y * s + x]) && raster[(c * s + y) * s + x].is_finite()
    };
    let mut out = vec![0f32; raster.len()];
    for c in 0..channels {
        for gy in 0..g {
            for gx in 0..g {
                let cells = || (0..p).flat_map(move |dy| (0..p).map(move |dx| (gy * p + dy, gx * p + dx)));
                let mut n = 0.0;
                let mut sum = 0.0;
                for (y, x) in cells().filter(|&(y, x)| ok(c, y, x)) {
                    n += 1.0;
                    sum += raster[(c * s + y) * s + x] as f64;
                }
                if n == 0.0 {
                    continue;
                }
                let mean = sum / n;
                let var = cells()
                    .filter(|&(y, x)| ok(c, y, x))
                    .map(|(y, x)| (raster[(c * s + y) * s + x] as f64 - mean).powi(2))
                    .sum::<f64>()
                    / n;
                let sd = var.max(PATCH_VAR_FLOOR).sqrt();
                for (y, x) in cells().filter(|&(y, x)| ok(c, y, x)) {
                    let i = (c * s + y) * s + x;
                    out[i] = ((raster[i] as f64 - mean) / sd) as f32;
                }
            }
        }
    }
    Ok(out)
}
