use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::allocation::EcoregionArea;
use crate::error::{Error, Result};

/// Landcover classes behind the dynamic-world layer (stored as index + 1).
pub const LANDCOVER_CLASSES: usize = 9;
pub const WORLDCOVER_CLASSES: usize = 11;
/// Upper bound on biome labels imposed by the registry.
pub const MAX_BIOMES: u32 = 14;

/// Per-modality observation noise (standard deviations in native units).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseScale {
    /// Reflectance units.
    pub sentinel2: f64,
    /// dB.
    pub sentinel1: f64,
    /// Metres of elevation.
    pub aster: f64,
    /// Metres of canopy height.
    pub canopy_height: f64,
    /// Degrees Celsius; precipitation gets a tenth of this as log-noise.
    pub climate: f64,
}

impl Default for NoiseScale {
    fn default() -> Self {
        NoiseScale {
            sentinel2: 0.01,
            sentinel1: 0.8,
            aster: 2.0,
            canopy_height: 0.5,
            climate: 0.3,
        }
    }
}

impl NoiseScale {
    fn values(&self) -> [f64; 5] {
        [self.sentinel2, self.sentinel1, self.aster, self.canopy_height, self.climate]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub raster_size: usize,
    /// Side of the square world the windows are cut from.
    pub world_size: usize,
    pub num_latent_fields: usize,
    /// Gaussian blur sigma in pixels for the latent fields.
    pub smoothness: f64,
    pub noise_scale: NoiseScale,
    pub biome_count: u32,
    pub ecoregion_count: u32,
    pub samples_total: u64,
    /// Fraction of optical pixels marked missing.
    pub missing_fraction: f64,
    /// Fraction of dynamic-world pixels labelled no-data.
    pub nodata_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            raster_size: 64,
            world_size: 512,
            num_latent_fields: 4,
            smoothness: 6.0,
            noise_scale: NoiseScale::default(),
            biome_count: 14,
            ecoregion_count: 16,
            samples_total: 4096,
            missing_fraction: 0.02,
            nodata_fraction: 0.01,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.raster_size < 16 {
            return fail(format!("raster_size {} < 16", self.raster_size));
        }
        if self.world_size < self.raster_size + 1 {
            return fail(format!(
                "world_size {} must exceed raster_size {}",
                self.world_size, self.raster_size
            ));
        }
        if self.num_latent_fields < 4 {
            return fail(format!("num_latent_fields {} < 4", self.num_latent_fields));
        }
        if !(self.smoothness.is_finite() && self.smoothness > 0.0) {
            return fail(format!("smoothness {} must be positive", self.smoothness));
        }
        if self.noise_scale.values().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return fail("noise_scale entries must be finite and >= 0".into());
        }
        if self.biome_count < 1 || self.biome_count > MAX_BIOMES {
            return fail(format!("biome_count {} outside 1..={MAX_BIOMES}", self.biome_count));
        }
        if self.ecoregion_count < self.biome_count {
            return fail(format!(
                "ecoregion_count {} < biome_count {}",
                self.ecoregion_count, self.biome_count
            ));
        }
        if self.samples_total == 0 {
            return fail("samples_total must be positive".into());
        }
        for (name, f) in [("missing_fraction", self.missing_fraction), ("nodata_fraction", self.nodata_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return fail(format!("{name} {f} outside [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Splitmix64 finalizer; used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_LATENT: u64 = 1;
const STREAM_BIOME: u64 = 2;
const STREAM_ECO: u64 = 3;
const STREAM_MIX: u64 = 4;

/// Affine map from latents to class scores: `scores[k] = bias[k] + Σ_j weight[k][j]·latent[j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMixture {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl ClassMixture {
    fn random(classes: usize, latents: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = (0..classes)
            .map(|_| (0..latents).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let bias = (0..classes).map(|_| { let v: f64 = StandardNormal.sample(rng); 0.3 * v }).collect();
        ClassMixture { weight, bias }
    }

    pub fn scores(&self, latent: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.bias[k] + self.weight[k].iter().zip(latent).map(|(w, l)| w * l).sum::<f64>();
        }
    }

    pub fn argmax(&self, latent: &[f64]) -> usize {
        let mut s = vec![0.0; self.bias.len()];
        self.scores(latent, &mut s);
        argmax(&s)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// The smooth synthetic planet every sample is cut from.
#[derive(Clone, Debug)]
pub struct LatentWorld {
    pub config: WorldConfig,
    /// `[num_latent_fields, size, size]`, each field zero mean, unit variance.
    pub latents: Vec<f32>,
    pub biome: Vec<u16>,
    pub ecoregion: Vec<u16>,
    /// Parent biome of every ecoregion id.
    pub ecoregion_biome: Vec<u32>,
    /// Terrain elevation in metres.
    pub elevation: Vec<f32>,
    /// Terrain slope in degrees.
    pub slope: Vec<f32>,
    /// Signed east-west elevation gradient (metres per pixel).
    pub gradient_x: Vec<f32>,
    pub landcover_mix: ClassMixture,
    pub worldcover_mix: ClassMixture,
}

impl LatentWorld {
    pub fn size(&self) -> usize {
        self.config.world_size
    }

    pub fn latent(&self, field: usize, y: usize, x: usize) -> f32 {
        let s = self.size();
        self.latents[(field * s + y) * s + x]
    }

    pub fn latent_vector(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.config.num_latent_fields)
            .map(|f| self.latent(f, y, x) as f64)
            .collect()
    }

    /// SHA-256 over every generated array, for determinism checks.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.latents.iter().chain(&self.elevation).chain(&self.slope) {
            h.update(v.to_le_bytes());
        }
        for v in self.biome.iter().chain(&self.ecoregion) {
            h.update(v.to_le_bytes());
        }
        crate::nn::params::hex(&h.finalize())
    }

    /// Number of valid window centres per ecoregion, with its parent biome.
    pub fn ecoregion_areas(&self) -> BTreeMap<u32, EcoregionArea> {
        let mut areas: BTreeMap<u32, EcoregionArea> = BTreeMap::new();
        for (y, x) in self.window_centres() {
            let e = self.ecoregion[y * self.size() + x] as u32;
            areas
                .entry(e)
                .or_insert(EcoregionArea {
                    area: 0.0,
                    biome: self.ecoregion_biome[e as usize],
                })
                .area += 1.0;
        }
        areas
    }

    /// Pixels that can be the centre of a full raster window.
    pub fn window_centres(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let r = self.config.raster_size;
        let span = self.size() - r + 1;
        (0..span).flat_map(move |t| (0..span).map(move |l| (t + r / 2, l + r / 2)))
    }

    pub fn biome_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.config.biome_count as usize];
        for &b in &self.biome {
            h[b as usize] += 1;
        }
        h
    }

    /// Latitude in degrees of a world row (north at row 0).
    pub fn latitude(&self, y: f64) -> f64 {
        75.0 - 150.0 * (y + 0.5) / self.size() as f64
    }

    pub fn longitude(&self, x: f64) -> f64 {
        -180.0 + 360.0 * (x + 0.5) / self.size() as f64
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with wrap-around boundaries.
fn blur_torus(field: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let n = size as i64;
    let mut tmp = vec![0.0; field.len()];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (i, w) in k.iter().enumerate() {
                let xx = (x as i64 + i as i64 - r).rem_euclid(n) as usize;
                acc += w * field[y * size + xx];
            }
            tmp[y * size + x] = acc;
        }
    }
    let mut out = vec![0.0; field.len()];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (i, w) in k.iter().enumerate() {
                let yy = (y as i64 + i as i64 - r).rem_euclid(n) as usize;
                acc += w * tmp[yy * size + x];
            }
            out[y * size + x] = acc;
        }
    }
    out
}

fn normalize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x = (*x - mean) / std);
}

fn smooth_noise(size: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..size * size).map(|_| StandardNormal.sample(rng)).collect();
    let mut f = blur_torus(&white, size, sigma);
    normalize(&mut f);
    f
}

/// Assign each value to one of `bins` equal-count bins by rank.
fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out = vec![0; values.len()];
    let n = values.len();
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * bins / n;
    }
    out
}

pub fn generate_latent_world(config: &WorldConfig) -> Result<LatentWorld> {
    config.validate()?;
    let size = config.world_size;
    let nl = config.num_latent_fields;

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, STREAM_LATENT));
    let mut latents64 = Vec::with_capacity(nl * size * size);
    let mut fields = Vec::with_capacity(nl);
    for _ in 0..nl {
        let f = smooth_noise(size, config.smoothness, &mut rng);
        latents64.extend_from_slice(&f);
        fields.push(f);
    }

    // Biomes: quantile bins of a broad field that leans on the moisture latent.
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, STREAM_BIOME));
    let own = smooth_noise(size, 4.0 * config.smoothness, &mut rng);
    let moist = blur_torus(&fields[1], size, 2.0 * config.smoothness);
    let biome_field: Vec<f64> = own.iter().zip(&moist).map(|(a, b)| 0.6 * a + b).collect();
    let biome: Vec<usize> = quantile_bins(&biome_field, config.biome_count as usize);

    // Ecoregions: split each biome by uneven quantiles of a second field.
    let b_count = config.biome_count as usize;
    let k = config.ecoregion_count as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, STREAM_ECO));
    let eco_field = smooth_noise(size, 2.0 * config.smoothness, &mut rng);
    let mut ecoregion_biome = Vec::with_capacity(k);
    let mut first_id = Vec::with_capacity(b_count);
    for b in 0..b_count {
        let n_sub = k / b_count + usize::from(b < k % b_count);
        first_id.push(ecoregion_biome.len());
        ecoregion_biome.extend(std::iter::repeat_n(b as u32, n_sub));
    }
    let mut ecoregion = vec![0u16; size * size];
    for b in 0..b_count {
        let n_sub = k / b_count + usize::from(b < k % b_count);
        let members: Vec<usize> = (0..size * size).filter(|&i| biome[i] == b).collect();
        // uneven cut points so ecoregion areas differ within a biome
        let weights: Vec<f64> = (0..n_sub).map(|_| rng.random_range(0.5..2.0)).collect();
        let total: f64 = weights.iter().sum();
        let mut cuts = Vec::with_capacity(n_sub);
        let mut acc = 0.0;
        for w in &weights {
            acc += w / total;
            cuts.push(acc);
        }
        let mut order = members.clone();
        order.sort_by(|&a, &c| eco_field[a].total_cmp(&eco_field[c]).then(a.cmp(&c)));
        let m = order.len().max(1) as f64;
        for (rank, &i) in order.iter().enumerate() {
            let q = (rank as f64 + 0.5) / m;
            let sub = cuts.iter().position(|&c| q < c).unwrap_or(n_sub - 1);
            ecoregion[i] = (first_id[b] + sub) as u16;
        }
    }

    // Terrain from latent 0.
    let elevation: Vec<f64> = fields[0].iter().map(|v| 1000.0 + 500.0 * v).collect();
    let mut slope = vec![0f32; size * size];
    let mut gradient_x = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let at = |yy: usize, xx: usize| elevation[yy * size + xx];
            let gx = (at(y, (x + 1) % size) - at(y, (x + size - 1) % size)) / 2.0;
            let gy = (at((y + 1) % size, x) - at((y + size - 1) % size, x)) / 2.0;
            let mag = (gx * gx + gy * gy).sqrt();
            slope[y * size + x] = (mag / 30.0).atan().to_degrees() as f32;
            gradient_x[y * size + x] = gx as f32;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, STREAM_MIX));
    let landcover_mix = ClassMixture::random(LANDCOVER_CLASSES, nl, &mut rng);
    let worldcover_mix = ClassMixture::random(WORLDCOVER_CLASSES, nl, &mut rng);

    let world = LatentWorld {
        config: config.clone(),
        latents: latents64.iter().map(|&v| v as f32).collect(),
        biome: biome.iter().map(|&b| b as u16).collect(),
        ecoregion,
        ecoregion_biome,
        elevation: elevation.iter().map(|&v| v as f32).collect(),
        slope,
        gradient_x,
        landcover_mix,
        worldcover_mix,
    };
    if world.latents.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvariantViolation("non-finite latent field".into()));
    }
    if world.biome_histogram().contains(&0) {
        return Err(Error::InvariantViolation("empty biome region".into()));
    }
    Ok(world)
}
