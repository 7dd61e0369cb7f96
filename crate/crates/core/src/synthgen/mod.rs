//! Synthetic multi-modal world, biome-stratified sampling and the dataset container.

pub mod allocation;
pub mod container;
pub mod render;
pub mod stats;
pub mod world;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use allocation::{allocate_stratified, EcoregionArea, StratumAllocation};
pub use container::{read_dataset, write_dataset, Dataset, DatasetManifest, DatasetWriter};
pub use render::{render_sample, GroundTruth, Rendered, SamplePlan};
pub use stats::compute_band_stats;
pub use world::{generate_latent_world, mix_seed, LatentWorld, NoiseScale, WorldConfig};

use crate::error::{Error, Result};
use crate::schema::{build_modality_registry, MultiModalSample, ProductLevel, Registry, RegistryConfig};

/// Anything that can hand out samples by index.
pub trait SampleSource: Send + Sync {
    fn registry(&self) -> &Registry;
    fn len(&self) -> usize;
    fn sample(&self, index: usize) -> Result<MultiModalSample>;
    fn split(&self, name: &str) -> Result<Vec<usize>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cheap product-level lookup when the source knows it without rendering.
    fn product_level(&self, index: usize) -> Option<ProductLevel> {
        self.sample(index).ok().map(|s| s.product_level)
    }
}

pub const SPLIT_NAMES: [&str; 4] = ["pretrain", "train", "val", "test"];

/// Fractions of the samples assigned to each split; must sum to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub pretrain: f64,
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            pretrain: 1.0,
            train: 0.0,
            val: 0.0,
            test: 0.0,
        }
    }
}

impl SplitConfig {
    pub fn downstream() -> Self {
        SplitConfig {
            pretrain: 0.0,
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }

    fn fractions(&self) -> [f64; 4] {
        [self.pretrain, self.train, self.val, self.test]
    }

    /// Shuffle `0..n` with `seed` and cut it at the cumulative fractions.
    pub fn assign(&self, n: usize, seed: u64) -> Result<BTreeMap<String, Vec<usize>>> {
        let f = self.fractions();
        if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {f:?} must be non-negative and sum to 1")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5911)));
        let mut out = BTreeMap::new();
        let mut cum = 0.0;
        let mut start = 0;
        for (name, frac) in SPLIT_NAMES.iter().zip(f) {
            cum += frac;
            let end = ((cum * n as f64).round() as usize).min(n);
            if frac > 0.0 {
                let mut idx = order[start..end].to_vec();
                idx.sort_unstable();
                out.insert(name.to_string(), idx);
            }
            start = end;
        }
        Ok(out)
    }
}

/// Allocate `world.config.samples_total` samples across ecoregions (floor plus
/// residual), draw window centres inside each ecoregion and random months.
pub fn plan_samples(world: &LatentWorld) -> Result<(StratumAllocation, Vec<SamplePlan>)> {
    let cfg = &world.config;
    let mut alloc = allocate_stratified(cfg.samples_total, &world.ecoregion_areas())?;
    alloc.distribute_residual();
    let mut centres: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
    for (y, x) in world.window_centres() {
        centres
            .entry(world.ecoregion[y * world.size() + x] as u32)
            .or_default()
            .push((y, x));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x91a7));
    let half = cfg.raster_size / 2;
    let mut picks = Vec::with_capacity(cfg.samples_total as usize);
    for s in &alloc.strata {
        let pool = &centres[&s.ecoregion];
        for _ in 0..s.samples {
            let (y, x) = pool[rng.random_range(0..pool.len())];
            picks.push((y - half, x - half, rng.random_range(1..=12u32)));
        }
    }
    picks.shuffle(&mut rng);
    let plans = picks
        .into_iter()
        .enumerate()
        .map(|(i, (top, left, month))| SamplePlan {
            sample_id: i as u64,
            top,
            left,
            month,
        })
        .collect();
    Ok((alloc, plans))
}

/// A generated dataset that renders samples on demand instead of holding them.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    pub world: LatentWorld,
    pub plans: Vec<SamplePlan>,
    pub allocation: StratumAllocation,
    pub splits: BTreeMap<String, Vec<usize>>,
    registry: Registry,
}

impl SyntheticSource {
    pub fn generate(config: &WorldConfig, splits: &SplitConfig) -> Result<Self> {
        let world = generate_latent_world(config)?;
        let registry = build_modality_registry(&RegistryConfig {
            ecoregion_classes: config.ecoregion_count,
            raster_size: config.raster_size,
        })?;
        let (allocation, plans) = plan_samples(&world)?;
        let splits = splits.assign(plans.len(), config.seed)?;
        Ok(SyntheticSource {
            world,
            plans,
            allocation,
            splits,
            registry,
        })
    }

    pub fn render(&self, index: usize) -> Result<Rendered> {
        let plan = self
            .plans
            .get(index)
            .ok_or_else(|| Error::invalid(format!("sample index {index} out of range")))?;
        render_sample(&self.world, plan)
    }

    /// Samples per biome after allocation.
    pub fn biome_counts(&self) -> BTreeMap<u32, u64> {
        self.allocation.per_biome()
    }
}

impl SampleSource for SyntheticSource {
    fn registry(&self) -> &Registry {
        &self.registry
    }

    fn len(&self) -> usize {
        self.plans.len()
    }

    fn sample(&self, index: usize) -> Result<MultiModalSample> {
        Ok(self.render(index)?.sample)
    }

    fn split(&self, name: &str) -> Result<Vec<usize>> {
        self.splits
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("dataset has no `{name}` split")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(total: u64) -> WorldConfig {
        WorldConfig {
            seed: 8,
            world_size: 160,
            raster_size: 32,
            samples_total: total,
            ..Default::default()
        }
    }

    #[test]
    fn plans_match_allocation_and_balance_biomes() {
        let src = SyntheticSource::generate(&config(700), &SplitConfig::default()).unwrap();
        assert_eq!(src.len(), 700);
        let per_biome = src.biome_counts();
        assert_eq!(per_biome.len(), 14);
        assert!(per_biome.values().all(|&c| c == 50));
        // window centre really lies in the planned biome
        for i in [0, 13, 699] {
            let s = src.sample(i).unwrap();
            let p = src.plans[i];
            let b = src.world.biome[(p.top + 16) * 160 + p.left + 16];
            assert_eq!(s.stratum_id, b as u32);
        }
    }

    #[test]
    fn single_biome_single_stratum() {
        let src = SyntheticSource::generate(
            &WorldConfig {
                biome_count: 1,
                samples_total: 100,
                ..config(100)
            },
            &SplitConfig::default(),
        )
        .unwrap();
        assert_eq!(src.len(), 100);
        assert_eq!(src.biome_counts().len(), 1);
    }

    #[test]
    fn split_assignment_partitions() {
        let s = SplitConfig::downstream().assign(101, 3).unwrap();
        let mut all: Vec<usize> = s.values().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert_eq!(s["train"].len(), 61);
        assert!(!s.contains_key("pretrain"));
        let bad = SplitConfig {
            pretrain: 0.5,
            ..SplitConfig::downstream()
        };
        assert!(bad.assign(10, 0).is_err());
    }

    #[test]
    fn generation_is_reproducible() {
        let a = SyntheticSource::generate(&config(30), &SplitConfig::default()).unwrap();
        let b = SyntheticSource::generate(&config(30), &SplitConfig::default()).unwrap();
        assert_eq!(a.plans, b.plans);
        assert_eq!(a.world.hash(), b.world.hash());
    }

    /// Multinomial logistic regression on raw optical bands recovers the
    /// landcover label, so the pixel pretext tasks are learnable.
    #[test]
    fn landcover_is_learnable_from_optical_pixels() {
        let src = SyntheticSource::generate(
            &WorldConfig {
                samples_total: 60,
                ..config(60)
            },
            &SplitConfig::default(),
        )
        .unwrap();
        let mut xs: Vec<[f64; 13]> = Vec::new();
        let mut ys: Vec<usize> = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        'outer: for i in 0..src.len() {
            let r = src.render(i).unwrap();
            let s2 = &r.sample.layers[crate::schema::SENTINEL2];
            let dw = &r.sample.layers[crate::schema::DYNAMIC_WORLD];
            let hw = 32 * 32;
            for _ in 0..400 {
                let p = rng.random_range(0..hw);
                if dw[p] == 0.0 || !s2[p].is_finite() {
                    continue;
                }
                let mut x = [1.0; 13];
                for b in 0..12 {
                    x[b] = s2[b * hw + p] as f64 / 3000.0;
                }
                xs.push(x);
                ys.push(dw[p] as usize - 1);
                if xs.len() == 12_000 {
                    break 'outer;
                }
            }
        }
        assert!(xs.len() >= 10_000);
        let (train, test) = xs.split_at(10_000);
        let (ytr, yte) = ys.split_at(10_000);
        let k = world::LANDCOVER_CLASSES;
        let mut w = vec![[0.0f64; 13]; k];
        let lr = 0.5;
        for _ in 0..300 {
            let mut grad = vec![[0.0f64; 13]; k];
            for (x, &y) in train.iter().zip(ytr) {
                let z: Vec<f64> = w.iter().map(|wk| wk.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
                let m = z.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for c in 0..k {
                    let g = e[c] / s - (c == y) as i32 as f64;
                    for j in 0..13 {
                        grad[c][j] += g * x[j];
                    }
                }
            }
            for c in 0..k {
                for j in 0..13 {
                    w[c][j] -= lr * grad[c][j] / train.len() as f64;
                }
            }
        }
        let correct = test
            .iter()
            .zip(yte)
            .filter(|(x, &y)| {
                let z: Vec<f64> = w.iter().map(|wk| wk.iter().zip(x.iter()).map(|(a, b)| a * b).sum()).collect();
                world::argmax(&z) == y
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.8, "accuracy {acc}");
    }
}
