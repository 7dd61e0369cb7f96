use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Area of one ecoregion and the biome it belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EcoregionArea {
    pub area: f64,
    pub biome: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub ecoregion: u32,
    pub biome: u32,
    /// `A_e`
    pub area: f64,
    /// `A_B(e)`
    pub biome_area: f64,
    /// `N_e = floor(N_t / B · A_e / A_B)`
    pub samples: u64,
    /// Fractional part dropped by the floor.
    pub remainder: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumAllocation {
    pub total_requested: u64,
    pub biome_count: u32,
    pub strata: Vec<Stratum>,
}

impl StratumAllocation {
    pub fn allocated(&self) -> u64 {
        self.strata.iter().map(|s| s.samples).sum()
    }

    pub fn per_biome(&self) -> BTreeMap<u32, u64> {
        let mut out = BTreeMap::new();
        for s in &self.strata {
            *out.entry(s.biome).or_insert(0) += s.samples;
        }
        out
    }

    pub fn samples_for(&self, ecoregion: u32) -> Option<u64> {
        self.strata.iter().find(|s| s.ecoregion == ecoregion).map(|s| s.samples)
    }

    /// Hand the `N_t − Σ N_e` samples lost to flooring out one per ecoregion,
    /// in descending order of the dropped fraction (ties by ecoregion id).
    pub fn distribute_residual(&mut self) {
        let residual = self.total_requested.saturating_sub(self.allocated()) as usize;
        let mut order: Vec<usize> = (0..self.strata.len()).collect();
        order.sort_by(|&a, &b| {
            self.strata[b]
                .remainder
                .total_cmp(&self.strata[a].remainder)
                .then(self.strata[a].ecoregion.cmp(&self.strata[b].ecoregion))
        });
        for &i in order.iter().take(residual) {
            self.strata[i].samples += 1;
            self.strata[i].remainder = 0.0;
        }
    }
}

/// Allocate `N_t` samples across ecoregions so that every biome receives
/// `N_t / B` samples regardless of its area, spread within the biome in
/// proportion to ecoregion area. `B` is the number of distinct biomes.
pub fn allocate_stratified(total: u64, areas: &BTreeMap<u32, EcoregionArea>) -> Result<StratumAllocation> {
    if total == 0 {
        return Err(Error::invalid("total sample count must be positive"));
    }
    if areas.is_empty() {
        return Err(Error::invalid("empty ecoregion area map"));
    }
    let mut biome_area: BTreeMap<u32, f64> = BTreeMap::new();
    for (e, a) in areas {
        if !(a.area.is_finite() && a.area > 0.0) {
            return Err(Error::invalid(format!("ecoregion {e} has non-positive area {}", a.area)));
        }
        *biome_area.entry(a.biome).or_insert(0.0) += a.area;
    }
    let biome_count = biome_area.len() as u32;
    let per_biome = total as f64 / biome_count as f64;
    let strata = areas
        .iter()
        .map(|(&e, a)| {
            let ab = biome_area[&a.biome];
            let exact = per_biome * (a.area / ab);
            // an exactly integral share must not floor to one less
            let samples = (exact * (1.0 + 1e-12)).floor();
            Stratum {
                ecoregion: e,
                biome: a.biome,
                area: a.area,
                biome_area: ab,
                samples: samples as u64,
                remainder: (exact - samples).max(0.0),
            }
        })
        .collect();
    Ok(StratumAllocation {
        total_requested: total,
        biome_count,
        strata,
    })
}
