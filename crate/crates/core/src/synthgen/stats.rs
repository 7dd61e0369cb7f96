use std::collections::BTreeMap;

use super::SampleSource;
use crate::error::{Error, Result};
use crate::schema::{BandStat, BandStats, ProductLevel, SCHEMA_VERSION, SENTINEL2, STD_FLOOR};

/// Running count/mean/M2, merged chunk-wise (Chan et al. parallel update).
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn absorb(&mut self, values: &[f32]) {
        let mut n = 0.0;
        let mut sum = 0.0;
        for &v in values.iter().filter(|v| v.is_finite()) {
            n += 1.0;
            sum += v as f64;
        }
        if n == 0.0 {
            return;
        }
        let mean = sum / n;
        let m2: f64 = values
            .iter()
            .filter(|v| v.is_finite())
            .map(|&v| (v as f64 - mean).powi(2))
            .sum();
        let total = self.n + n;
        let delta = mean - self.mean;
        self.mean += delta * n / total;
        self.m2 += m2 + delta * delta * self.n * n / total;
        self.n = total;
    }

    fn finish(&self, label: &str, warnings: &mut Vec<String>) -> BandStat {
        let var = if self.n > 0.0 { self.m2 / self.n } else { 0.0 };
        let mut std = var.sqrt();
        if !(std > STD_FLOOR) {
            warnings.push(format!("{label}: variance {var:e} floored (std {STD_FLOOR:e})"));
            std = STD_FLOOR;
        }
        BandStat { mean: self.mean, std }
    }
}

/// Per-band mean and population standard deviation over `indices`, optical
/// bands split by product level, missing values skipped.
pub fn compute_band_stats(source: &dyn SampleSource, indices: &[usize]) -> Result<BandStats> {
    if indices.is_empty() {
        return Err(Error::invalid("cannot compute statistics over an empty split"));
    }
    let registry = source.registry().clone();
    let specs: Vec<_> = registry.iter().filter(|m| m.is_standardized()).cloned().collect();
    let mut optical: BTreeMap<ProductLevel, Vec<Moments>> = BTreeMap::new();
    let mut bands: BTreeMap<String, Vec<Moments>> = BTreeMap::new();
    for &i in indices {
        let s = source.sample(i)?;
        for spec in &specs {
            let data = s.layer(&spec.name)?;
            let per = data.len() / spec.band_count;
            let acc = if spec.name == SENTINEL2 {
                optical
                    .entry(s.product_level)
                    .or_insert_with(|| vec![Moments::default(); spec.band_count])
            } else {
                bands
                    .entry(spec.name.clone())
                    .or_insert_with(|| vec![Moments::default(); spec.band_count])
            };
            for (b, m) in acc.iter_mut().enumerate() {
                m.absorb(&data[b * per..(b + 1) * per]);
            }
        }
    }
    let mut warnings = Vec::new();
    let mut out = BandStats {
        schema_version: SCHEMA_VERSION,
        ..Default::default()
    };
    for (level, ms) in &optical {
        let v = ms
            .iter()
            .enumerate()
            .map(|(b, m)| m.finish(&format!("{SENTINEL2}[{level}] band {b}"), &mut warnings))
            .collect();
        out.optical.insert(*level, v);
    }
    // a split drawn entirely from one product level borrows its stats for the other
    for (have, missing) in [(ProductLevel::L1C, ProductLevel::L2A), (ProductLevel::L2A, ProductLevel::L1C)] {
        if !out.optical.contains_key(&missing) {
            if let Some(v) = out.optical.get(&have).cloned() {
                warnings.push(format!("{SENTINEL2}: no {missing} samples in split; reusing {have} statistics"));
                out.optical.insert(missing, v);
            }
        }
    }
    for (name, ms) in &bands {
        let v = ms
            .iter()
            .enumerate()
            .map(|(b, m)| m.finish(&format!("{name} band {b}"), &mut warnings))
            .collect();
        out.bands.insert(name.clone(), v);
    }
    out.warnings = warnings;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{standardize_sample, MultiModalSample, Registry};
    use crate::synthgen::world::WorldConfig;
    use crate::synthgen::{SplitConfig, SyntheticSource};

    struct Fixed {
        registry: Registry,
        samples: Vec<MultiModalSample>,
    }

    impl SampleSource for Fixed {
        fn registry(&self) -> &Registry {
            &self.registry
        }
        fn len(&self) -> usize {
            self.samples.len()
        }
        fn sample(&self, i: usize) -> Result<MultiModalSample> {
            Ok(self.samples[i].clone())
        }
        fn split(&self, _: &str) -> Result<Vec<usize>> {
            Ok((0..self.samples.len()).collect())
        }
    }

    fn synthetic() -> SyntheticSource {
        SyntheticSource::generate(
            &WorldConfig {
                seed: 21,
                world_size: 96,
                raster_size: 16,
                samples_total: 24,
                ..Default::default()
            },
            &SplitConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn constant_band_is_floored_and_pair_band_is_exact() {
        let src = synthetic();
        let mut a = src.sample(0).unwrap();
        let mut b = src.sample(1).unwrap();
        b.product_level = a.product_level;
        let s1a = a.layers.get_mut("sentinel1").unwrap();
        s1a[..256].iter_mut().for_each(|v| *v = 0.0);
        s1a[256..512].iter_mut().for_each(|v| *v = 4.5);
        let s1b = b.layers.get_mut("sentinel1").unwrap();
        s1b[..256].iter_mut().for_each(|v| *v = 2.0);
        s1b[256..512].iter_mut().for_each(|v| *v = 4.5);
        let fixed = Fixed {
            registry: src.registry().clone(),
            samples: vec![a, b],
        };
        let st = compute_band_stats(&fixed, &[0, 1]).unwrap();
        let s1 = &st.bands["sentinel1"];
        assert_eq!((s1[0].mean, s1[0].std), (1.0, 1.0));
        assert_eq!((s1[1].mean, s1[1].std), (4.5, STD_FLOOR));
        assert!(st.warnings.iter().any(|w| w.contains("sentinel1 band 1")));
    }

    #[test]
    fn missing_pixels_are_skipped() {
        let src = synthetic();
        let st = compute_band_stats(&src, &(0..24).collect::<Vec<_>>()).unwrap();
        for v in st.optical.values().flatten() {
            assert!(v.mean.is_finite() && v.std > 1.0);
        }
    }

    #[test]
    fn standardized_data_has_unit_moments() {
        let src = synthetic();
        let idx: Vec<usize> = (0..24).collect();
        let st = compute_band_stats(&src, &idx).unwrap();
        let reg = src.registry().clone();
        let samples = idx
            .iter()
            .map(|&i| {
                let s = src.sample(i).unwrap();
                let mut z = standardize_sample(&s, &st, &reg).unwrap();
                // keep missing pixels missing so they stay out of the moments
                for (k, v) in z.layers.iter_mut() {
                    for (o, r) in v.iter_mut().zip(&s.layers[k]) {
                        if !r.is_finite() {
                            *o = f32::NAN;
                        }
                    }
                }
                z
            })
            .collect();
        let fixed = Fixed { registry: reg, samples };
        let again = compute_band_stats(&fixed, &idx).unwrap();
        for v in again.optical.values().flatten().chain(again.bands.values().flatten()) {
            assert!(v.mean.abs() < 1e-3, "{v:?}");
            assert!((v.std - 1.0).abs() < 1e-3, "{v:?}");
        }
    }

    #[test]
    fn empty_split_rejected() {
        assert!(compute_band_stats(&synthetic(), &[]).is_err());
    }
}
