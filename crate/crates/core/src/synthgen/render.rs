use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::world::{argmax, mix_seed, LatentWorld, LANDCOVER_CLASSES, WORLDCOVER_CLASSES};
use crate::error::{Error, Result};
use crate::schema::{self, MultiModalSample, ProductLevel};

/// Mean surface reflectance per landcover class for B1..B12 without B10.
/// Class order: water, trees, grass, flooded vegetation, crops, shrub and
/// scrub, built, bare, snow and ice.
pub const SIGNATURES: [[f64; 12]; LANDCOVER_CLASSES] = [
    [0.06, 0.07, 0.06, 0.04, 0.03, 0.02, 0.02, 0.02, 0.015, 0.01, 0.01, 0.008],
    [0.02, 0.03, 0.05, 0.03, 0.09, 0.25, 0.30, 0.32, 0.33, 0.30, 0.15, 0.07],
    [0.04, 0.05, 0.09, 0.07, 0.14, 0.28, 0.33, 0.35, 0.36, 0.30, 0.27, 0.16],
    [0.04, 0.05, 0.07, 0.05, 0.08, 0.15, 0.18, 0.19, 0.19, 0.16, 0.09, 0.05],
    [0.05, 0.07, 0.11, 0.12, 0.16, 0.22, 0.25, 0.27, 0.28, 0.26, 0.30, 0.22],
    [0.05, 0.06, 0.09, 0.10, 0.14, 0.19, 0.21, 0.22, 0.23, 0.21, 0.28, 0.20],
    [0.12, 0.13, 0.14, 0.16, 0.17, 0.18, 0.19, 0.20, 0.20, 0.19, 0.24, 0.22],
    [0.14, 0.17, 0.23, 0.29, 0.31, 0.32, 0.33, 0.34, 0.35, 0.33, 0.40, 0.36],
    [0.80, 0.82, 0.80, 0.78, 0.75, 0.70, 0.66, 0.63, 0.60, 0.35, 0.05, 0.04],
];

const VEGETATION: [bool; LANDCOVER_CLASSES] = [false, true, true, true, true, true, false, false, false];

/// Backscatter in dB per landcover class for VV, VH, HV, HH.
const BACKSCATTER: [[f64; 4]; LANDCOVER_CLASSES] = [
    [-20.0, -27.0, -27.5, -19.0],
    [-7.0, -13.0, -13.5, -6.0],
    [-10.0, -17.0, -17.5, -9.0],
    [-8.0, -16.0, -16.5, -4.0],
    [-9.0, -15.0, -15.5, -8.0],
    [-9.5, -16.0, -16.5, -8.5],
    [-2.0, -10.0, -10.5, 0.0],
    [-13.0, -22.0, -22.5, -12.0],
    [-15.0, -21.0, -21.5, -14.0],
];

/// Digital numbers per unit reflectance.
pub const REFLECTANCE_SCALE: f64 = 10_000.0;

/// Where and when a sample is cut from the world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub sample_id: u64,
    pub top: usize,
    pub left: usize,
    /// 1..=12
    pub month: u32,
}

/// Generator-side truth kept next to a rendered sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Landcover class (0..9) per pixel, before no-data marking.
    pub landcover: Vec<u8>,
    /// `[9, H, W]` mixture scores whose argmax is the landcover class.
    pub landcover_scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub sample: MultiModalSample,
    pub truth: GroundTruth,
}

fn sample_seed(world_seed: u64, sample_id: u64) -> u64 {
    mix_seed(mix_seed(world_seed, 0x5a4d_504c_45), sample_id)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Additive haze of top-of-atmosphere products, in reflectance.
pub fn l1c_offset(band: usize) -> f64 {
    0.02 + 0.03 * (1.0 - band as f64 / 11.0)
}

/// Seasonal phase in [-1, 1]: +1 at the local summer peak.
fn season(month: u32, latitude: f64) -> f64 {
    let peak = if latitude >= 0.0 { 7.0 } else { 1.0 };
    (2.0 * PI * (month as f64 - peak) / 12.0).cos()
}

/// Render one sample. Everything random derives from `(world seed, sample_id)`.
pub fn render_sample(world: &LatentWorld, plan: &SamplePlan) -> Result<Rendered> {
    let cfg = &world.config;
    let r = cfg.raster_size;
    let ws = world.size();
    if plan.top + r > ws || plan.left + r > ws {
        return Err(Error::invalid(format!(
            "window {r}@({},{}) exceeds world of side {ws}",
            plan.top, plan.left
        )));
    }
    let month_vec = schema::encode_month(plan.month)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, plan.sample_id));
    let product_level = if rng.random_bool(0.5) {
        ProductLevel::L2A
    } else {
        ProductLevel::L1C
    };
    let noise = &cfg.noise_scale;
    let gauss = |sd: f64| Normal::new(0.0, sd).unwrap();
    let n_s2 = gauss(noise.sentinel2);
    let n_s1 = gauss(noise.sentinel1);
    let n_aster = gauss(noise.aster);
    let n_canopy = gauss(noise.canopy_height);
    let n_clim = gauss(noise.climate);

    let (cy, cx) = (plan.top + r / 2, plan.left + r / 2);
    let lat = world.latitude(cy as f64);
    let lon = world.longitude(cx as f64);
    let phase = season(plan.month, lat);

    let hw = r * r;
    let mut s2 = vec![0f32; 12 * hw];
    let mut s1 = vec![0f32; 8 * hw];
    let mut aster = vec![0f32; 2 * hw];
    let mut canopy = vec![0f32; 2 * hw];
    let mut dw = vec![0f32; hw];
    let mut esa = vec![0f32; hw];
    let mut landcover = vec![0u8; hw];
    let mut landcover_scores = vec![0f64; LANDCOVER_CLASSES * hw];
    let mut scores = [0f64; LANDCOVER_CLASSES];
    let mut wc_scores = [0f64; WORLDCOVER_CLASSES];

    for y in 0..r {
        for x in 0..r {
            let p = y * r + x;
            let (wy, wx) = (plan.top + y, plan.left + x);
            let wi = wy * ws + wx;
            let lat_vec = world.latent_vector(wy, wx);
            world.landcover_mix.scores(&lat_vec, &mut scores);
            let class = argmax(&scores);
            for k in 0..LANDCOVER_CLASSES {
                landcover_scores[k * hw + p] = scores[k];
            }
            landcover[p] = class as u8;
            dw[p] = if rng.random_bool(cfg.nodata_fraction) {
                schema::DYNAMIC_WORLD_NO_DATA as f32
            } else {
                (class + 1) as f32
            };
            world.worldcover_mix.scores(&lat_vec, &mut wc_scores);
            esa[p] = argmax(&wc_scores) as f32;

            // optical
            let brightness = 1.0 + 0.08 * lat_vec[2];
            let missing = rng.random_bool(cfg.missing_fraction);
            for b in 0..12 {
                let mut v = SIGNATURES[class][b] * brightness;
                if VEGETATION[class] && (4..=8).contains(&b) {
                    v *= 1.0 + 0.2 * phase;
                } else {
                    v += 0.01 * phase;
                }
                if product_level == ProductLevel::L1C {
                    v += l1c_offset(b);
                }
                v += n_s2.sample(&mut rng);
                s2[b * hw + p] = if missing {
                    f32::NAN
                } else {
                    (v * REFLECTANCE_SCALE) as f32
                };
            }

            // radar
            let slope = world.slope[wi] as f64;
            let aspect = 2.0 * (world.gradient_x[wi] as f64 / 5.0).tanh();
            let terrain = 3.0 * (slope / 20.0).tanh();
            let moisture = 1.5 * lat_vec[1].tanh();
            for pol in 0..4 {
                let base = BACKSCATTER[class][pol] + terrain + if pol == 0 { moisture } else { 0.5 * moisture };
                s1[pol * hw + p] = (base + aspect + n_s1.sample(&mut rng)) as f32;
                s1[(4 + pol) * hw + p] = (base - aspect + n_s1.sample(&mut rng)) as f32;
            }

            // terrain
            aster[p] = (world.elevation[wi] as f64 + n_aster.sample(&mut rng)) as f32;
            aster[hw + p] = (slope + 0.1 * n_aster.sample(&mut rng)).max(0.0) as f32;

            // canopy
            let h = match class {
                1 => 8.0 + 20.0 * sigmoid(0.8 * lat_vec[0] + 0.6 * lat_vec[1]),
                5 => 1.0 + 3.0 * sigmoid(lat_vec[1]),
                3 => 1.0 + sigmoid(lat_vec[1]),
                _ => 0.0,
            };
            let h = if h > 0.0 { (h + n_canopy.sample(&mut rng)).max(0.0) } else { 0.0 };
            canopy[p] = h as f32;
            canopy[hw + p] = (0.5 + 0.1 * h) as f32;
        }
    }

    // climate at the window centre
    let latc = world.latent(3, cy, cx) as f64;
    let elev_c = world.elevation[cy * ws + cx] as f64;
    let t_year = 27.0 - 0.5 * lat.abs() - 0.0065 * (elev_c - 1000.0) + 1.5 * latc;
    let amp = 1.0 + 0.3 * lat.abs();
    let spread = 6.0 + 0.05 * lat.abs();
    let prev = if plan.month == 1 { 12 } else { plan.month - 1 };
    let t_month = |m: u32| t_year + amp * season(m, lat);
    let mut temps = [
        t_year,
        t_year - amp - 4.0,
        t_year + amp + 4.0,
        t_month(plan.month),
        t_month(plan.month) - spread,
        t_month(plan.month) + spread,
        t_month(prev),
        t_month(prev) - spread,
        t_month(prev) + spread,
    ];
    for t in &mut temps {
        *t += n_clim.sample(&mut rng);
    }
    let moist_c = world.latent(1, cy, cx) as f64;
    let p_year = 1500.0 * (0.6 * moist_c - lat.abs() / 50.0).exp();
    let p_month = |m: u32| p_year / 12.0 * (1.0 + 0.6 * season(m, lat));
    let mut precip = [p_year, p_month(plan.month), p_month(prev)];
    for p in &mut precip {
        *p *= (0.1 * n_clim.sample(&mut rng)).exp();
    }

    let geo = schema::encode_geolocation(lat, lon)?;
    let biome = world.biome[cy * ws + cx];
    let ecoregion = world.ecoregion[cy * ws + cx];

    let mut layers = BTreeMap::new();
    layers.insert(schema::SENTINEL2.to_string(), s2);
    layers.insert(schema::SENTINEL1.to_string(), s1);
    layers.insert(schema::ASTER.to_string(), aster);
    layers.insert(schema::CANOPY_HEIGHT.to_string(), canopy);
    layers.insert(schema::DYNAMIC_WORLD.to_string(), dw);
    layers.insert(schema::ESA_WORLDCOVER.to_string(), esa);
    layers.insert(schema::BIOME.to_string(), vec![biome as f32]);
    layers.insert(schema::ECOREGION.to_string(), vec![ecoregion as f32]);
    layers.insert(schema::ERA5_TEMPERATURE.to_string(), temps.iter().map(|&v| v as f32).collect());
    layers.insert(schema::ERA5_PRECIPITATION.to_string(), precip.iter().map(|&v| v as f32).collect());
    layers.insert(schema::GEOLOCATION.to_string(), geo.iter().map(|&v| v as f32).collect());
    layers.insert(schema::DATE.to_string(), month_vec.iter().map(|&v| v as f32).collect());

    Ok(Rendered {
        sample: MultiModalSample {
            sample_id: plan.sample_id,
            stratum_id: biome as u32,
            product_level,
            size: r,
            layers,
        },
        truth: GroundTruth {
            landcover,
            landcover_scores,
        },
    })
}
