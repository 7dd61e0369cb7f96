//! Modality registry, the per-location sample container, the pretext task
//! list, cyclic encodings and band standardization.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Band total of the default registry.
pub const DEFAULT_TOTAL_BANDS: usize = 46;

pub const SENTINEL2: &str = "sentinel2";
pub const SENTINEL1: &str = "sentinel1";
pub const ASTER: &str = "aster";
pub const CANOPY_HEIGHT: &str = "canopy_height";
pub const DYNAMIC_WORLD: &str = "dynamic_world";
pub const ESA_WORLDCOVER: &str = "esa_worldcover";
pub const BIOME: &str = "biome";
pub const ECOREGION: &str = "ecoregion";
pub const ERA5_TEMPERATURE: &str = "era5_temperature";
pub const ERA5_PRECIPITATION: &str = "era5_precipitation";
pub const GEOLOCATION: &str = "geolocation";
pub const DATE: &str = "date";

/// Stored label marking a dynamic-world pixel without data.
pub const DYNAMIC_WORLD_NO_DATA: u32 = 0;

/// Paper-faithful ecoregion cardinality; desk-scale runs use fewer.
pub const ECOREGION_CLASSES_FULL: u32 = 846;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Pixel,
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Continuous,
    Categorical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProductLevel {
    L1C,
    L2A,
}

impl fmt::Display for ProductLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProductLevel::L1C => f.write_str("L1C"),
            ProductLevel::L2A => f.write_str("L2A"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub level: Level,
    pub kind: Kind,
    pub band_count: usize,
    /// Number of stored label values for categorical modalities.
    pub class_count: Option<u32>,
    /// Pixels per side for pixel-level modalities.
    pub resolution: Option<usize>,
    /// Values are (sin, cos) pairs; never standardized.
    pub cyclic: bool,
}

impl ModalitySpec {
    pub fn is_pixel(&self) -> bool {
        self.level == Level::Pixel
    }

    pub fn is_categorical(&self) -> bool {
        self.kind == Kind::Categorical
    }

    /// Whether band statistics are kept (and applied) for this modality.
    pub fn is_standardized(&self) -> bool {
        self.kind == Kind::Continuous && !self.cyclic
    }

    /// Label excluded from losses, if any.
    pub fn ignore_label(&self) -> Option<u32> {
        (self.name == DYNAMIC_WORLD).then_some(DYNAMIC_WORLD_NO_DATA)
    }

    pub fn values_per_sample(&self) -> usize {
        match self.resolution {
            Some(r) => self.band_count * r * r,
            None => self.band_count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistryConfig {
    pub ecoregion_classes: u32,
    pub raster_size: usize,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig {
            ecoregion_classes: 16,
            raster_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub schema_version: u32,
    pub modalities: Vec<ModalitySpec>,
}

impl Registry {
    pub fn get(&self, name: &str) -> Option<&ModalitySpec> {
        self.modalities.iter().find(|m| m.name == name)
    }

    pub fn expect(&self, name: &str) -> Result<&ModalitySpec> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("modality `{name}` is not in the registry")))
    }

    pub fn total_bands(&self) -> usize {
        self.modalities.iter().map(|m| m.band_count).sum()
    }

    pub fn raster_size(&self) -> usize {
        self.modalities
            .iter()
            .find_map(|m| m.resolution)
            .unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModalitySpec> {
        self.modalities.iter()
    }

    /// Canonical JSON: sorted keys, explicit `schema_version`.
    pub fn to_canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }

    /// SHA-256 of the canonical JSON, used to tie datasets to a registry.
    pub fn hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(crate::nn::params::hex(&Sha256::digest(self.to_canonical_json()?.as_bytes())))
    }
}

pub(crate) fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value keeps object keys in a BTreeMap, so this sorts them.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)?)
}

/// The twelve-modality registry in canonical order.
pub fn build_modality_registry(config: &RegistryConfig) -> Result<Registry> {
    if config.raster_size == 0 {
        return Err(Error::invalid("raster_size must be positive"));
    }
    if config.ecoregion_classes == 0 {
        return Err(Error::invalid("ecoregion_classes must be positive"));
    }
    let r = Some(config.raster_size);
    let m = |name: &str, level, kind, band_count, class_count, cyclic| ModalitySpec {
        name: name.to_string(),
        level,
        kind,
        band_count,
        class_count,
        resolution: if level == Level::Pixel { r } else { None },
        cyclic,
    };
    use Kind::*;
    use Level::*;
    let modalities = vec![
        m(SENTINEL2, Pixel, Continuous, 12, None, false),
        m(SENTINEL1, Pixel, Continuous, 8, None, false),
        m(ASTER, Pixel, Continuous, 2, None, false),
        m(CANOPY_HEIGHT, Pixel, Continuous, 2, None, false),
        // 9 landcover classes plus the no-data label 0
        m(DYNAMIC_WORLD, Pixel, Categorical, 1, Some(10), false),
        m(ESA_WORLDCOVER, Pixel, Categorical, 1, Some(11), false),
        m(BIOME, Image, Categorical, 1, Some(14), false),
        m(ECOREGION, Image, Categorical, 1, Some(config.ecoregion_classes), false),
        m(ERA5_TEMPERATURE, Image, Continuous, 9, None, false),
        m(ERA5_PRECIPITATION, Image, Continuous, 3, None, false),
        m(GEOLOCATION, Image, Continuous, 4, None, true),
        m(DATE, Image, Continuous, 2, None, true),
    ];
    let registry = Registry {
        schema_version: SCHEMA_VERSION,
        modalities,
    };
    if registry.total_bands() != DEFAULT_TOTAL_BANDS {
        return Err(Error::SchemaCorruption(format!(
            "registry has {} bands, expected {DEFAULT_TOTAL_BANDS}",
            registry.total_bands()
        )));
    }
    Ok(registry)
}

// ---------------------------------------------------------------- encodings

/// `(sin(2π·value/period), cos(2π·value/period))`.
pub fn encode_cyclic(value: f64, period: f64) -> Result<(f64, f64)> {
    if !value.is_finite() || !period.is_finite() || period <= 0.0 {
        return Err(Error::invalid(format!(
            "cyclic encoding needs a finite value and positive period (value={value}, period={period})"
        )));
    }
    let a = 2.0 * PI * value / period;
    Ok((a.sin(), a.cos()))
}

/// `[lat_sin, lat_cos, lon_sin, lon_cos]`, both with period 360 degrees.
pub fn encode_geolocation(lat_deg: f64, lon_deg: f64) -> Result<[f64; 4]> {
    let (a, b) = encode_cyclic(lat_deg, 360.0)?;
    let (c, d) = encode_cyclic(lon_deg, 360.0)?;
    Ok([a, b, c, d])
}

/// `[month_sin, month_cos]` for a month in 1..=12.
pub fn encode_month(month: u32) -> Result<[f64; 2]> {
    if !(1..=12).contains(&month) {
        return Err(Error::invalid(format!("month {month} outside 1..=12")));
    }
    let (s, c) = encode_cyclic(month as f64, 12.0)?;
    Ok([s, c])
}

// ------------------------------------------------------------------ samples

/// One location's aligned modalities. Pixel-level layers are `[C, H, W]`
/// row-major; image-level layers are length-`C` vectors. Categorical values
/// are stored as integral floats; missing values are NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiModalSample {
    pub sample_id: u64,
    /// Biome index the sample was stratified under.
    pub stratum_id: u32,
    pub product_level: ProductLevel,
    /// Side length of every pixel-level layer.
    pub size: usize,
    pub layers: BTreeMap<String, Vec<f32>>,
}

impl MultiModalSample {
    pub fn layer(&self, name: &str) -> Result<&[f32]> {
        self.layers
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("sample {} has no `{name}` layer", self.sample_id)))
    }

    /// Per-pixel validity (`true` where every band is finite) of a pixel layer.
    pub fn valid_pixels(&self, name: &str, bands: usize) -> Result<Vec<bool>> {
        let data = self.layer(name)?;
        let hw = self.size * self.size;
        let mut valid = vec![true; hw];
        for b in 0..bands {
            for p in 0..hw {
                if !data[b * hw + p].is_finite() {
                    valid[p] = false;
                }
            }
        }
        Ok(valid)
    }

    /// Crop every pixel-level layer to `size × size` at offset `(top, left)`.
    pub fn crop(&self, registry: &Registry, top: usize, left: usize, size: usize) -> Result<Self> {
        if top + size > self.size || left + size > self.size {
            return Err(Error::invalid(format!(
                "crop {size}@({top},{left}) exceeds raster of side {}",
                self.size
            )));
        }
        let mut out = self.clone();
        out.size = size;
        for spec in registry.iter().filter(|m| m.is_pixel()) {
            let src = self.layer(&spec.name)?;
            let mut dst = Vec::with_capacity(spec.band_count * size * size);
            for b in 0..spec.band_count {
                for y in 0..size {
                    let row = (b * self.size + top + y) * self.size + left;
                    dst.extend_from_slice(&src[row..row + size]);
                }
            }
            out.layers.insert(spec.name.clone(), dst);
        }
        Ok(out)
    }
}

// ------------------------------------------------------------------- stats

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandStat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub schema_version: u32,
    /// Optical statistics keyed by product level.
    pub optical: BTreeMap<ProductLevel, Vec<BandStat>>,
    /// Every other standardized modality.
    pub bands: BTreeMap<String, Vec<BandStat>>,
    /// Bands whose variance was floored.
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl BandStats {
    pub fn for_modality(&self, name: &str, level: ProductLevel) -> Result<&[BandStat]> {
        let found = if name == SENTINEL2 {
            self.optical.get(&level)
        } else {
            self.bands.get(name)
        };
        found
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("no band statistics for `{name}` ({level})")))
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: BandStats = serde_json::from_str(text)?;
        if s.schema_version != SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion {
                found: s.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        Ok(s)
    }
}

/// `(v − mean)/std` on every standardized band; categorical and cyclic layers
/// are untouched. Non-finite (missing) values become 0.
pub fn standardize_sample(sample: &MultiModalSample, stats: &BandStats, registry: &Registry) -> Result<MultiModalSample> {
    let mut out = sample.clone();
    for spec in registry.iter().filter(|m| m.is_standardized()) {
        let band_stats = stats.for_modality(&spec.name, sample.product_level)?;
        if band_stats.len() != spec.band_count {
            return Err(Error::Config(format!(
                "`{}` has {} band statistics, expected {}",
                spec.name,
                band_stats.len(),
                spec.band_count
            )));
        }
        let data = out
            .layers
            .get_mut(&spec.name)
            .ok_or_else(|| Error::Config(format!("sample has no `{}` layer", spec.name)))?;
        let per_band = data.len() / spec.band_count;
        for (b, st) in band_stats.iter().enumerate() {
            for v in &mut data[b * per_band..(b + 1) * per_band] {
                *v = if v.is_finite() {
                    ((*v as f64 - st.mean) / st.std) as f32
                } else {
                    0.0
                };
            }
        }
    }
    Ok(out)
}

/// Inverse of [`standardize_sample`] for standardized layers.
pub fn destandardize_sample(sample: &MultiModalSample, stats: &BandStats, registry: &Registry) -> Result<MultiModalSample> {
    let mut out = sample.clone();
    for spec in registry.iter().filter(|m| m.is_standardized()) {
        let band_stats = stats.for_modality(&spec.name, sample.product_level)?;
        let data = out
            .layers
            .get_mut(&spec.name)
            .ok_or_else(|| Error::Config(format!("sample has no `{}` layer", spec.name)))?;
        let per_band = data.len() / spec.band_count;
        for (b, st) in band_stats.iter().enumerate() {
            for v in &mut data[b * per_band..(b + 1) * per_band] {
                *v = (*v as f64 * st.std + st.mean) as f32;
            }
        }
    }
    Ok(out)
}

// -------------------------------------------------------------- validation

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub modality: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, modality: &str, message: String) {
        self.violations.push(Violation {
            modality: modality.to_string(),
            message,
        });
    }
}

const UNIT_CIRCLE_TOL: f64 = 1e-6;

pub fn validate_sample(sample: &MultiModalSample, registry: &Registry) -> ValidationReport {
    let mut report = ValidationReport::default();
    for spec in registry.iter() {
        let Some(data) = sample.layers.get(&spec.name) else {
            report.push(&spec.name, "layer missing".into());
            continue;
        };
        let expected = match spec.level {
            Level::Pixel => spec.band_count * sample.size * sample.size,
            Level::Image => spec.band_count,
        };
        if data.len() != expected {
            report.push(
                &spec.name,
                format!("shape mismatch: {} values, expected {expected}", data.len()),
            );
            continue;
        }
        if let Some(classes) = spec.class_count {
            let mut bad: Vec<String> = Vec::new();
            for &v in data {
                let ok = v.is_finite() && v >= 0.0 && v.fract() == 0.0 && (v as u32) < classes;
                if !ok && bad.len() < 4 && !bad.contains(&v.to_string()) {
                    bad.push(v.to_string());
                }
            }
            for label in bad {
                report.push(
                    &spec.name,
                    format!("label {label} out of range 0..{classes}"),
                );
            }
        }
        if spec.cyclic {
            for (i, pair) in data.chunks_exact(2).enumerate() {
                let r = (pair[0] as f64).powi(2) + (pair[1] as f64).powi(2);
                if !r.is_finite() || (r - 1.0).abs() > UNIT_CIRCLE_TOL.max(4.0 * f32::EPSILON as f64) {
                    report.push(&spec.name, format!("cyclic pair {i} off unit circle (sin²+cos²={r})"));
                }
            }
        }
    }
    if sample.size > 0 && registry.raster_size() != 0 && sample.size != registry.raster_size() {
        // cropped samples are legal; only rasters larger than the registry are not
        if sample.size > registry.raster_size() {
            report.push(
                "*",
                format!("raster side {} exceeds registry resolution {}", sample.size, registry.raster_size()),
            );
        }
    }
    report
}

// ------------------------------------------------------------------- tasks

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    MaskedRegression,
    MaskedClassification,
    ImageRegression,
    ImageClassification,
}

impl LossKind {
    pub fn is_pixel(self) -> bool {
        matches!(self, LossKind::MaskedRegression | LossKind::MaskedClassification)
    }

    pub fn is_classification(self) -> bool {
        matches!(self, LossKind::MaskedClassification | LossKind::ImageClassification)
    }
}

/// A slice of a modality's bands used as a task target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetBands {
    pub modality: String,
    pub bands: std::ops::Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub targets: Vec<TargetBands>,
    pub loss_kind: LossKind,
    /// Values per pixel (pixel tasks) or per sample (image tasks); class
    /// count for classification.
    pub output_channels: usize,
    pub ignore_label: Option<u32>,
}

impl TaskSpec {
    pub fn target_modalities(&self) -> Vec<&str> {
        self.targets.iter().map(|t| t.modality.as_str()).collect()
    }

    /// Number of target values per pixel/sample before any class expansion.
    pub fn target_width(&self) -> usize {
        self.targets.iter().map(|t| t.bands.len()).sum()
    }
}

pub const TASK_NAMES: [&str; 12] = [
    "sentinel2",
    "sentinel1",
    "aster",
    "canopy_height",
    "dynamic_world",
    "esa_worldcover",
    "biome",
    "ecoregion",
    "climate",
    "latitude",
    "longitude",
    "month",
];

/// The twelve default pretext tasks: each modality is its own task except the
/// two climate modalities (grouped) and geolocation (split into latitude and
/// longitude).
pub fn default_tasks(registry: &Registry) -> Result<Vec<TaskSpec>> {
    let whole = |name: &str| -> Result<TargetBands> {
        let spec = registry.expect(name)?;
        Ok(TargetBands {
            modality: name.to_string(),
            bands: 0..spec.band_count,
        })
    };
    let mut tasks = Vec::with_capacity(12);
    for name in [SENTINEL2, SENTINEL1, ASTER, CANOPY_HEIGHT] {
        let t = whole(name)?;
        tasks.push(TaskSpec {
            task_id: name.to_string(),
            output_channels: t.bands.len(),
            targets: vec![t],
            loss_kind: LossKind::MaskedRegression,
            ignore_label: None,
        });
    }
    for name in [DYNAMIC_WORLD, ESA_WORLDCOVER] {
        let spec = registry.expect(name)?;
        tasks.push(TaskSpec {
            task_id: name.to_string(),
            targets: vec![whole(name)?],
            loss_kind: LossKind::MaskedClassification,
            output_channels: spec.class_count.unwrap_or(0) as usize,
            ignore_label: spec.ignore_label(),
        });
    }
    for name in [BIOME, ECOREGION] {
        let spec = registry.expect(name)?;
        tasks.push(TaskSpec {
            task_id: name.to_string(),
            targets: vec![whole(name)?],
            loss_kind: LossKind::ImageClassification,
            output_channels: spec.class_count.unwrap_or(0) as usize,
            ignore_label: None,
        });
    }
    let climate = vec![whole(ERA5_TEMPERATURE)?, whole(ERA5_PRECIPITATION)?];
    tasks.push(TaskSpec {
        task_id: "climate".into(),
        output_channels: climate.iter().map(|t| t.bands.len()).sum(),
        targets: climate,
        loss_kind: LossKind::ImageRegression,
        ignore_label: None,
    });
    registry.expect(GEOLOCATION)?;
    for (id, bands) in [("latitude", 0..2), ("longitude", 2..4)] {
        tasks.push(TaskSpec {
            task_id: id.into(),
            targets: vec![TargetBands {
                modality: GEOLOCATION.into(),
                bands,
            }],
            loss_kind: LossKind::ImageRegression,
            output_channels: 2,
            ignore_label: None,
        });
    }
    tasks.push(TaskSpec {
        task_id: "month".into(),
        targets: vec![whole(DATE)?],
        loss_kind: LossKind::ImageRegression,
        output_channels: 2,
        ignore_label: None,
    });
    Ok(tasks)
}

/// Named subsets of the default tasks: `s2`, `pixel`, `image`, `all`, or a
/// comma-separated list of task ids.
pub fn select_tasks(registry: &Registry, selector: &str) -> Result<Vec<TaskSpec>> {
    let all = default_tasks(registry)?;
    let keep: Vec<String> = match selector {
        "all" => return Ok(all),
        "s2" => vec![SENTINEL2.into()],
        "pixel" => all
            .iter()
            .filter(|t| t.loss_kind.is_pixel())
            .map(|t| t.task_id.clone())
            .collect(),
        "image" => std::iter::once(SENTINEL2.to_string())
            .chain(all.iter().filter(|t| !t.loss_kind.is_pixel()).map(|t| t.task_id.clone()))
            .collect(),
        list => list
            .split(',')
            .map(|s| match s.trim() {
                "s2" => SENTINEL2.to_string(),
                other => other.to_string(),
            })
            .collect(),
    };
    for k in &keep {
        if !all.iter().any(|t| &t.task_id == k) {
            return Err(Error::Config(format!(
                "unknown task `{k}`; valid tasks: {} (or one of s2, pixel, image, all)",
                TASK_NAMES.join(", ")
            )));
        }
    }
    Ok(all.into_iter().filter(|t| keep.contains(&t.task_id)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> Registry {
        build_modality_registry(&RegistryConfig::default()).unwrap()
    }

    fn sample(reg: &Registry) -> MultiModalSample {
        let size = 4;
        let mut layers = BTreeMap::new();
        for m in reg.iter() {
            let n = match m.level {
                Level::Pixel => m.band_count * size * size,
                Level::Image => m.band_count,
            };
            let v = if m.is_categorical() { 1.0 } else { 0.5 };
            layers.insert(m.name.clone(), vec![v; n]);
        }
        layers.insert(GEOLOCATION.into(), vec![0.0, 1.0, 1.0, 0.0]);
        layers.insert(DATE.into(), vec![1.0, 0.0]);
        MultiModalSample {
            sample_id: 7,
            stratum_id: 1,
            product_level: ProductLevel::L2A,
            size,
            layers,
        }
    }

    #[test]
    fn cyclic_examples() {
        let (s, c) = encode_cyclic(0.0, 360.0).unwrap();
        assert_eq!((s, c), (0.0, 1.0));
        let (s, c) = encode_cyclic(90.0, 360.0).unwrap();
        assert!((s - 1.0).abs() < 1e-15 && c.abs() < 1e-15);
        let (s, c) = encode_cyclic(3.0, 12.0).unwrap();
        assert!((s - 1.0).abs() < 1e-15 && c.abs() < 1e-15);
        assert!(encode_cyclic(1.0, 0.0).is_err());
        assert!(encode_cyclic(f64::NAN, 12.0).is_err());
        assert!(encode_cyclic(1.0, -3.0).is_err());
    }

    #[test]
    fn default_registry_has_46_bands() {
        let reg = registry();
        assert_eq!(reg.modalities.len(), 12);
        let counts: Vec<usize> = reg.iter().map(|m| m.band_count).collect();
        assert_eq!(counts, vec![12, 8, 2, 2, 1, 1, 1, 1, 9, 3, 4, 2]);
        assert_eq!(reg.total_bands(), 46);
        assert_eq!(reg.expect(DYNAMIC_WORLD).unwrap().class_count, Some(10));
        assert_eq!(reg.expect(ESA_WORLDCOVER).unwrap().class_count, Some(11));
        assert_eq!(reg.expect(BIOME).unwrap().class_count, Some(14));
    }

    #[test]
    fn registry_overrides() {
        let reg = build_modality_registry(&RegistryConfig {
            ecoregion_classes: 8,
            raster_size: 32,
        })
        .unwrap();
        assert_eq!(reg.total_bands(), 46);
        assert_eq!(reg.expect(ECOREGION).unwrap().class_count, Some(8));
        assert!(reg.iter().filter(|m| m.is_pixel()).all(|m| m.resolution == Some(32)));
        assert!(reg.iter().filter(|m| !m.is_pixel()).all(|m| m.resolution.is_none()));
        let full = build_modality_registry(&RegistryConfig {
            ecoregion_classes: ECOREGION_CLASSES_FULL,
            raster_size: 128,
        })
        .unwrap();
        assert_eq!(full.expect(ECOREGION).unwrap().class_count, Some(846));
    }

    #[test]
    fn canonical_json_is_sorted_and_versioned() {
        let json = registry().to_canonical_json().unwrap();
        assert!(json.contains("\"schema_version\": 1"));
        let first_mod = json.find("\"modalities\"").unwrap();
        let version = json.find("\"schema_version\"").unwrap();
        assert!(first_mod < version);
    }

    #[test]
    fn task_list_covers_every_band_exactly_once() {
        let reg = registry();
        let tasks = default_tasks(&reg).unwrap();
        assert_eq!(tasks.len(), 12);
        let ids: Vec<&str> = tasks.iter().map(|t| t.task_id.as_str()).collect();
        assert_eq!(ids, TASK_NAMES.to_vec());
        for m in reg.iter() {
            let mut cover = vec![0; m.band_count];
            for t in &tasks {
                for tb in t.targets.iter().filter(|tb| tb.modality == m.name) {
                    for b in tb.bands.clone() {
                        cover[b] += 1;
                    }
                }
            }
            assert!(cover.iter().all(|&c| c == 1), "{} bands covered {:?}", m.name, cover);
        }
        let climate = tasks.iter().find(|t| t.task_id == "climate").unwrap();
        assert_eq!(climate.output_channels, 12);
    }

    #[test]
    fn task_selectors() {
        let reg = registry();
        assert_eq!(select_tasks(&reg, "s2").unwrap().len(), 1);
        assert_eq!(select_tasks(&reg, "all").unwrap().len(), 12);
        assert_eq!(select_tasks(&reg, "pixel").unwrap().len(), 6);
        let image = select_tasks(&reg, "image").unwrap();
        assert_eq!(image.len(), 7);
        assert_eq!(image[0].task_id, SENTINEL2);
        let err = select_tasks(&reg, "s2,bogus").unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("canopy_height"));
    }

    fn stats(reg: &Registry, mean: f64, std: f64) -> BandStats {
        let mut s = BandStats {
            schema_version: SCHEMA_VERSION,
            ..Default::default()
        };
        for m in reg.iter().filter(|m| m.is_standardized()) {
            let v = vec![BandStat { mean, std }; m.band_count];
            if m.name == SENTINEL2 {
                s.optical.insert(ProductLevel::L1C, v.clone());
                s.optical.insert(ProductLevel::L2A, v);
            } else {
                s.bands.insert(m.name.clone(), v);
            }
        }
        s
    }

    #[test]
    fn standardize_formula_and_missing() {
        let reg = registry();
        let mut smp = sample(&reg);
        smp.layers.get_mut(SENTINEL1).unwrap()[0] = 9.0;
        let s2 = smp.layers.get_mut(SENTINEL2).unwrap();
        s2.iter_mut().for_each(|v| *v = f32::NAN);
        let out = standardize_sample(&smp, &stats(&reg, 5.0, 2.0), &reg).unwrap();
        assert_eq!(out.layers[SENTINEL1][0], 2.0);
        assert!(out.layers[SENTINEL2].iter().all(|&v| v == 0.0));
        // categorical and cyclic layers untouched
        assert_eq!(out.layers[DYNAMIC_WORLD], smp.layers[DYNAMIC_WORLD]);
        assert_eq!(out.layers[GEOLOCATION], smp.layers[GEOLOCATION]);
    }

    #[test]
    fn standardize_selects_optical_stats_by_product_level() {
        let reg = registry();
        let smp = sample(&reg);
        let mut st = stats(&reg, 0.0, 1.0);
        st.optical.insert(ProductLevel::L1C, vec![BandStat { mean: 0.1, std: 2.0 }; 12]);
        let l2a = standardize_sample(&smp, &st, &reg).unwrap();
        let mut as_l1c = smp.clone();
        as_l1c.product_level = ProductLevel::L1C;
        let l1c = standardize_sample(&as_l1c, &st, &reg).unwrap();
        assert_ne!(l1c.layers[SENTINEL2], l2a.layers[SENTINEL2]);
        assert_eq!(l1c.layers[SENTINEL1], l2a.layers[SENTINEL1]);
    }

    #[test]
    fn missing_stats_is_configuration_error() {
        let reg = registry();
        let mut st = stats(&reg, 0.0, 1.0);
        st.bands.remove(ASTER);
        let err = standardize_sample(&sample(&reg), &st, &reg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn validation_reports() {
        let reg = registry();
        let good = sample(&reg);
        assert!(validate_sample(&good, &reg).is_valid());

        let mut bad_label = good.clone();
        bad_label.layers.get_mut(DYNAMIC_WORLD).unwrap()[3] = 10.0;
        let rep = validate_sample(&bad_label, &reg);
        assert_eq!(rep.violations.len(), 1);
        assert_eq!(rep.violations[0].modality, DYNAMIC_WORLD);
        assert!(rep.violations[0].message.contains("10"));

        let mut off_circle = good.clone();
        off_circle.layers.insert(GEOLOCATION.into(), vec![1.0, 1.0, 0.0, 1.0]);
        let rep = validate_sample(&off_circle, &reg);
        assert_eq!(rep.violations.len(), 1);
        assert!(rep.violations[0].message.contains("off unit circle"));

        let mut short = good;
        short.layers.get_mut(SENTINEL1).unwrap().pop();
        let rep = validate_sample(&short, &reg);
        assert!(rep.violations[0].message.contains("shape mismatch"));
    }

    #[test]
    fn crop_keeps_image_layers() {
        let reg = registry();
        let mut smp = sample(&reg);
        let s1 = smp.layers.get_mut(SENTINEL1).unwrap();
        for (i, v) in s1.iter_mut().enumerate() {
            *v = i as f32;
        }
        let c = smp.crop(&reg, 1, 2, 2).unwrap();
        assert_eq!(c.size, 2);
        // band 0, rows 1..3, cols 2..4 of a 4×4 ramp
        assert_eq!(&c.layers[SENTINEL1][..4], &[6.0, 7.0, 10.0, 11.0]);
        assert_eq!(c.layers[BIOME], smp.layers[BIOME]);
        assert!(smp.crop(&reg, 3, 0, 2).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cyclic_on_unit_circle(v in -1e6f64..1e6, p in 1e-3f64..1e4) {
                let (s, c) = encode_cyclic(v, p).unwrap();
                prop_assert!((s * s + c * c - 1.0).abs() < 1e-9);
            }

            #[test]
            fn standardize_roundtrip(vals in proptest::collection::vec(-1e3f32..1e3, 8), mean in -50.0f64..50.0, std in 0.1f64..20.0) {
                let reg = registry();
                let mut smp = sample(&reg);
                let s1 = smp.layers.get_mut(SENTINEL1).unwrap();
                for (i, v) in vals.iter().enumerate() {
                    s1[i * 16] = *v;
                }
                let st = stats(&reg, mean, std);
                let back = destandardize_sample(&standardize_sample(&smp, &st, &reg).unwrap(), &st, &reg).unwrap();
                for (a, b) in back.layers[SENTINEL1].iter().zip(&smp.layers[SENTINEL1]) {
                    prop_assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
                }
            }
        }
    }
}
