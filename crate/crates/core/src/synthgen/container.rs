//! On-disk dataset: `manifest.json`, `stats.json` and one `<modality>.bin`
//! per modality holding every sample as `(N, C, H, W)` or `(N, C)`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::SampleSource;
use crate::error::{Error, Result};
use crate::schema::{BandStats, Level, MultiModalSample, ProductLevel, Registry};

pub const MAGIC: [u8; 8] = *b"MMDS\0\0\0\x01";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATS_FILE: &str = "stats.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
    U16,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U8 => 1,
            DType::U16 => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DType::F32),
            1 => Some(DType::U8),
            2 => Some(DType::U16),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
            DType::U16 => 2,
        }
    }

    fn encode(self, v: f32, out: &mut Vec<u8>) {
        match self {
            DType::F32 => out.extend_from_slice(&v.to_le_bytes()),
            DType::U8 => out.push(v as u8),
            DType::U16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f32> {
        match self {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            DType::U8 => bytes.iter().map(|&b| b as f32).collect(),
            DType::U16 => bytes
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]) as f32)
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityRecord {
    pub name: String,
    pub file: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub byte_order: String,
    pub layout: String,
}

impl ModalityRecord {
    fn header_len(&self) -> u64 {
        8 + 4 + 1 + 1 + 8 * self.shape.len() as u64
    }

    fn sample_bytes(&self) -> u64 {
        self.shape[1..].iter().product::<u64>() * self.dtype.size() as u64
    }

    fn expected_file_len(&self) -> u64 {
        self.header_len() + self.shape[0] * self.sample_bytes()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub stratum_id: u32,
    pub product_level: ProductLevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub sample_count: u64,
    pub raster_size: usize,
    pub registry_hash: String,
    pub registry: Registry,
    pub modalities: Vec<ModalityRecord>,
    pub samples: Vec<SampleRecord>,
    /// Split name → sample indices.
    pub splits: BTreeMap<String, Vec<usize>>,
    pub stats: Option<String>,
    /// Echo of whatever produced the data.
    #[serde(default)]
    pub generator: serde_json::Value,
}

fn dtype_for(spec: &crate::schema::ModalitySpec) -> DType {
    match (spec.is_categorical(), spec.level) {
        (false, _) => DType::F32,
        (true, Level::Pixel) => DType::U8,
        (true, Level::Image) => DType::U16,
    }
}

/// Streams samples into a dataset directory.
pub struct DatasetWriter {
    dir: PathBuf,
    registry: Registry,
    raster_size: usize,
    expected: u64,
    records: Vec<ModalityRecord>,
    files: Vec<BufWriter<File>>,
    samples: Vec<SampleRecord>,
}

impl DatasetWriter {
    pub fn create(dir: &Path, registry: &Registry, raster_size: usize, sample_count: u64) -> Result<Self> {
        if sample_count == 0 {
            return Err(Error::invalid("cannot write an empty dataset"));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut records = Vec::new();
        let mut files = Vec::new();
        for spec in registry.iter() {
            let mut shape = vec![sample_count, spec.band_count as u64];
            if spec.is_pixel() {
                shape.extend([raster_size as u64, raster_size as u64]);
            }
            let rec = ModalityRecord {
                name: spec.name.clone(),
                file: format!("{}.bin", spec.name),
                dtype: dtype_for(spec),
                shape,
                byte_order: "little".into(),
                layout: "row-major".into(),
            };
            let path = dir.join(&rec.file);
            let mut f = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            let mut header = Vec::with_capacity(rec.header_len() as usize);
            header.extend_from_slice(&MAGIC);
            header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
            header.push(rec.dtype.code());
            header.push(rec.shape.len() as u8);
            for d in &rec.shape {
                header.extend_from_slice(&d.to_le_bytes());
            }
            f.write_all(&header).map_err(|e| Error::io(&path, e))?;
            records.push(rec);
            files.push(f);
        }
        Ok(DatasetWriter {
            dir: dir.to_path_buf(),
            registry: registry.clone(),
            raster_size,
            expected: sample_count,
            records,
            files,
            samples: Vec::new(),
        })
    }

    pub fn push(&mut self, sample: &MultiModalSample) -> Result<()> {
        if self.samples.len() as u64 >= self.expected {
            return Err(Error::invalid(format!("writer sized for {} samples", self.expected)));
        }
        if sample.size != self.raster_size {
            return Err(Error::invalid(format!(
                "sample {} has raster side {}, dataset uses {}",
                sample.sample_id, sample.size, self.raster_size
            )));
        }
        let mut buf = Vec::new();
        for (rec, f) in self.records.iter().zip(&mut self.files) {
            let data = sample.layer(&rec.name)?;
            let want: u64 = rec.shape[1..].iter().product();
            if data.len() as u64 != want {
                return Err(Error::ShapeMismatch {
                    name: rec.name.clone(),
                    expected: rec.shape[1..].iter().map(|&d| d as usize).collect(),
                    found: vec![data.len()],
                });
            }
            buf.clear();
            for &v in data {
                rec.dtype.encode(v, &mut buf);
            }
            f.write_all(&buf).map_err(|e| Error::io(self.dir.join(&rec.file), e))?;
        }
        self.samples.push(SampleRecord {
            sample_id: sample.sample_id,
            stratum_id: sample.stratum_id,
            product_level: sample.product_level,
        });
        Ok(())
    }

    /// Flush the data files and write the manifest (and stats, if given).
    pub fn finish(
        mut self,
        splits: BTreeMap<String, Vec<usize>>,
        stats: Option<&BandStats>,
        generator: serde_json::Value,
    ) -> Result<DatasetManifest> {
        if self.samples.len() as u64 != self.expected {
            return Err(Error::invalid(format!(
                "wrote {} samples, expected {}",
                self.samples.len(),
                self.expected
            )));
        }
        for (rec, f) in self.records.iter().zip(&mut self.files) {
            f.flush().map_err(|e| Error::io(self.dir.join(&rec.file), e))?;
        }
        for idx in splits.values().flatten() {
            if *idx >= self.samples.len() {
                return Err(Error::invalid(format!("split index {idx} out of range")));
            }
        }
        let stats_ref = match stats {
            Some(s) => {
                let p = self.dir.join(STATS_FILE);
                fs::write(&p, s.to_canonical_json()?).map_err(|e| Error::io(&p, e))?;
                Some(STATS_FILE.to_string())
            }
            None => None,
        };
        let manifest = DatasetManifest {
            format_version: FORMAT_VERSION,
            sample_count: self.expected,
            raster_size: self.raster_size,
            registry_hash: self.registry.hash()?,
            registry: self.registry.clone(),
            modalities: self.records.clone(),
            samples: std::mem::take(&mut self.samples),
            splits,
            stats: stats_ref,
            generator,
        };
        let p = self.dir.join(MANIFEST_FILE);
        fs::write(&p, crate::schema::canonical_json(&manifest)?).map_err(|e| Error::io(&p, e))?;
        Ok(manifest)
    }
}

/// Write `samples` into `dir` in one go.
pub fn write_dataset(
    dir: &Path,
    registry: &Registry,
    samples: &[MultiModalSample],
    splits: BTreeMap<String, Vec<usize>>,
    stats: Option<&BandStats>,
) -> Result<DatasetManifest> {
    let first = samples.first().ok_or_else(|| Error::invalid("cannot write an empty dataset"))?;
    let mut w = DatasetWriter::create(dir, registry, first.size, samples.len() as u64)?;
    for s in samples {
        w.push(s)?;
    }
    w.finish(splits, stats, serde_json::Value::Null)
}

/// Random-access reader; only the manifest is held in memory.
pub struct Dataset {
    dir: PathBuf,
    manifest: DatasetManifest,
    files: Vec<Mutex<File>>,
}

impl std::fmt::Debug for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dataset")
            .field("dir", &self.dir)
            .field("samples", &self.manifest.sample_count)
            .finish()
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptDataset(msg.into())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::open(dir)
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| corrupt(format!("manifest: {e}")))?;
        let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let manifest: DatasetManifest = serde_json::from_value(raw).map_err(|e| corrupt(format!("manifest: {e}")))?;
        if manifest.registry.hash()? != manifest.registry_hash {
            return Err(corrupt("registry hash does not match embedded registry"));
        }
        if manifest.samples.len() as u64 != manifest.sample_count {
            return Err(corrupt(format!(
                "manifest lists {} samples, declares {}",
                manifest.samples.len(),
                manifest.sample_count
            )));
        }
        for spec in manifest.registry.iter() {
            let n = manifest.modalities.iter().filter(|r| r.name == spec.name).count();
            if n != 1 {
                return Err(corrupt(format!("modality `{}` has {n} records", spec.name)));
            }
        }
        let mut files = Vec::with_capacity(manifest.modalities.len());
        for rec in &manifest.modalities {
            let path = dir.join(&rec.file);
            let mut f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            let len = f.metadata().map_err(|e| Error::io(&path, e))?.len();
            if rec.shape.first() != Some(&manifest.sample_count) {
                return Err(corrupt(format!("`{}` leading dimension disagrees with sample count", rec.name)));
            }
            if len != rec.expected_file_len() {
                return Err(corrupt(format!(
                    "`{}` is {len} bytes, manifest implies {}",
                    rec.file,
                    rec.expected_file_len()
                )));
            }
            let mut head = vec![0u8; rec.header_len() as usize];
            f.read_exact(&mut head).map_err(|e| Error::io(&path, e))?;
            if head[..8] != MAGIC {
                return Err(corrupt(format!("`{}` has a bad magic number", rec.file)));
            }
            let v = u32::from_le_bytes(head[8..12].try_into().unwrap());
            if v != FORMAT_VERSION {
                return Err(Error::UnsupportedVersion {
                    found: v,
                    expected: FORMAT_VERSION,
                });
            }
            if DType::from_code(head[12]) != Some(rec.dtype) || head[13] as usize != rec.shape.len() {
                return Err(corrupt(format!("`{}` header disagrees with manifest", rec.file)));
            }
            for (i, d) in rec.shape.iter().enumerate() {
                let o = 14 + 8 * i;
                if u64::from_le_bytes(head[o..o + 8].try_into().unwrap()) != *d {
                    return Err(corrupt(format!("`{}` header shape disagrees with manifest", rec.file)));
                }
            }
            files.push(Mutex::new(f));
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            files,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Stats stored alongside the data, if any.
    pub fn stats(&self) -> Result<Option<BandStats>> {
        let Some(name) = &self.manifest.stats else { return Ok(None) };
        let p = self.dir.join(name);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        BandStats::from_json(&text).map(Some)
    }

    pub fn read_all(&self) -> Result<Vec<MultiModalSample>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    pub fn get(&self, index: usize) -> Result<MultiModalSample> {
        let rec = self
            .manifest
            .samples
            .get(index)
            .ok_or_else(|| Error::invalid(format!("sample index {index} out of range")))?;
        let mut layers = BTreeMap::new();
        for (m, file) in self.manifest.modalities.iter().zip(&self.files) {
            let n = m.sample_bytes();
            let mut buf = vec![0u8; n as usize];
            let mut f = file.lock().unwrap_or_else(|p| p.into_inner());
            f.seek(SeekFrom::Start(m.header_len() + index as u64 * n))
                .and_then(|_| f.read_exact(&mut buf))
                .map_err(|e| Error::io(self.dir.join(&m.file), e))?;
            layers.insert(m.name.clone(), m.dtype.decode(&buf));
        }
        Ok(MultiModalSample {
            sample_id: rec.sample_id,
            stratum_id: rec.stratum_id,
            product_level: rec.product_level,
            size: self.manifest.raster_size,
            layers,
        })
    }
}

impl SampleSource for Dataset {
    fn registry(&self) -> &Registry {
        &self.manifest.registry
    }

    fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    fn sample(&self, index: usize) -> Result<MultiModalSample> {
        self.get(index)
    }

    fn split(&self, name: &str) -> Result<Vec<usize>> {
        self.manifest
            .splits
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("dataset has no `{name}` split")))
    }

    fn product_level(&self, index: usize) -> Option<ProductLevel> {
        self.manifest.samples.get(index).map(|s| s.product_level)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{build_modality_registry, RegistryConfig};
    use crate::synthgen::{SyntheticSource, SplitConfig};
    use crate::synthgen::world::WorldConfig;

    fn source() -> SyntheticSource {
        SyntheticSource::generate(
            &WorldConfig {
                seed: 5,
                world_size: 96,
                raster_size: 16,
                samples_total: 10,
                ..Default::default()
            },
            &SplitConfig::default(),
        )
        .unwrap()
    }

    fn bits(s: &MultiModalSample) -> BTreeMap<String, Vec<u32>> {
        s.layers
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|f| f.to_bits()).collect()))
            .collect()
    }

    fn write(dir: &Path) -> Vec<MultiModalSample> {
        let src = source();
        let samples: Vec<_> = (0..src.len()).map(|i| src.sample(i).unwrap()).collect();
        let mut splits = BTreeMap::new();
        splits.insert("pretrain".to_string(), (0..10).collect());
        write_dataset(dir, src.registry(), &samples, splits, None).unwrap();
        samples
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let samples = write(tmp.path());
        let ds = read_dataset(tmp.path()).unwrap();
        let back = ds.read_all().unwrap();
        assert_eq!(back.len(), 10);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(bits(a), bits(b));
            assert_eq!(a.product_level, b.product_level);
            assert_eq!(a.sample_id, b.sample_id);
        }
        assert_eq!(bits(&ds.get(7).unwrap()), bits(&back[7]));
    }

    #[test]
    fn truncation_is_detected() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path());
        let p = tmp.path().join("aster.bin");
        let len = fs::metadata(&p).unwrap().len();
        let f = fs::OpenOptions::new().write(true).open(&p).unwrap();
        f.set_len(len - 1).unwrap();
        assert!(matches!(read_dataset(tmp.path()), Err(Error::CorruptDataset(_))));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path());
        let p = tmp.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&p, text).unwrap();
        assert!(matches!(
            read_dataset(tmp.path()),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
    }

    #[test]
    fn bad_magic_is_detected() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path());
        let p = tmp.path().join("biome.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_dataset(tmp.path()), Err(Error::CorruptDataset(_))));
    }

    #[test]
    fn empty_write_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = build_modality_registry(&RegistryConfig::default()).unwrap();
        assert!(write_dataset(tmp.path(), &reg, &[], BTreeMap::new(), None).is_err());
    }
}
