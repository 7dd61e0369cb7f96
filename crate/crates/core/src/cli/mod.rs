//! Experiment plumbing behind the `mpmae` binary: configuration resolution,
//! output directories and the four subcommands.

pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{
    fine_tune_classifier, fine_tune_segmenter_two_phase, label_efficiency_sweep, linear_probe, DownstreamData, EvalEncoder,
    MetricReport, ProbeConfig, ProbeMode, ResultsStore, TaskKind,
};
use crate::losses::LossMode;
use crate::pretrain::{load_checkpoint, run_pretraining, save_checkpoint, Checkpoint, PretrainConfig, Pretrainer, RunOptions};
use crate::schema::{BandStats, SENTINEL2};
use crate::synthgen::{compute_band_stats, mix_seed, Dataset, DatasetWriter, SampleSource, SplitConfig, SyntheticSource, WorldConfig};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const VERSION_FILE: &str = "VERSION";
pub const SEED_ENV: &str = "MPMAE_SEED";
pub const PRETRAIN_DATA: &str = "pretrain";
pub const DOWNSTREAM_DATA: &str = "downstream";

/// Crate version plus the `git describe` of the build tree.
pub fn version_string() -> String {
    format!("mpmae {} ({})", env!("CARGO_PKG_VERSION"), env!("MPMAE_GIT_DESCRIBE"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamGen {
    /// Samples in the downstream dataset; 0 skips it.
    pub samples: u64,
    /// Mixed into the world seed so downstream windows come from another world.
    pub seed_offset: u64,
    pub splits: SplitConfig,
}

impl Default for DownstreamGen {
    fn default() -> Self {
        DownstreamGen {
            samples: 1024,
            seed_offset: 1,
            splits: SplitConfig::downstream(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSection {
    pub world: WorldConfig,
    pub splits: SplitConfig,
    pub downstream: DownstreamGen,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    #[default]
    Lp,
    Ft,
    FtSeg,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lp" => Ok(EvalMode::Lp),
            "ft" => Ok(EvalMode::Ft),
            "ft-seg" => Ok(EvalMode::FtSeg),
            _ => Err(Error::Config(format!("unknown eval mode `{s}` (lp, ft, ft-seg)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub mode: EvalMode,
    /// Run the label-efficiency sweep instead of a single probe.
    pub sweep: bool,
    pub tasks: Vec<TaskKind>,
    /// Multi-label presence threshold as a fraction of labelled pixels.
    pub presence: f64,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            mode: EvalMode::Lp,
            sweep: false,
            tasks: vec![TaskKind::MultiClass, TaskKind::MultiLabel],
            presence: 0.05,
            fractions: vec![0.01, 0.05, 0.2, 1.0],
            seeds: vec![0, 1, 2],
            jobs: 1,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Samples shown in each reconstruction grid.
    pub reconstructions: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection { reconstructions: 4 }
    }
}

/// Every knob of every subcommand. Serialized, after overrides, into each
/// output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// When set, replaces the seed of every section.
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub config_path: Option<PathBuf>,
    pub gen: GenSection,
    pub pretrain: PretrainConfig,
    pub eval: EvalSection,
    pub report: ReportSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: None,
            output_dir: PathBuf::from("runs"),
            config_path: None,
            gen: GenSection::default(),
            pretrain: PretrainConfig::default(),
            eval: EvalSection::default(),
            report: ReportSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.config_path = Some(path.to_path_buf());
        Ok(cfg)
    }

    /// File (if any), then the seed from `MPMAE_SEED`, then propagate the seed.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
            cfg.seed = Some(seed);
        }
        cfg.apply_seed();
        Ok(cfg)
    }

    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.gen.world.seed = s;
            self.pretrain.seed = s;
            self.eval.probe.seed = s;
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.apply_seed();
    }
}

/// Create `dir`, refusing to reuse a non-empty one unless `force`.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::Config(format!(
                    "output directory {} is not empty (pass --force to overwrite)",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Resolved config and version string, written into every output directory.
pub fn write_provenance(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(RESOLVED_CONFIG);
    fs::write(&p, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&p, e))?;
    let v = dir.join(VERSION_FILE);
    fs::write(&v, version_string() + "\n").map_err(|e| Error::io(&v, e))
}

/// SHA-256 over every regular file under `dir`, in path order.
pub fn directory_hash(dir: &Path) -> Result<String> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = e.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f);
        if rel == Path::new(RESOLVED_CONFIG) || rel == Path::new(VERSION_FILE) {
            continue;
        }
        h.update(rel.to_string_lossy().as_bytes());
        h.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug)]
pub struct GenSummary {
    pub dir: PathBuf,
    pub samples: u64,
    pub biome_counts: BTreeMap<u32, u64>,
    pub hash: String,
    pub downstream: Option<(PathBuf, u64)>,
}

fn write_source(dir: &Path, src: &SyntheticSource, stats_split: &str, generator: serde_json::Value) -> Result<()> {
    let stats = compute_band_stats(src, &src.split(stats_split)?)?;
    let mut w = DatasetWriter::create(dir, src.registry(), src.world.config.raster_size, src.len() as u64)?;
    for i in 0..src.len() {
        w.push(&src.sample(i)?)?;
    }
    w.finish(src.splits.clone(), Some(&stats), generator)?;
    Ok(())
}

/// Generate the pretraining dataset (and the downstream one unless disabled)
/// under `out`.
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<GenSummary> {
    cfg.gen.world.validate()?;
    prepare_output(out, force)?;
    write_provenance(out, cfg)?;
    let pre_dir = out.join(PRETRAIN_DATA);
    let src = SyntheticSource::generate(&cfg.gen.world, &cfg.gen.splits)?;
    let stats_split = if cfg.gen.splits.pretrain > 0.0 { "pretrain" } else { "train" };
    write_source(&pre_dir, &src, stats_split, serde_json::to_value(&cfg.gen.world)?)?;
    let mut downstream = None;
    let d = &cfg.gen.downstream;
    if d.samples > 0 {
        let world = WorldConfig {
            seed: mix_seed(cfg.gen.world.seed, d.seed_offset),
            samples_total: d.samples,
            ..cfg.gen.world.clone()
        };
        let dsrc = SyntheticSource::generate(&world, &d.splits)?;
        let dir = out.join(DOWNSTREAM_DATA);
        write_source(&dir, &dsrc, "train", serde_json::to_value(&world)?)?;
        downstream = Some((dir, dsrc.len() as u64));
    }
    Ok(GenSummary {
        hash: directory_hash(&pre_dir)?,
        dir: pre_dir,
        samples: src.len() as u64,
        biome_counts: src.biome_counts(),
        downstream,
    })
}

/// Stats stored with the dataset, or computed over `split` when absent.
pub fn dataset_stats(ds: &Dataset, split: &str) -> Result<BandStats> {
    match ds.stats()? {
        Some(s) => Ok(s),
        None => compute_band_stats(ds, &ds.split(split)?),
    }
}

/// Overrides accepted by `pretrain` on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct PretrainOverrides {
    pub tasks: Option<String>,
    pub loss: Option<LossMode>,
    pub epochs: Option<usize>,
}

pub fn resolve_pretrain(cfg: &mut ExperimentConfig, o: &PretrainOverrides) {
    if let Some(t) = &o.tasks {
        cfg.pretrain.tasks = t.clone();
    }
    if let Some(l) = o.loss {
        cfg.pretrain.loss_mode = l;
    }
    if let Some(e) = o.epochs {
        cfg.pretrain.epochs = e;
    }
}

#[derive(Debug)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub task_ids: Vec<String>,
    pub loss_mode: LossMode,
    pub epochs: usize,
    pub final_loss: Option<f64>,
}

/// Pretrain on the dataset in `data`; artifacts land in `out`.
pub fn cmd_pretrain(cfg: &ExperimentConfig, data: &Path, out: &Path, resume: Option<&Path>, force: bool) -> Result<PretrainSummary> {
    let ds = Dataset::open(data)?;
    let stats = dataset_stats(&ds, &cfg.pretrain.split)?;
    let mut trainer = match resume {
        Some(p) => {
            let t = Pretrainer::from_checkpoint(&load_checkpoint(p)?)?;
            if t.config != cfg.pretrain {
                log::warn!("resuming with the configuration stored in {}", p.display());
            }
            t
        }
        None => Pretrainer::new(&cfg.pretrain, ds.registry(), &stats)?,
    };
    if resume.is_none() {
        prepare_output(out, force)?;
    }
    let mut resolved = cfg.clone();
    resolved.pretrain = trainer.config.clone();
    write_provenance(out, &resolved)?;
    let task_ids: Vec<String> = trainer.tasks().iter().map(|t| t.task_id.clone()).collect();
    log::info!("pretraining T = {} tasks [{}], loss mode {:?}", task_ids.len(), task_ids.join(", "), trainer.config.loss_mode);
    run_pretraining(
        &mut trainer,
        &ds,
        &stats,
        &RunOptions {
            out_dir: Some(out.to_path_buf()),
            stop_after: None,
        },
    )?;
    Ok(PretrainSummary {
        checkpoint: out.join(crate::pretrain::FINAL_CHECKPOINT),
        task_ids,
        loss_mode: trainer.config.loss_mode,
        epochs: trainer.epoch,
        final_loss: trainer.log.epochs.last().map(|e| e.total_loss),
    })
}

/// `name=path` or a bare path; bare paths are named after their directory.
pub fn checkpoint_id(spec: &str) -> (String, PathBuf) {
    if let Some((name, path)) = spec.split_once('=') {
        return (name.to_string(), PathBuf::from(path));
    }
    let p = PathBuf::from(spec);
    let name = p
        .parent()
        .and_then(|d| d.file_name())
        .or_else(|| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string());
    (name, p)
}

#[derive(Clone, Debug, Default)]
pub struct EvalOverrides {
    pub mode: Option<EvalMode>,
    pub sweep: bool,
    pub tasks: Option<Vec<TaskKind>>,
    pub jobs: Option<usize>,
}

pub fn resolve_eval(cfg: &mut ExperimentConfig, o: &EvalOverrides) {
    if let Some(m) = o.mode {
        cfg.eval.mode = m;
    }
    if o.sweep {
        cfg.eval.sweep = true;
    }
    if let Some(t) = &o.tasks {
        cfg.eval.tasks = t.clone();
    }
    if let Some(j) = o.jobs {
        cfg.eval.jobs = j;
    }
    cfg.eval.probe.mode = match cfg.eval.mode {
        EvalMode::Lp => ProbeMode::Lp,
        EvalMode::Ft | EvalMode::FtSeg => ProbeMode::Ft,
    };
}

enum Job {
    Probe { ck: usize, task: TaskKind, seed: u64 },
    FineTune { ck: usize, task: TaskKind, seed: u64 },
    Sweep { ck: usize, task: TaskKind },
    Segment { ck: usize, seed: u64 },
}

/// Run every evaluation job implied by the config for the given checkpoints
/// (`name=path` or path) against the downstream dataset in `data`. Reports are
/// appended to the results store in `out`, at most `jobs` at a time.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoints: &[String], data: &Path, out: &Path) -> Result<Vec<MetricReport>> {
    let e = &cfg.eval;
    e.probe.validate()?;
    if checkpoints.is_empty() {
        return Err(Error::Config("eval needs at least one --checkpoint".into()));
    }
    if e.jobs == 0 {
        return Err(Error::Config("jobs must be positive".into()));
    }
    let ds = Dataset::open(data)?;
    let stats = dataset_stats(&ds, "train")?;
    let mut encoders = Vec::new();
    for spec in checkpoints {
        let (id, path) = checkpoint_id(spec);
        encoders.push(EvalEncoder::from_checkpoint(&load_checkpoint(&path)?, &id)?);
    }
    let mut by_size: BTreeMap<usize, Arc<DownstreamData>> = BTreeMap::new();
    for enc in &encoders {
        let s = enc.config().image_size;
        if let std::collections::btree_map::Entry::Vacant(v) = by_size.entry(s) {
            v.insert(Arc::new(DownstreamData::load(&ds, &stats, s)?));
        }
    }
    fs::create_dir_all(out).map_err(|err| Error::io(out, err))?;
    write_provenance(out, cfg)?;

    let classification: Vec<TaskKind> = e.tasks.iter().copied().filter(|t| *t != TaskKind::Segmentation).collect();
    let mut jobs = Vec::new();
    for ck in 0..encoders.len() {
        match (e.mode, e.sweep) {
            (EvalMode::Lp, true) => jobs.extend(classification.iter().map(|&task| Job::Sweep { ck, task })),
            (EvalMode::Lp, false) => {
                for &task in &classification {
                    jobs.extend(e.seeds.iter().map(|&seed| Job::Probe { ck, task, seed }));
                }
            }
            (EvalMode::Ft, _) => {
                for &task in &classification {
                    jobs.extend(e.seeds.iter().map(|&seed| Job::FineTune { ck, task, seed }));
                }
            }
            (EvalMode::FtSeg, _) => jobs.extend(e.seeds.iter().map(|&seed| Job::Segment { ck, seed })),
        }
    }
    let seg_dir = out.join("segmenters");
    let run = |job: &Job| -> Result<Vec<MetricReport>> {
        let data_for = |ck: usize| by_size[&encoders[ck].config().image_size].clone();
        let probe = |seed: u64| ProbeConfig {
            seed,
            ..e.probe.clone()
        };
        let tag = |mut r: MetricReport, seed: u64| {
            r.seed = seed;
            r
        };
        match *job {
            Job::Probe { ck, task, seed } => {
                let t = data_for(ck).task(task, e.presence);
                Ok(vec![tag(linear_probe(&encoders[ck], &t, &probe(seed))?.report, seed)])
            }
            Job::FineTune { ck, task, seed } => {
                let t = data_for(ck).task(task, e.presence);
                Ok(vec![tag(fine_tune_classifier(&encoders[ck], &t, &probe(seed))?.0.report, seed)])
            }
            Job::Sweep { ck, task } => {
                let t = data_for(ck).task(task, e.presence);
                label_efficiency_sweep(std::slice::from_ref(&encoders[ck]), &t, &e.fractions, &e.seeds, &e.probe)
            }
            Job::Segment { ck, seed } => {
                let t = data_for(ck).task(TaskKind::Segmentation, e.presence);
                let o = fine_tune_segmenter_two_phase(&encoders[ck], &t, &probe(seed))?;
                fs::create_dir_all(&seg_dir).map_err(|err| Error::io(&seg_dir, err))?;
                let id = &encoders[ck].id;
                save_checkpoint(&seg_dir.join(format!("{id}_seed{seed}_decoder-only.ckpt")), &o.phase1_checkpoint)?;
                save_checkpoint(&seg_dir.join(format!("{id}_seed{seed}_full.ckpt")), &o.phase2_checkpoint)?;
                Ok(vec![tag(o.phase1, seed), tag(o.phase2, seed)])
            }
        }
    };
    let results = run_bounded(&jobs, e.jobs, run)?;
    let store = ResultsStore::new(out);
    store.append(&results)?;
    Ok(results)
}

/// Run `f` over `items` on up to `jobs` threads; results keep item order.
fn run_bounded<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<Vec<R>> + Sync) -> Result<Vec<R>> {
    let next = Mutex::new(0usize);
    let slots: Vec<Mutex<Option<Result<Vec<R>>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()).max(1) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap_or_else(|p| p.into_inner());
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap_or_else(|p| p.into_inner()) = Some(r);
            });
        }
    });
    let mut out = Vec::new();
    for slot in slots {
        if let Some(r) = slot.into_inner().unwrap_or_else(|p| p.into_inner()) {
            out.extend(r?);
        }
    }
    Ok(out)
}

/// Load a pretraining checkpoint and return its id and trainer.
pub fn load_pretrainer(spec: &str) -> Result<(String, Pretrainer, Checkpoint)> {
    let (id, path) = checkpoint_id(spec);
    let ck = load_checkpoint(&path)?;
    Ok((id, Pretrainer::from_checkpoint(&ck)?, ck))
}

/// Band indices of red, green and blue in the optical stack.
pub const RGB_BANDS: [usize; 3] = [3, 2, 1];

/// Optical reconstruction decoder id.
pub const RECONSTRUCTION_TASK: &str = SENTINEL2;
