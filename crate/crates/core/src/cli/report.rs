//! Static report artifacts: comparison grid, label-efficiency and
//! task-uncertainty curves, reconstruction image grids.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{dataset_stats, load_pretrainer, write_provenance, ExperimentConfig, RECONSTRUCTION_TASK, RGB_BANDS};
use crate::error::{Error, Result};
use crate::eval::{MetricReport, ResultsStore, TaskKind};
use crate::losses::TaskTarget;
use crate::masking::sample_mask;
use crate::nn::{Graph, PATCH_VAR_FLOOR};
use crate::pretrain::{collate, prepare_sample, Pretrainer, TrainLog};
use crate::synthgen::{Dataset, SampleSource};

pub const MISSING: &str = "—";

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Column pair per task: `(FT mode, LP mode)`. Segmentation maps its
/// full fine-tune and frozen-encoder endpoints onto the same pair.
fn modes_for(task: &str) -> (&'static str, &'static str) {
    if task == TaskKind::Segmentation.name() {
        ("seg-ft", "seg-frozen")
    } else {
        ("ft", "lp")
    }
}

/// Checkpoint × task grid with FT/LP sub-columns, full training set, mean
/// over seeds, in percent.
pub fn comparison_grid(reports: &[MetricReport]) -> String {
    let checkpoints: BTreeSet<&str> = reports.iter().map(|r| r.checkpoint.as_str()).collect();
    let order: Vec<&str> = TaskKind::ALL.iter().map(|k| k.name()).collect();
    let mut tasks: Vec<&str> = reports.iter().map(|r| r.task.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    tasks.sort_by_key(|t| order.iter().position(|o| o == t).unwrap_or(usize::MAX));
    let mut cells: BTreeMap<(&str, &str, &str), Vec<f64>> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.fraction == 1.0) {
        cells.entry((&r.checkpoint, &r.task, &r.mode)).or_default().push(r.value);
    }
    let mut s = String::from("| checkpoint |");
    for t in &tasks {
        let _ = write!(s, " {t} FT | {t} LP |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(2 * tasks.len()));
    s.push('\n');
    for ck in &checkpoints {
        let _ = write!(s, "| {ck} |");
        for t in &tasks {
            let (ft, lp) = modes_for(t);
            for m in [ft, lp] {
                match cells.get(&(*ck, *t, m)) {
                    Some(v) => {
                        let _ = write!(s, " {:.1} |", 100.0 * mean(v));
                    }
                    None => {
                        let _ = write!(s, " {MISSING} |");
                    }
                }
            }
        }
        s.push('\n');
    }
    s
}

/// Per task: checkpoint → `(fraction, mean LP value over seeds)`, only for
/// tasks probed at two or more fractions.
pub fn label_efficiency_series(reports: &[MetricReport]) -> BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>> {
    let mut acc: BTreeMap<(String, String), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.mode == "lp") {
        acc.entry((r.task.clone(), r.checkpoint.clone()))
            .or_default()
            .entry(r.fraction.to_bits())
            .or_default()
            .push(r.value);
    }
    let mut out: BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for ((task, ck), by_f) in acc {
        let mut pts: Vec<(f64, f64)> = by_f.iter().map(|(f, v)| (f64::from_bits(*f), mean(v))).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        out.entry(task).or_default().insert(ck, pts);
    }
    out.retain(|_, series| series.values().any(|p| p.len() >= 2));
    out
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Minimal SVG line chart.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)], log_x: bool) -> String {
    let (w, h, l, r, t, b) = (640.0, 400.0, 70.0, 170.0, 40.0, 50.0);
    let tx = |x: f64| if log_x { x.max(1e-12).log10() } else { x };
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(tx(x));
        x1 = x1.max(tx(x));
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let px = |x: f64| l + (tx(x) - x0) / (x1 - x0) * (w - l - r);
    let py = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{l}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        (w - r + l) / 2.0,
        h - b,
        w - r,
        h - b,
        h - b,
        (w - r + l) / 2.0,
        h - 12.0,
        (h - b + t) / 2.0,
        (h - b + t) / 2.0,
    );
    for k in 0..=4 {
        let y = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{y:.3}</text>",
            l - 6.0,
            py(y) + 4.0
        );
    }
    let xs: BTreeSet<u64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0.to_bits())).collect();
    for x in xs.into_iter().map(f64::from_bits) {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{x}</text>", px(x), h - b + 16.0);
    }
    for (i, (name, p)) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = p.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
        for &(x, y) in p {
            let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{c}\"/>", px(x), py(y));
        }
        let ly = t + 16.0 * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"3\" fill=\"{c}\"/><text x=\"{}\" y=\"{}\">{name}</text>",
            w - r + 10.0,
            ly,
            w - r + 26.0,
            ly + 5.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// `s_t` of every task against epoch.
pub fn uncertainty_curves(id: &str, log: &TrainLog) -> String {
    let mut by_task: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for e in &log.epochs {
        for t in &e.tasks {
            by_task.entry(t.task_id.clone()).or_default().push((e.epoch as f64 + 1.0, t.s_t));
        }
    }
    let series: Vec<(String, Vec<(f64, f64)>)> = by_task.into_iter().collect();
    line_chart(&format!("task uncertainty, {id}"), "epoch", "s_t", &series, false)
}

fn to_byte(v: f32) -> u8 {
    (((v + 2.5) / 5.0).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rows of `[input | masked input | reconstruction | target]` RGB panels for
/// the first `n` samples of the checkpoint's pretraining split. In the
/// reconstruction panel hidden cells come from the optical decoder and
/// visible cells from the input.
pub fn reconstruction_grid(trainer: &Pretrainer, source: &dyn SampleSource, stats: &crate::schema::BandStats, n: usize, seed: u64) -> Result<(u32, u32, Vec<u8>)> {
    let cfg = &trainer.config;
    let model = &trainer.model;
    let di = model
        .decoders
        .iter()
        .position(|d| d.task.task_id == RECONSTRUCTION_TASK)
        .ok_or_else(|| Error::Config(format!("checkpoint has no `{RECONSTRUCTION_TASK}` decoder")))?;
    let tasks = trainer.tasks();
    let reg = source.registry();
    let mut idx = source.split(&cfg.split).unwrap_or_else(|_| (0..source.len()).collect());
    idx.truncate(n.max(1));
    let grid = model.grid();
    let crop = cfg.crop_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for &i in &idx {
        let s = source.sample(i)?;
        if s.size < crop {
            return Err(Error::Config(format!("raster {} is smaller than the crop {crop}", s.size)));
        }
        let off = (s.size - crop) / 2;
        let mask = Arc::new(sample_mask(grid, cfg.masking_ratio, &mut rng)?);
        items.push(prepare_sample(&s, reg, stats, &tasks, (off, off, crop), Some(mask))?);
    }
    let batch = collate(&items, &tasks)?;
    let mut g = Graph::new();
    let x = g.constant(batch.input.clone());
    let preds = model.forward(&mut g, x, &batch.masks)?;
    let pred = g.value(preds.outputs[di]).data().to_vec();
    let TaskTarget::Pixel { values, valid } = &batch.targets[di] else {
        return Err(Error::InvalidState("optical target is not pixel-level".into()));
    };
    let (tv, vv) = (values.data(), valid.data());
    let input = batch.input.data();
    let (s, c, p) = (crop, batch.input.shape()[3], grid.patch_size);
    let tc = values.shape()[3];
    let hidden: Vec<Vec<bool>> = batch
        .masks
        .masks()
        .iter()
        .map(|m| (0..s * s).map(|q| m.masked[(q / s / p) * grid.side() + (q % s) / p]).collect())
        .collect();

    let mut recon = pred.clone();
    if cfg.patch_norm_optical {
        for b in 0..idx.len() {
            for gy in 0..grid.side() {
                for gx in 0..grid.side() {
                    let cells: Vec<usize> = (0..p * p)
                        .map(|k| b * s * s + (gy * p + k / p) * s + gx * p + k % p)
                        .filter(|&q| vv[q] != 0.0)
                        .collect();
                    if cells.is_empty() {
                        continue;
                    }
                    for ch in 0..tc {
                        let m = cells.iter().map(|&q| tv[q * tc + ch] as f64).sum::<f64>() / cells.len() as f64;
                        let var = cells.iter().map(|&q| (tv[q * tc + ch] as f64 - m).powi(2)).sum::<f64>() / cells.len() as f64;
                        let sd = var.max(PATCH_VAR_FLOOR as f64).sqrt();
                        for k in 0..p * p {
                            let q = b * s * s + (gy * p + k / p) * s + gx * p + k % p;
                            recon[q * tc + ch] = (pred[q * tc + ch] as f64 * sd + m) as f32;
                        }
                    }
                }
            }
        }
    }

    let gap = 4;
    let width = 4 * s + 3 * gap;
    let height = idx.len() * s + (idx.len() - 1) * gap;
    let mut img = vec![255u8; width * height * 3];
    for (b, hid) in hidden.iter().enumerate() {
        for q in 0..s * s {
            let (y, xx) = (q / s, q % s);
            let pix = b * s * s + q;
            let rgb_of = |src: &[f32], ch: usize| RGB_BANDS.map(|k| to_byte(src[pix * ch + k]));
            let panels = [
                rgb_of(input, c),
                if hid[q] { [128, 128, 128] } else { rgb_of(input, c) },
                if hid[q] { rgb_of(&recon, tc) } else { rgb_of(input, c) },
                rgb_of(tv, tc),
            ];
            for (k, px) in panels.iter().enumerate() {
                let o = ((b * (s + gap) + y) * width + k * (s + gap) + xx) * 3;
                img[o..o + 3].copy_from_slice(px);
            }
        }
    }
    Ok((width as u32, height as u32, img))
}

pub fn write_png(path: &Path, width: u32, height: u32, rgb: &[u8]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(f), width, height);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = enc.write_header().map_err(io)?;
    w.write_image_data(rgb).map_err(io)?;
    w.finish().map_err(io)
}

#[derive(Debug, Default)]
pub struct ReportSummary {
    pub files: Vec<PathBuf>,
    pub grid: String,
    pub curves_omitted: bool,
}

fn safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Render everything the results store in `results` and the optional
/// checkpoints (`name=path` or path) support into `out`. Reconstruction grids
/// need `data`, the dataset the checkpoints were pretrained on.
pub fn cmd_report(cfg: &ExperimentConfig, results: &Path, checkpoints: &[String], data: Option<&Path>, out: &Path) -> Result<ReportSummary> {
    let reports: Vec<MetricReport> = ResultsStore::new(results).load()?.into_values().collect();
    if reports.is_empty() && checkpoints.is_empty() {
        return Err(Error::Config(format!("results store in {} is empty", results.display())));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_provenance(out, cfg)?;
    let mut sum = ReportSummary::default();
    let mut md = String::from("# Results\n\n## Comparison (test split, full training set, %)\n\n");
    sum.grid = comparison_grid(&reports);
    md.push_str(&sum.grid);
    md.push_str("\n## Label efficiency\n\n");
    let series = label_efficiency_series(&reports);
    if series.is_empty() {
        sum.curves_omitted = true;
        md.push_str("No sweep results in the store; label-efficiency curves omitted.\n");
    }
    for (task, by_ck) in &series {
        let name = format!("label_efficiency_{}.svg", safe(task));
        let s: Vec<(String, Vec<(f64, f64)>)> = by_ck.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let p = out.join(&name);
        fs::write(&p, line_chart(&format!("{task}, linear probe"), "training fraction", "test metric", &s, true))
            .map_err(|e| Error::io(&p, e))?;
        let _ = writeln!(md, "![{task}]({name})\n");
        sum.files.push(p);
    }
    if !checkpoints.is_empty() {
        md.push_str("\n## Task uncertainty and reconstructions\n\n");
    }
    let dataset = data.map(Dataset::open).transpose()?;
    for spec in checkpoints {
        let (id, trainer, _) = load_pretrainer(spec)?;
        let name = format!("uncertainty_{}.svg", safe(&id));
        let p = out.join(&name);
        fs::write(&p, uncertainty_curves(&id, &trainer.log)).map_err(|e| Error::io(&p, e))?;
        let _ = writeln!(md, "![s_t {id}]({name})\n");
        sum.files.push(p);
        if let Some(ds) = &dataset {
            let stats = dataset_stats(ds, &trainer.config.split)?;
            let (w, h, rgb) = reconstruction_grid(&trainer, ds, &stats, cfg.report.reconstructions, trainer.config.seed)?;
            let name = format!("reconstruction_{}.png", safe(&id));
            let p = out.join(&name);
            write_png(&p, w, h, &rgb)?;
            let _ = writeln!(md, "Columns: input, masked input, reconstruction, target.\n\n![reconstruction {id}]({name})\n");
            sum.files.push(p);
        }
    }
    let p = out.join("report.md");
    fs::write(&p, md).map_err(|e| Error::io(&p, e))?;
    sum.files.push(p);
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(ck: &str, task: &str, mode: &str, fraction: f64, seed: u64, value: f64) -> MetricReport {
        MetricReport {
            checkpoint: ck.into(),
            task: task.into(),
            mode: mode.into(),
            metric: "accuracy".into(),
            split: "test".into(),
            fraction,
            seed,
            value,
        }
    }

    #[test]
    fn grid_two_by_two_with_gaps() {
        let r = vec![
            rep("a", "multi-class", "lp", 1.0, 0, 0.5),
            rep("a", "multi-class", "lp", 1.0, 1, 0.7),
            rep("a", "multi-label", "ft", 1.0, 0, 0.8),
            rep("b", "multi-class", "ft", 1.0, 0, 0.9),
            rep("b", "multi-class", "lp", 0.2, 0, 0.1),
        ];
        let g = comparison_grid(&r);
        let lines: Vec<&str> = g.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "| checkpoint | multi-class FT | multi-class LP | multi-label FT | multi-label LP |");
        assert_eq!(lines[2], format!("| a | {MISSING} | 60.0 | 80.0 | {MISSING} |"));
        assert_eq!(lines[3], format!("| b | 90.0 | {MISSING} | {MISSING} | {MISSING} |"));
    }

    #[test]
    fn curves_need_two_fractions() {
        let r = vec![rep("a", "multi-class", "lp", 1.0, 0, 0.5)];
        assert!(label_efficiency_series(&r).is_empty());
        let r = vec![
            rep("a", "multi-class", "lp", 1.0, 0, 0.5),
            rep("a", "multi-class", "lp", 0.05, 0, 0.3),
            rep("a", "multi-class", "lp", 0.05, 1, 0.4),
        ];
        let s = label_efficiency_series(&r);
        let pts = &s["multi-class"]["a"];
        assert_eq!(pts.len(), 2);
        assert!((pts[0].1 - 0.35).abs() < 1e-12);
        let svg = line_chart("t", "x", "y", &[("a".into(), pts.clone())], true);
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }
}
