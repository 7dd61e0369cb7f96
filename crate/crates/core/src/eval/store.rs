//! Metric records, appended to `results.csv` and upserted into `results.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSON: &str = "results.json";
const CSV_HEADER: &str = "checkpoint,task,mode,metric,split,fraction,seed,value";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub checkpoint: String,
    pub task: String,
    pub mode: String,
    pub metric: String,
    pub split: String,
    pub fraction: f64,
    pub seed: u64,
    pub value: f64,
}

impl MetricReport {
    /// `(checkpoint, task, mode, fraction, seed)`.
    pub fn key(&self) -> String {
        format!("{}|{}|{}|{}|{}", self.checkpoint, self.task, self.mode, self.fraction, self.seed)
    }

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.checkpoint, self.task, self.mode, self.metric, self.split, self.fraction, self.seed, self.value
        )
    }
}

#[derive(Clone, Debug)]
pub struct ResultsStore {
    dir: PathBuf,
}

impl ResultsStore {
    pub fn new(dir: &Path) -> Self {
        ResultsStore { dir: dir.to_path_buf() }
    }

    pub fn csv_path(&self) -> PathBuf {
        self.dir.join(RESULTS_CSV)
    }

    pub fn json_path(&self) -> PathBuf {
        self.dir.join(RESULTS_JSON)
    }

    pub fn load(&self) -> Result<BTreeMap<String, MetricReport>> {
        let p = self.json_path();
        if !p.exists() {
            return Ok(BTreeMap::new());
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn append(&self, reports: &[MetricReport]) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let csv = self.csv_path();
        let fresh = !csv.exists();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&csv)
            .map_err(|e| Error::io(&csv, e))?;
        let mut text = String::new();
        if fresh {
            text.push_str(CSV_HEADER);
            text.push('\n');
        }
        for r in reports {
            text.push_str(&r.csv_row());
            text.push('\n');
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&csv, e))?;
        let mut all = self.load()?;
        for r in reports {
            all.insert(r.key(), r.clone());
        }
        let json = self.json_path();
        fs::write(&json, serde_json::to_string_pretty(&all)?).map_err(|e| Error::io(&json, e))
    }
}
