//! Per-epoch metrics as comma-separated rows.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const HEADER: &str = "epoch,split,loss_ce,loss_kd_penult,loss_kd_inter,top1,wall_seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub loss_ce: f64,
    pub loss_kd_penult: f64,
    pub loss_kd_inter: f64,
    pub top1: f64,
    pub wall_seconds: f64,
}

impl MetricsRecord {
    fn validate(&self) -> Result<()> {
        let fields: [(&'static str, f64); 5] = [
            ("loss_ce", self.loss_ce),
            ("loss_kd_penult", self.loss_kd_penult),
            ("loss_kd_inter", self.loss_kd_inter),
            ("top1", self.top1),
            ("wall_seconds", self.wall_seconds),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        if self.split.is_empty() || self.split.contains([',', '\n']) {
            return Err(Error::invalid(format!("bad split name {:?}", self.split)));
        }
        Ok(())
    }

    pub fn to_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            self.loss_ce,
            self.loss_kd_penult,
            self.loss_kd_inter,
            self.top1,
            self.wall_seconds
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("malformed metrics row {line:?}"));
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(MetricsRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            split: f[1].to_string(),
            loss_ce: num(f[2])?,
            loss_kd_penult: num(f[3])?,
            loss_kd_inter: num(f[4])?,
            top1: num(f[5])?,
            wall_seconds: num(f[6])?,
        })
    }
}

/// Appends validated rows to a file, flushing after each one.
#[derive(Debug)]
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
    last_epoch: BTreeMap<String, usize>,
}

impl MetricsWriter {
    /// Starts a fresh file containing only the header.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            file,
            last_epoch: BTreeMap::new(),
        })
    }

    /// Reopens an existing file for appending, resuming the epoch checks.
    pub fn append(path: &Path) -> Result<Self> {
        let existing = read_metrics(path)?;
        let mut last_epoch = BTreeMap::new();
        for r in existing {
            last_epoch.insert(r.split, r.epoch);
        }
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            file,
            last_epoch,
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        record.validate()?;
        if let Some(&prev) = self.last_epoch.get(&record.split) {
            if record.epoch <= prev {
                return Err(Error::invalid(format!(
                    "epoch {} after {prev} for split {:?}",
                    record.epoch, record.split
                )));
            }
        }
        writeln!(self.file, "{}", record.to_row())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        self.last_epoch.insert(record.split.clone(), record.epoch);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Format(format!(
            "{} lacks the metrics header",
            path.display()
        )));
    }
    lines.map(MetricsRecord::parse_row).collect()
}
