//! Append-only CSV metrics log with a `#`-prefixed header block.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 8] = ["step", "epoch", "phase", "margin", "loss", "train_acc", "eval_acc", "wall_time"];

/// Which rows a metrics line belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Train,
    /// Standard-split evaluation.
    Test,
    Familiar,
    Novel,
}

impl RowKind {
    pub fn name(self) -> &'static str {
        match self {
            RowKind::Train => "train",
            RowKind::Test => "test",
            RowKind::Familiar => "familiar",
            RowKind::Novel => "novel",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [RowKind::Train, RowKind::Test, RowKind::Familiar, RowKind::Novel]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub kind: RowKind,
    pub margin: f64,
    pub loss: f64,
    pub train_acc: Option<f64>,
    pub eval_acc: Option<f64>,
    pub wall_time: f64,
}

impl MetricsRow {
    fn record(&self) -> [String; 8] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.step.to_string(),
            self.epoch.to_string(),
            self.kind.name().to_string(),
            self.margin.to_string(),
            self.loss.to_string(),
            opt(self.train_acc),
            opt(self.eval_acc),
            format!("{:.3}", self.wall_time),
        ]
    }

    fn from_record(r: &csv::StringRecord) -> Result<Self> {
        let bad = || Error::ConfigInvalid(format!("malformed metrics row {r:?}"));
        let f = |i: usize| -> Result<f64> { r.get(i).ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let opt = |i: usize| -> Result<Option<f64>> {
            match r.get(i).ok_or_else(bad)? {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| bad()),
            }
        };
        Ok(MetricsRow {
            step: r.get(0).ok_or_else(bad)?.parse().map_err(|_| bad())?,
            epoch: r.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?,
            kind: RowKind::parse(r.get(2).ok_or_else(bad)?).ok_or_else(bad)?,
            margin: f(3)?,
            loss: f(4)?,
            train_acc: opt(5)?,
            eval_acc: opt(6)?,
            wall_time: f(7)?,
        })
    }

    /// Whether the row was written before a checkpoint taken after `step`
    /// optimizer updates: training rows carry the 0-based update index,
    /// evaluation rows the number of completed updates.
    pub fn precedes_checkpoint(&self, step: u64) -> bool {
        match self.kind {
            RowKind::Train => self.step < step,
            _ => self.step <= step,
        }
    }
}

pub struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::io(format!("metrics file {}", path.display()), e)
}

impl MetricsLog {
    /// Starts a new file: header block with `version` and the config echo,
    /// then the column names.
    pub fn create(path: &Path, version: &str, config: &str) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        }
        let mut f = File::create(path).map_err(|e| io(path, e))?;
        let mut head = format!("# qcaps metrics\n# version: {version}\n# config:\n");
        for line in config.lines() {
            head.push_str(&format!("#   {line}\n"));
        }
        head.push_str(&COLUMNS.join(","));
        head.push('\n');
        f.write_all(head.as_bytes()).map_err(|e| io(path, e))?;
        Self::append_to(path)
    }

    fn append_to(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().append(true).open(path).map_err(|e| io(path, e))?;
        Ok(MetricsLog {
            path: path.to_path_buf(),
            writer: csv::WriterBuilder::new().has_headers(false).from_writer(f),
        })
    }

    /// Reopens an existing log after resuming from a checkpoint at `step`,
    /// dropping rows written after that checkpoint. Returns the log and the
    /// last wall time kept.
    pub fn resume(path: &Path, step: u64) -> Result<(Self, f64)> {
        let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
        let mut kept = String::new();
        let mut wall = 0.0;
        let mut seen_columns = false;
        for line in BufReader::new(text.as_bytes()).lines() {
            let line = line.map_err(|e| io(path, e))?;
            if line.starts_with('#') || !seen_columns {
                seen_columns |= !line.starts_with('#');
                kept.push_str(&line);
                kept.push('\n');
                continue;
            }
            let rec = csv::StringRecord::from(line.split(',').collect::<Vec<_>>());
            let row = MetricsRow::from_record(&rec)?;
            if row.precedes_checkpoint(step) {
                wall = row.wall_time;
                kept.push_str(&line);
                kept.push('\n');
            }
        }
        std::fs::write(path, kept).map_err(|e| io(path, e))?;
        Ok((Self::append_to(path)?, wall))
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer
            .write_record(row.record())
            .map_err(|e| Error::ConfigInvalid(format!("metrics file {}: {e}", self.path.display())))?;
        self.writer.flush().map_err(|e| io(&self.path, e))
    }
}

/// Header lines (without `#`) and rows of a metrics file.
pub fn read_metrics(path: &Path) -> Result<(Vec<String>, Vec<MetricsRow>)> {
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    let header = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .map(|l| l.trim_start_matches('#').trim().to_string())
        .collect();
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let rows = reader
        .records()
        .map(|r| MetricsRow::from_record(&r.map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?))
        .collect::<Result<Vec<_>>>()?;
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64, kind: RowKind) -> MetricsRow {
        MetricsRow {
            step,
            epoch: 0,
            kind,
            margin: 0.25,
            loss: 0.5,
            train_acc: (kind == RowKind::Train).then_some(0.5),
            eval_acc: (kind != RowKind::Train).then_some(0.75),
            wall_time: step as f64,
        }
    }

    #[test]
    fn write_read_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut log = MetricsLog::create(&path, "0.1.0", "seed = 1\nepochs = 2").unwrap();
        for r in [row(0, RowKind::Train), row(1, RowKind::Train), row(2, RowKind::Familiar), row(2, RowKind::Train)] {
            log.append(&r).unwrap();
        }
        drop(log);
        let (header, rows) = read_metrics(&path).unwrap();
        assert!(header.iter().any(|h| h == "seed = 1"));
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[2], row(2, RowKind::Familiar));
        let (mut log, wall) = MetricsLog::resume(&path, 2).unwrap();
        assert_eq!(wall, 2.0);
        log.append(&row(2, RowKind::Train)).unwrap();
        drop(log);
        assert_eq!(read_metrics(&path).unwrap().1, rows);
    }
}
