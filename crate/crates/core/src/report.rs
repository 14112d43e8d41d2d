//! Per-epoch records, run summaries and their on-disk forms.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::correction::{NoiseRound, Observer};
use crate::dataset::Dataset;
use crate::error::{Result, UlcError};
use crate::metrics::ClassAccuracy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Ssl,
    Ce,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub test_acc: f64,
    /// Clean-probability AUC against the true noise mask.
    pub auc: Option<f64>,
    pub minority_acc: Option<f64>,
    pub majority_acc: Option<f64>,
    pub labeled_fraction: Option<f64>,
    pub per_class_acc: Vec<Option<f64>>,
}

impl EpochRecord {
    pub fn new(
        epoch: usize,
        phase: Phase,
        train_loss: f64,
        acc: &ClassAccuracy,
        auc: Option<f64>,
        labeled_fraction: Option<f64>,
    ) -> Self {
        EpochRecord {
            epoch,
            phase,
            train_loss,
            test_acc: acc.overall,
            auc,
            minority_acc: acc.minority,
            majority_acc: acc.majority,
            labeled_fraction,
            per_class_acc: acc.per_class.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub epochs: Vec<EpochRecord>,
    pub best_acc: f64,
    pub best_epoch: usize,
    pub last_acc: f64,
    pub final_auc: Option<f64>,
    pub per_class_acc: Vec<Option<f64>>,
    pub minority_acc: Option<f64>,
    pub majority_acc: Option<f64>,
    /// Left out unless explicitly requested, so reports stay reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

impl Report {
    pub fn from_epochs(method: &str, seed: u64, config: serde_json::Value, epochs: Vec<EpochRecord>) -> Result<Self> {
        let last = epochs
            .last()
            .ok_or_else(|| UlcError::InsufficientData("report needs at least one epoch".into()))?;
        let (best_epoch, best_acc) = epochs
            .iter()
            .map(|r| (r.epoch, r.test_acc))
            .fold((0, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
        Ok(Report {
            method: method.to_string(),
            seed,
            config,
            best_acc,
            best_epoch,
            last_acc: last.test_acc,
            final_auc: epochs.iter().rev().find_map(|r| r.auc),
            per_class_acc: last.per_class_acc.clone(),
            minority_acc: last.minority_acc,
            majority_acc: last.majority_acc,
            wall_clock_seconds: None,
            epochs,
        })
    }

    pub fn best_last_gap(&self) -> f64 {
        self.best_acc - self.last_acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = UlcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(UlcError::Config(format!("unknown report format `{s}` (json, csv)"))),
        }
    }
}

#[derive(Serialize)]
struct CsvRow {
    epoch: usize,
    phase: Phase,
    train_loss: f64,
    test_acc: f64,
    auc: Option<f64>,
    minority_acc: Option<f64>,
    majority_acc: Option<f64>,
    labeled_fraction: Option<f64>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        if !dir.is_dir() {
            return Err(UlcError::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "directory does not exist"),
            ));
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| UlcError::io(path, e))
}

fn write_json(report: &Report, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, report)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| UlcError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> UlcError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => UlcError::io(path, io),
        other => UlcError::Contract(format!("csv encoding: {other:?}")),
    }
}

/// Sibling of a CSV report that receives the JSON summary.
pub fn summary_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("summary.json")
}

/// `Json`: the whole report. `Csv`: the per-epoch table at `path` plus the
/// JSON summary at [`summary_path`].
pub fn emit_report(report: &Report, path: &Path, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Json => write_json(report, path),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(create(path)?);
            for r in &report.epochs {
                w.serialize(CsvRow {
                    epoch: r.epoch,
                    phase: r.phase,
                    train_loss: r.train_loss,
                    test_acc: r.test_acc,
                    auc: r.auc,
                    minority_acc: r.minority_acc,
                    majority_acc: r.majority_acc,
                    labeled_fraction: r.labeled_fraction,
                })
                .map_err(|e| csv_error(path, e))?;
            }
            w.flush().map_err(|e| UlcError::io(path, e))?;
            write_json(report, &summary_path(path))
        }
    }
}

pub fn load_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path).map_err(|e| UlcError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes each epoch record as one JSON line.
pub struct JsonLinesLog<W: Write> {
    out: W,
}

impl<W: Write> JsonLinesLog<W> {
    pub fn new(out: W) -> Self {
        JsonLinesLog { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> Observer for JsonLinesLog<W> {
    fn on_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        writeln!(self.out).map_err(|e| UlcError::io("<log>", e))
    }
}

/// Writes `diagnostics_epoch_NNN.csv` into a directory for every noise
/// round: one row per sample and network.
pub struct DiagnosticsDump {
    dir: PathBuf,
}

#[derive(Serialize)]
struct DiagnosticRow {
    sample_id: usize,
    network: usize,
    observed_label: usize,
    loss: f64,
    epsilon: f64,
    p_loss: f64,
    omega: f64,
    is_noisy_truth: bool,
}

impl DiagnosticsDump {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| UlcError::io(&dir, e))?;
        Ok(DiagnosticsDump { dir })
    }

    pub fn path_for(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("diagnostics_epoch_{epoch:03}.csv"))
    }
}

impl Observer for DiagnosticsDump {
    fn on_round(&mut self, round: &NoiseRound, train: &Dataset) -> Result<()> {
        let path = self.path_for(round.epoch);
        let mut w = csv::Writer::from_writer(create(&path)?);
        for (k, net) in round.nets.iter().enumerate() {
            for i in 0..train.len() {
                w.serialize(DiagnosticRow {
                    sample_id: i,
                    network: k + 1,
                    observed_label: train.noisy_labels[i],
                    loss: net.model.normalized_losses[i],
                    epsilon: net.epsilon[i],
                    p_loss: net.model.p_loss[i],
                    omega: net.model.omega[i],
                    is_noisy_truth: train.is_noisy[i],
                })
                .map_err(|e| csv_error(&path, e))?;
            }
        }
        w.flush().map_err(|e| UlcError::io(&path, e))
    }
}

/// Forwards every hook to each observer in turn.
pub struct Fanout<'a>(pub Vec<&'a mut dyn Observer>);

impl Observer for Fanout<'_> {
    fn on_round(&mut self, round: &NoiseRound, train: &Dataset) -> Result<()> {
        self.0.iter_mut().try_for_each(|o| o.on_round(round, train))
    }

    fn on_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        self.0.iter_mut().try_for_each(|o| o.on_epoch(record))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize, acc: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            phase: if epoch < 2 { Phase::Warmup } else { Phase::Ssl },
            train_loss: 0.5 / (epoch + 1) as f64,
            test_acc: acc,
            auc: (epoch >= 2).then_some(0.9),
            minority_acc: Some(acc - 0.1),
            majority_acc: Some(acc + 0.1),
            labeled_fraction: (epoch >= 2).then_some(0.45),
            per_class_acc: vec![Some(acc - 0.1), None, Some(acc + 0.1)],
        }
    }

    fn sample() -> Report {
        let epochs = vec![record(0, 0.5), record(1, 0.8), record(2, 0.7), record(3, 0.75)];
        Report::from_epochs("ulc", 7, serde_json::json!({"lr": 0.02}), epochs).unwrap()
    }

    #[test]
    fn best_is_max_over_epochs() {
        let r = sample();
        assert_eq!(r.best_acc, 0.8);
        assert_eq!(r.best_epoch, 1);
        assert_eq!(r.last_acc, 0.75);
        assert!((r.best_last_gap() - 0.05).abs() < 1e-12);
        assert_eq!(r.final_auc, Some(0.9));
    }

    #[test]
    fn json_round_trip_and_stable_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        let r = sample();
        emit_report(&r, &p, ReportFormat::Json).unwrap();
        let first = fs::read(&p).unwrap();
        assert_eq!(load_report(&p).unwrap(), r);
        emit_report(&r, &p, ReportFormat::Json).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
    }

    #[test]
    fn csv_has_one_row_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        emit_report(&sample(), &p, ReportFormat::Csv).unwrap();
        let mut rdr = csv::Reader::from_path(&p).unwrap();
        assert_eq!(rdr.records().count(), 4);
        assert!(summary_path(&p).exists());
    }

    #[test]
    fn missing_directory_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        let err = emit_report(&sample(), &missing.join("r.json"), ReportFormat::Json).unwrap_err();
        match err {
            UlcError::Io { path, .. } => assert_eq!(path, missing),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn json_lines_log_writes_one_object_per_epoch() {
        let mut log = JsonLinesLog::new(Vec::new());
        log.on_epoch(&record(0, 0.5)).unwrap();
        log.on_epoch(&record(2, 0.7)).unwrap();
        let text = String::from_utf8(log.into_inner()).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        for key in [
            "epoch",
            "test_acc",
            "auc",
            "minority_acc",
            "majority_acc",
            "labeled_fraction",
        ] {
            assert!(lines[1].get(key).is_some(), "{key}");
        }
    }
}
