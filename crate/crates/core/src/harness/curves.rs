//! Per-epoch learning curves as CSV, for plotting runs side by side.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::TrainReport;
use crate::dataio::binary::{read_all, write_atomic};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayRow {
    pub run_id: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

pub fn curve_rows(report: &TrainReport) -> Vec<CurveRow> {
    report
        .epochs
        .iter()
        .map(|e| CurveRow {
            epoch: e.epoch,
            train_loss: e.train_loss,
            val_loss: e.val_loss,
            val_accuracy: e.val_accuracy,
            lr: e.lr,
        })
        .collect()
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

fn to_csv<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::State(format!("csv buffer: {e}")))
}

fn from_csv<R: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<Vec<R>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .map(|r| r.map_err(csv_error))
        .collect()
}

/// Writes `epoch,train_loss,val_loss,val_accuracy,lr`, one row per epoch.
pub fn export_curves(report: &TrainReport, path: impl AsRef<Path>) -> Result<()> {
    if report.epochs.is_empty() {
        return Err(Error::Validation("report has no epochs to export".into()));
    }
    write_atomic(path.as_ref(), &to_csv(&curve_rows(report))?)
}

/// Several runs in one file, distinguished by a leading `run_id` column.
pub fn export_overlay(runs: &[(&str, &TrainReport)], path: impl AsRef<Path>) -> Result<()> {
    if runs.is_empty() || runs.iter().any(|(_, r)| r.epochs.is_empty()) {
        return Err(Error::Validation("every overlaid run needs at least one epoch".into()));
    }
    let rows: Vec<OverlayRow> = runs
        .iter()
        .flat_map(|(id, r)| {
            curve_rows(r).into_iter().map(move |c| OverlayRow {
                run_id: id.to_string(),
                epoch: c.epoch,
                train_loss: c.train_loss,
                val_loss: c.val_loss,
                val_accuracy: c.val_accuracy,
                lr: c.lr,
            })
        })
        .collect();
    write_atomic(path.as_ref(), &to_csv(&rows)?)
}

pub fn read_curves(path: impl AsRef<Path>) -> Result<Vec<CurveRow>> {
    from_csv(&read_all(path.as_ref())?)
}

pub fn read_overlay(path: impl AsRef<Path>) -> Result<Vec<OverlayRow>> {
    from_csv(&read_all(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::{EpochRecord, RunStatus, TrainConfig};
    use crate::model::ModelConfig;

    fn report(epochs: usize, offset: f64) -> TrainReport {
        TrainReport {
            epochs: (1..=epochs)
                .map(|e| EpochRecord {
                    epoch: e,
                    train_loss: 0.7 / e as f64 + offset,
                    val_loss: 0.71 / (e as f64).sqrt() + offset,
                    val_accuracy: 0.5 + 0.1 * e as f64 / 3.0,
                    val_auc: None,
                    train_accuracy: None,
                    lr: 1e-6 * 0.9f64.powi(e as i32 / 2),
                    seconds: 0.25,
                })
                .collect(),
            best_epoch: epochs,
            best_val_loss: 0.4,
            test: None,
            status: RunStatus::MaxEpochs,
            lr_decays: Vec::new(),
            config_digest: String::new(),
            model_config: ModelConfig::default(),
            train_config: TrainConfig::default(),
            transfer: None,
        }
    }

    #[test]
    fn curves_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        let r = report(3, 0.0);
        export_curves(&r, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next(), Some("epoch,train_loss,val_loss,val_accuracy,lr"));
        let back = read_curves(&path).unwrap();
        for (row, e) in back.iter().zip(&r.epochs) {
            assert_eq!(row.epoch, e.epoch);
            for (a, b) in [
                (row.train_loss, e.train_loss),
                (row.val_loss, e.val_loss),
                (row.val_accuracy, e.val_accuracy),
                (row.lr, e.lr),
            ] {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12), "{a} vs {b}");
            }
        }
        assert!(matches!(
            export_curves(&report(0, 0.0), &path),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn overlay_distinguishes_runs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("overlay.csv");
        let (a, b) = (report(3, 0.0), report(5, 0.1));
        export_overlay(&[("scratch", &a), ("transfer", &b)], &path).unwrap();
        let rows = read_overlay(&path).unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows.iter().filter(|r| r.run_id == "scratch").count(), 3);
        assert_eq!(rows.iter().filter(|r| r.run_id == "transfer").count(), 5);
        assert_eq!(rows[3].epoch, 1);
        assert!((rows[3].val_loss - b.epochs[0].val_loss).abs() < 1e-12);
    }
}
