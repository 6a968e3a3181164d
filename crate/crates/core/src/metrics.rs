//! CSV output for training metrics and ablations.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::trainer::{EvalRecord, StepRecord};

fn joined<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join("|")
}

/// One row per optimizer step; multi-subnet fields are `|`-separated in
/// sampling order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRow {
    pub step: usize,
    pub stage: usize,
    pub lr: f64,
    pub k: usize,
    pub configs: String,
    pub task_losses: String,
    pub kd_losses: String,
    pub fd_losses: String,
    pub total_losses: String,
    pub scales: String,
    pub grad_norm: f64,
}

impl From<&StepRecord> for StepRow {
    fn from(r: &StepRecord) -> Self {
        StepRow {
            step: r.step,
            stage: r.stage,
            lr: r.lr,
            k: r.configs.len(),
            configs: joined(&r.configs),
            task_losses: joined(&r.task),
            kd_losses: joined(&r.kd),
            fd_losses: joined(&r.fd),
            total_losses: joined(&r.total),
            scales: joined(&r.scales),
            grad_norm: r.grad_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub config: String,
    pub loss: f64,
    pub accuracy: f64,
}

impl From<&EvalRecord> for EvalRow {
    fn from(r: &EvalRecord) -> Self {
        EvalRow {
            stage: r.stage,
            epoch: r.epoch,
            step: r.step,
            config: r.config.to_string(),
            loss: r.loss,
            accuracy: r.accuracy,
        }
    }
}

/// Gradient-scaling ablation: final losses of the extreme subnets.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GammaRow {
    pub seed: u64,
    pub grad_scaling: bool,
    pub gamma: f64,
    pub minnet_train_loss: f64,
    pub maxnet_train_loss: f64,
    pub minnet_val_loss: f64,
}

/// A point of a validation-loss curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub run: String,
    pub seed: u64,
    pub step: usize,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfigEvalRow {
    pub config: String,
    pub loss: f64,
    pub accuracy: f64,
}

impl ConfigEvalRow {
    pub fn new(c: &ArchConfig, loss: f64, accuracy: f64) -> Self {
        ConfigEvalRow {
            config: c.to_string(),
            loss,
            accuracy,
        }
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_csv(rows)?)?;
    Ok(())
}

pub fn step_rows(steps: &[StepRecord]) -> Vec<StepRow> {
    steps.iter().map(StepRow::from).collect()
}
