//! Training history and its line-delimited JSON files.
//!
//! `metrics.jsonl` holds one object per (epoch, scenario) plus the final
//! per-split metrics of the returned parameters. It contains nothing
//! time-dependent, so identical runs produce identical files. Wall-clock
//! seconds per epoch go to `timing.jsonl`.

use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::metrics::ScenarioMetrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLosses {
    /// Mean cross-entropy over the epoch's batches.
    pub l_msm: f64,
    /// Mean orthogonality loss (logged even when λ is zero).
    pub l_orth: f64,
    /// Mean of the combined per-batch loss.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub train: Option<TrainLosses>,
    pub valid: Vec<ScenarioMetrics>,
    pub mean_valid_auc: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub train: Vec<ScenarioMetrics>,
    pub valid: Vec<ScenarioMetrics>,
    pub test: Vec<ScenarioMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub lambda_effective: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub final_metrics: FinalMetrics,
}

impl MetricsReport {
    /// Mean seconds per training epoch.
    pub fn mean_epoch_seconds(&self) -> Option<f64> {
        let secs: Vec<f64> = self.history.iter().filter(|e| e.train.is_some()).map(|e| e.seconds).collect();
        (!secs.is_empty()).then(|| secs.iter().sum::<f64>() / secs.len() as f64)
    }
}

pub fn write_metrics_jsonl<W: Write>(mut w: W, report: &MetricsReport) -> std::io::Result<()> {
    let lambda = report.lambda_effective;
    for e in &report.history {
        let (l_msm, l_orth, loss) = match &e.train {
            Some(t) => (Some(t.l_msm), Some(t.l_orth), Some(t.loss)),
            None => (None, None, None),
        };
        for s in &e.valid {
            let rec = json!({
                "phase": "epoch",
                "epoch": e.epoch,
                "split": "valid",
                "scenario": s.scenario,
                "count": s.count,
                "auc": s.auc,
                "logloss": s.logloss,
                "l_msm": l_msm,
                "l_orth": l_orth,
                "lambda": lambda,
                "loss": loss,
            });
            writeln!(w, "{rec}")?;
        }
    }
    let f = &report.final_metrics;
    for (split, metrics) in [("train", &f.train), ("valid", &f.valid), ("test", &f.test)] {
        for s in metrics {
            let rec = json!({
                "phase": "final",
                "epoch": report.best_epoch,
                "split": split,
                "scenario": s.scenario,
                "count": s.count,
                "auc": s.auc,
                "logloss": s.logloss,
                "lambda": lambda,
            });
            writeln!(w, "{rec}")?;
        }
    }
    w.flush()
}

pub fn write_timing_jsonl<W: Write>(mut w: W, report: &MetricsReport) -> std::io::Result<()> {
    for e in report.history.iter().filter(|e| e.train.is_some()) {
        writeln!(w, "{}", json!({"epoch": e.epoch, "seconds": e.seconds}))?;
    }
    w.flush()
}
