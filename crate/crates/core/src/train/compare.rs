//! Multi-seed comparisons and training-cost measurement.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use super::{time_training, train, ScenarioMetrics, TrainConfig, TrainError};
use crate::data::{FeatureSchema, SplitDataset};
use crate::model::ModelConfig;

/// One named configuration in a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Test metrics of one (experiment, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub experiment: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub test: Vec<ScenarioMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub experiment: String,
    /// 1-based.
    pub scenario: usize,
    pub auc_mean: Option<f64>,
    pub auc_std: Option<f64>,
    pub logloss_mean: f64,
    pub logloss_std: f64,
    /// Relative AUC change vs the first experiment, in percent.
    pub auc_change_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub experiments: Vec<String>,
    pub seeds: Vec<u64>,
    pub scenarios: usize,
    pub cells: Vec<CellResult>,
    pub rows: Vec<ComparisonRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ComparisonTable {
    /// Test AUC of `experiment` in 0-based `scenario`, one entry per seed in
    /// seed order (`None` where undefined).
    pub fn auc_per_seed(&self, experiment: usize, scenario: usize) -> Vec<Option<f64>> {
        self.seeds
            .iter()
            .map(|&seed| {
                self.cells
                    .iter()
                    .find(|c| c.experiment == experiment && c.seed == seed)
                    .and_then(|c| c.test[scenario].auc)
            })
            .collect()
    }

    pub fn row(&self, experiment: usize, scenario: usize) -> &ComparisonRow {
        &self.rows[experiment * self.scenarios + scenario]
    }

    fn build(experiments: Vec<String>, seeds: Vec<u64>, scenarios: usize, mut cells: Vec<CellResult>) -> Self {
        cells.sort_by_key(|c| (c.experiment, c.seed));
        let mut table = Self {
            experiments,
            seeds,
            scenarios,
            cells,
            rows: Vec::new(),
        };
        for e in 0..table.experiments.len() {
            for m in 0..scenarios {
                let aucs: Vec<f64> = table.auc_per_seed(e, m).into_iter().flatten().collect();
                let losses: Vec<f64> = table
                    .cells
                    .iter()
                    .filter(|c| c.experiment == e)
                    .map(|c| c.test[m].logloss)
                    .collect();
                let (auc_mean, auc_std) = if aucs.is_empty() {
                    (None, None)
                } else {
                    let (a, s) = mean_std(&aucs);
                    (Some(a), Some(s))
                };
                let (logloss_mean, logloss_std) = mean_std(&losses);
                table.rows.push(ComparisonRow {
                    experiment: table.experiments[e].clone(),
                    scenario: m + 1,
                    auc_mean,
                    auc_std,
                    logloss_mean,
                    logloss_std,
                    auc_change_pct: None,
                });
            }
        }
        for i in 0..table.rows.len() {
            let base = table.rows[i % scenarios].auc_mean;
            if let (Some(a), Some(b)) = (table.rows[i].auc_mean, base) {
                table.rows[i].auc_change_pct = Some(if a == b { 0.0 } else { (a - b) / b * 100.0 });
            }
        }
        table
    }

    /// CSV with one row per (experiment, scenario). The `table` column holds
    /// the AUC with its relative change in brackets, e.g. `0.6014 (-0.15%)`.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "experiment",
            "scenario",
            "auc_mean",
            "auc_std",
            "logloss_mean",
            "logloss_std",
            "auc_change_pct",
            "table",
        ])?;
        let opt = |v: Option<f64>, p: usize| v.map_or("N/A".to_string(), |x| format!("{x:.p$}"));
        for (i, r) in self.rows.iter().enumerate() {
            let cell = match (r.auc_mean, r.auc_change_pct) {
                (Some(a), _) if i < self.scenarios => format!("{a:.4}"),
                (Some(a), Some(c)) => format!("{a:.4} ({c:+.2}%)"),
                _ => "N/A".into(),
            };
            out.write_record([
                r.experiment.clone(),
                r.scenario.to_string(),
                opt(r.auc_mean, 6),
                opt(r.auc_std, 6),
                format!("{:.6}", r.logloss_mean),
                format!("{:.6}", r.logloss_std),
                opt(r.auc_change_pct, 2),
                cell,
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Trains every experiment under every seed (cells run in parallel on the
/// rayon pool) and tabulates test metrics. Each cell's `train.seed` is
/// replaced by the seed being run.
pub fn compare(
    data: &SplitDataset,
    schema: &FeatureSchema,
    experiments: &[Experiment],
    seeds: &[u64],
) -> Result<ComparisonTable, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config("compare needs at least one seed".into()));
    }
    if experiments.is_empty() {
        return Err(TrainError::Config("compare needs at least one experiment".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..experiments.len())
        .flat_map(|e| seeds.iter().map(move |&s| (e, s)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(e, seed)| {
            let exp = &experiments[e];
            let cfg = TrainConfig {
                seed,
                ..exp.train.clone()
            };
            log::info!("compare: {} seed {seed}", exp.name);
            let out = train(data, schema, &exp.model, &cfg)?;
            Ok(CellResult {
                experiment: e,
                seed,
                best_epoch: out.report.best_epoch,
                test: out.report.final_metrics.test,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(ComparisonTable::build(
        experiments.iter().map(|e| e.name.clone()).collect(),
        seeds.to_vec(),
        schema.scenarios,
        cells,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadReport {
    pub base_seconds: Vec<f64>,
    pub optmsm_seconds: Vec<f64>,
    pub base_median: f64,
    pub optmsm_median: f64,
    /// `(optmsm − base) / base` of the medians.
    pub ratio: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Relative training-time overhead of `optmsm` over `base`, each timed
/// `runs` times over `epochs` epochs with runs interleaved.
pub fn measure_overhead(
    data: &SplitDataset,
    schema: &FeatureSchema,
    base: (&ModelConfig, &TrainConfig),
    optmsm: (&ModelConfig, &TrainConfig),
    epochs: usize,
    runs: usize,
) -> Result<OverheadReport, TrainError> {
    if base.1.batch_size != optmsm.1.batch_size {
        return Err(TrainError::Config(format!(
            "batch sizes differ: {} vs {}",
            base.1.batch_size, optmsm.1.batch_size
        )));
    }
    if runs == 0 || epochs == 0 {
        return Err(TrainError::Config("overhead needs at least one run and one epoch".into()));
    }
    let mut base_seconds = Vec::new();
    let mut optmsm_seconds = Vec::new();
    for _ in 0..runs {
        base_seconds.push(time_training(&data.train, schema, base.0, base.1, epochs)?);
        optmsm_seconds.push(time_training(&data.train, schema, optmsm.0, optmsm.1, epochs)?);
    }
    let base_median = median(&base_seconds);
    let optmsm_median = median(&optmsm_seconds);
    Ok(OverheadReport {
        base_seconds,
        optmsm_seconds,
        base_median,
        optmsm_median,
        ratio: (optmsm_median - base_median) / base_median,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(experiment: usize, seed: u64, aucs: &[f64]) -> CellResult {
        CellResult {
            experiment,
            seed,
            best_epoch: 1,
            test: aucs
                .iter()
                .enumerate()
                .map(|(m, &a)| ScenarioMetrics {
                    scenario: m + 1,
                    count: 5,
                    auc: Some(a),
                    logloss: 0.4,
                })
                .collect(),
        }
    }

    #[test]
    fn self_comparison_has_zero_change() {
        let cells = vec![cell(0, 0, &[0.6, 0.7]), cell(1, 0, &[0.6, 0.7])];
        let t = ComparisonTable::build(vec!["a".into(), "a".into()], vec![0], 2, cells);
        assert_eq!(t.row(1, 0).auc_change_pct, Some(0.0));
        assert_eq!(t.row(1, 1).auc_change_pct, Some(0.0));
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("0.7000 (+0.00%)"));
    }

    #[test]
    fn decrement_and_spread() {
        let cells = vec![
            cell(0, 0, &[0.60]),
            cell(0, 1, &[0.62]),
            cell(1, 0, &[0.59]),
            cell(1, 1, &[0.61]),
        ];
        let t = ComparisonTable::build(vec!["full".into(), "w/o".into()], vec![0, 1], 1, cells);
        let r = t.row(1, 0);
        assert!((r.auc_mean.unwrap() - 0.60).abs() < 1e-12);
        assert!((r.auc_change_pct.unwrap() + 100.0 / 61.0).abs() < 1e-9);
        assert!((t.row(0, 0).auc_std.unwrap() - 0.02f64.hypot(0.0) / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
