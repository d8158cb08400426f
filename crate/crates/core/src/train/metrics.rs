use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::bce_term;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("AUC undefined: {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{scores} scores for {labels} labels")]
    Length { scores: usize, labels: usize },
}

/// Area under the ROC curve as the Mann–Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
/// Computed from average ranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their average.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let tied_pos = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        positive_rank_sum += avg_rank * tied_pos as f64;
        i = j;
    }
    let p = positives as f64;
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Mean clamped cross-entropy.
pub fn logloss(probs: &[f64], labels: &[u8]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| bce_term(p, y as f64))
        .sum::<f64>()
        / probs.len() as f64
}

/// AUC and logloss of one scenario on one split. `scenario` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub scenario: usize,
    pub count: usize,
    /// `None` when the scenario has a single label class.
    pub auc: Option<f64>,
    pub logloss: f64,
}

/// Per-scenario metrics for predictions over instances with scenario ids.
pub fn scenario_metrics(probs: &[f64], labels: &[u8], scenarios: &[usize], scenario_count: usize) -> Vec<ScenarioMetrics> {
    (0..scenario_count)
        .map(|m| {
            let (p, y): (Vec<f64>, Vec<u8>) = probs
                .iter()
                .zip(labels)
                .zip(scenarios)
                .filter(|(_, &s)| s == m)
                .map(|((&p, &y), _)| (p, y))
                .unzip();
            ScenarioMetrics {
                scenario: m + 1,
                count: p.len(),
                auc: auc(&p, &y).ok(),
                logloss: logloss(&p, &y),
            }
        })
        .collect()
}

/// Mean AUC over scenarios where it is defined.
pub fn mean_auc(metrics: &[ScenarioMetrics]) -> Option<f64> {
    let defined: Vec<f64> = metrics.iter().filter_map(|m| m.auc).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}
