//! Joint optimization of cross-entropy plus the weighted orthogonality loss,
//! per-scenario evaluation, early stopping, comparisons and timing.

mod adam;
mod compare;
mod metrics;
mod report;

pub use adam::{Adam, BETA1, BETA2, EPSILON};
pub use compare::{compare, measure_overhead, CellResult, ComparisonRow, ComparisonTable, Experiment, OverheadReport};
pub use metrics::{auc, logloss, mean_auc, scenario_metrics, MetricError, ScenarioMetrics};
pub use report::{write_metrics_jsonl, write_timing_jsonl, EpochRecord, FinalMetrics, MetricsReport, TrainLosses};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batch_indices, Dataset, FeatureSchema, Instance, SplitDataset};
use crate::model::{Ablations, Dropout, ForwardOutput, Model, ModelConfig, ModelError};
use crate::params::ParamStore;
use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite gradient in {param}[{index}]: {value}")]
    NonFiniteGradient { param: String, index: usize, value: f64 },
    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Diverged {
        epoch: usize,
        batch: usize,
        reason: String,
        /// The model and the parameters of the best epoch seen before the
        /// failure.
        model: Box<Model>,
        checkpoint: Box<ParamStore>,
    },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2_weight: f64,
    /// Dropout on tower-layer inputs during training.
    pub dropout_rate: f64,
    pub batch_size: usize,
    /// Weight of the orthogonality loss.
    pub lambda: f64,
    pub epochs: usize,
    /// Epochs without a new best mean validation AUC before stopping.
    pub patience: usize,
    pub seed: u64,
    pub ablations: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            l2_weight: 1e-6,
            dropout_rate: 0.1,
            batch_size: 256,
            lambda: 0.1,
            epochs: 8,
            patience: 3,
            seed: 0,
            ablations: Ablations::default(),
        }
    }
}

impl TrainConfig {
    /// λ as actually applied: zero under the `no_constraint` ablation.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablations.no_constraint {
            0.0
        } else {
            self.lambda
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.l2_weight >= 0.0 && self.l2_weight.is_finite()) {
            return bad(format!("l2_weight must be >= 0, got {}", self.l2_weight));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        Ok(())
    }
}

/// Mean clamped cross-entropy of predictions against 0/1 labels.
pub fn bce_loss(probs: &[f64], labels: &[u8]) -> f64 {
    logloss(probs, labels)
}

/// Records `L_msm + λ·L_orth` on the tape (just `L_msm` when there are no
/// contrastive pairs).
pub fn joint_loss(tape: &mut Tape, out: &ForwardOutput, lambda: f64) -> Result<Var, TensorError> {
    match out.l_orth {
        Some(o) => {
            let weighted = tape.scale(o, lambda);
            tape.add(out.l_msm, weighted)
        }
        None => Ok(out.l_msm),
    }
}

/// Result of a training run: the model, its best-validation parameters and
/// the full metrics history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub params: ParamStore,
    pub report: MetricsReport,
}

/// Per-scenario metrics of frozen parameters on a dataset.
pub fn evaluate(model: &Model, store: &ParamStore, data: &Dataset) -> Result<Vec<ScenarioMetrics>, ModelError> {
    let probs = model.predict(store, data.instances())?;
    let labels: Vec<u8> = data.iter().map(|i| i.label).collect();
    let scenarios: Vec<usize> = data.iter().map(|i| i.scenario).collect();
    Ok(scenario_metrics(&probs, &labels, &scenarios, model.scenarios()))
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1)
}

/// Separate RNG streams for initialization and dropout.
fn run_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let init = ChaCha8Rng::seed_from_u64(seed);
    let mut drop = ChaCha8Rng::seed_from_u64(seed);
    drop.set_stream(1);
    (init, drop)
}

/// State for stepping through training epochs.
struct Trainer<'a> {
    model: &'a Model,
    config: &'a TrainConfig,
    lambda: f64,
    adam: Adam,
    dropout_rng: ChaCha8Rng,
}

impl Trainer<'_> {
    /// One pass over `train`. Returns mean losses over batches, or the batch
    /// index and reason on divergence.
    fn epoch(
        &mut self,
        store: &mut ParamStore,
        train: &Dataset,
        epoch: usize,
    ) -> Result<TrainLosses, (usize, String, Option<TrainError>)> {
        let batches = batch_indices(train.len(), self.config.batch_size, Some(shuffle_seed(self.config.seed, epoch)));
        let mut sums = [0.0f64; 2];
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&Instance> = idx.iter().map(|&i| &train.instances()[i]).collect();
            let mut tape = Tape::new();
            let dropout = (self.config.dropout_rate > 0.0).then_some(Dropout {
                rate: self.config.dropout_rate,
                rng: &mut self.dropout_rng,
            });
            let out = self
                .model
                .forward(&mut tape, store, &batch, dropout)
                .map_err(|e| (b, e.to_string(), Some(e.into())))?;
            let loss = joint_loss(&mut tape, &out, self.lambda).map_err(|e| (b, e.to_string(), Some(e.into())))?;
            let l_msm = tape.value(out.l_msm).item();
            let l_orth = out.l_orth.map_or(0.0, |o| tape.value(o).item());
            let total = tape.value(loss).item();
            if !total.is_finite() {
                return Err((b, format!("loss is {total}"), None));
            }
            tape.backward_into(loss, store).map_err(|e| (b, e.to_string(), Some(e.into())))?;
            if let Err(e) = self.adam.step(store) {
                return Err((b, e.to_string(), None));
            }
            sums[0] += l_msm;
            sums[1] += l_orth;
        }
        let n = batches.len().max(1) as f64;
        let l_msm = sums[0] / n;
        let l_orth = sums[1] / n;
        Ok(TrainLosses {
            l_msm,
            l_orth,
            // Same expression as the per-batch objective, so the logged
            // total always equals l_msm + λ·l_orth.
            loss: l_msm + self.lambda * l_orth,
        })
    }
}

/// Trains a fresh model. Validation metrics are computed before the first
/// epoch and after each one; the returned parameters are those with the
/// highest mean validation AUC.
pub fn train(
    data: &SplitDataset,
    schema: &FeatureSchema,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if data.valid.is_empty() {
        return Err(TrainError::EmptySplit("valid"));
    }
    let (mut init_rng, dropout_rng) = run_rngs(config.seed);
    let (model, mut store) = Model::new(schema, model_config, config.ablations, &mut init_rng)?;
    data.train.validate(schema).map_err(|e| TrainError::Config(e.to_string()))?;
    data.valid.validate(schema).map_err(|e| TrainError::Config(e.to_string()))?;

    let lambda = config.effective_lambda();
    let mut trainer = Trainer {
        model: &model,
        config,
        lambda,
        adam: Adam::new(&store, config.learning_rate, config.l2_weight),
        dropout_rng,
    };

    let valid = evaluate(&model, &store, &data.valid)?;
    let mut best_auc = mean_auc(&valid);
    let mut best_epoch = 0;
    let mut best = store.clone();
    let mut history = vec![EpochRecord {
        epoch: 0,
        train: None,
        mean_valid_auc: best_auc,
        valid,
        seconds: 0.0,
    }];
    let mut since_best = 0;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let losses = match trainer.epoch(&mut store, &data.train, epoch) {
            Ok(l) => l,
            Err((batch, reason, Some(TrainError::Model(e)))) if !matches!(e, ModelError::Tensor(_)) => {
                log::error!("epoch {epoch} batch {batch}: {reason}");
                return Err(TrainError::Model(e));
            }
            Err((batch, reason, _)) => {
                log::error!("diverged at epoch {epoch} batch {batch}: {reason}");
                return Err(TrainError::Diverged {
                    epoch,
                    batch,
                    reason,
                    model: Box::new(model.clone()),
                    checkpoint: Box::new(best),
                });
            }
        };
        let seconds = start.elapsed().as_secs_f64();
        let valid = evaluate(&model, &store, &data.valid)?;
        let mean = mean_auc(&valid);
        log::info!(
            "epoch {epoch}: loss {:.5} (msm {:.5}, orth {:.5}) valid mean AUC {}",
            losses.loss,
            losses.l_msm,
            losses.l_orth,
            mean.map_or("n/a".into(), |a| format!("{a:.5}"))
        );
        history.push(EpochRecord {
            epoch,
            train: Some(losses),
            valid,
            mean_valid_auc: mean,
            seconds,
        });
        let improved = match (mean, best_auc) {
            (Some(a), Some(b)) => a > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            best_auc = mean;
            best_epoch = epoch;
            best.copy_values_from(&store);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                log::info!("early stop after epoch {epoch}; best epoch {best_epoch}");
                break;
            }
        }
    }

    let final_metrics = FinalMetrics {
        train: evaluate(&model, &best, &data.train)?,
        valid: evaluate(&model, &best, &data.valid)?,
        test: if data.test.is_empty() {
            Vec::new()
        } else {
            evaluate(&model, &best, &data.test)?
        },
    };
    Ok(TrainOutcome {
        model,
        params: best,
        report: MetricsReport {
            lambda_effective: lambda,
            best_epoch,
            history,
            final_metrics,
        },
    })
}

/// Wall-clock seconds of `epochs` training passes, excluding evaluation.
pub fn time_training(
    train_data: &Dataset,
    schema: &FeatureSchema,
    model_config: &ModelConfig,
    config: &TrainConfig,
    epochs: usize,
) -> Result<f64, TrainError> {
    config.validate()?;
    let (mut init_rng, dropout_rng) = run_rngs(config.seed);
    let (model, mut store) = Model::new(schema, model_config, config.ablations, &mut init_rng)?;
    let mut trainer = Trainer {
        model: &model,
        config,
        lambda: config.effective_lambda(),
        adam: Adam::new(&store, config.learning_rate, config.l2_weight),
        dropout_rng,
    };
    let start = Instant::now();
    for epoch in 1..=epochs {
        trainer
            .epoch(&mut store, train_data, epoch)
            .map_err(|(batch, reason, _)| TrainError::Diverged {
                epoch,
                batch,
                reason,
                model: Box::new(model.clone()),
                checkpoint: Box::new(store.clone()),
            })?;
    }
    Ok(start.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FieldCategory, FieldDef};
    use crate::model::ModelMode;

    fn tiny_schema(scenarios: usize) -> FeatureSchema {
        FeatureSchema {
            scenarios,
            fields: vec![
                FieldDef {
                    name: "a".into(),
                    category: FieldCategory::Shared,
                    vocab_size: 6,
                    embed_dim: 4,
                },
                FieldDef {
                    name: "p".into(),
                    category: FieldCategory::Specific,
                    vocab_size: 4,
                    embed_dim: 4,
                },
            ],
        }
    }

    fn toy_split(scenarios: usize, n: usize) -> SplitDataset {
        let mk = |offset: usize| {
            Dataset::new(
                (0..n)
                    .map(|i| {
                        let k = (i + offset) % 5 + 1;
                        Instance {
                            features: vec![k as u32, ((i / 5) % 3 + 1) as u32],
                            label: (k > 3) as u8,
                            scenario: i % scenarios,
                        }
                    })
                    .collect(),
            )
        };
        SplitDataset {
            train: mk(0),
            valid: mk(1),
            test: mk(2),
        }
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            transfer_hidden: vec![8, 4],
            tower_hidden: vec![8],
            hyper_hidden: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let schema = tiny_schema(2);
        let data = toy_split(2, 60);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&data, &schema, &small_model(), &cfg).unwrap();
        let (mut rng, _) = run_rngs(cfg.seed);
        let (_, init) = Model::new(&schema, &small_model(), cfg.ablations, &mut rng).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.report.history.len(), 1);
        assert_eq!(out.report.best_epoch, 0);
    }

    #[test]
    fn separable_mix_reaches_high_auc() {
        let schema = FeatureSchema {
            scenarios: 1,
            ..tiny_schema(1)
        };
        let data = toy_split(1, 200);
        let model = ModelConfig {
            mode: ModelMode::Mix,
            tower_hidden: vec![8],
            ..ModelConfig::default()
        };
        let cfg = TrainConfig {
            epochs: 20,
            lambda: 0.0,
            learning_rate: 1e-2,
            batch_size: 32,
            patience: 20,
            dropout_rate: 0.0,
            ..TrainConfig::default()
        };
        let out = train(&data, &schema, &model, &cfg).unwrap();
        let auc = out.report.final_metrics.train[0].auc.unwrap();
        assert!(auc > 0.99, "train AUC {auc}");
    }

    #[test]
    fn same_seed_same_history() {
        let schema = tiny_schema(2);
        let data = toy_split(2, 80);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let a = train(&data, &schema, &small_model(), &cfg).unwrap();
        let b = train(&data, &schema, &small_model(), &cfg).unwrap();
        assert_eq!(a.params, b.params);
        let strip = |r: &MetricsReport| {
            r.history
                .iter()
                .map(|e| (e.epoch, e.train.clone(), e.valid.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.report), strip(&b.report));
    }

    #[test]
    fn best_parameters_match_best_epoch() {
        let schema = tiny_schema(2);
        let data = toy_split(2, 80);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 16,
            learning_rate: 5e-2,
            ..TrainConfig::default()
        };
        let out = train(&data, &schema, &small_model(), &cfg).unwrap();
        let best = out.report.history[out.report.best_epoch].mean_valid_auc;
        let max = out
            .report
            .history
            .iter()
            .filter_map(|e| e.mean_valid_auc)
            .fold(f64::MIN, f64::max);
        assert_eq!(best, Some(max));
        let again = evaluate(&out.model, &out.params, &data.valid).unwrap();
        assert_eq!(mean_auc(&again), best);
    }

    #[test]
    fn no_constraint_zeroes_lambda() {
        let cfg = TrainConfig {
            ablations: Ablations {
                no_constraint: true,
                ..Ablations::default()
            },
            ..TrainConfig::default()
        };
        assert_eq!(cfg.effective_lambda(), 0.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TrainConfig {
                lambda: -0.1,
                ..TrainConfig::default()
            },
            TrainConfig {
                patience: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
        }
    }

    #[test]
    fn divergence_returns_checkpoint() {
        let schema = tiny_schema(2);
        let data = toy_split(2, 40);
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e300,
            batch_size: 8,
            ..TrainConfig::default()
        };
        match train(&data, &schema, &small_model(), &cfg) {
            Err(TrainError::Diverged { checkpoint, .. }) => assert!(!checkpoint.is_empty()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
