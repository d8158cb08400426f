//! Synthetic multi-scenario click data from a logistic teacher.
//!
//! The teacher logit for an instance in scenario `m` is
//!
//! ```text
//! b0 + shared_signal · ⟨u_shared, φ(x_c)⟩ + specific_signal · ⟨u_m, φ_m(x_c, x^m)⟩
//! ```
//!
//! `φ` concatenates fixed random per-value embeddings of the shared fields.
//! `φ_m` additionally appends embeddings of the scenario-specific fields drawn
//! from tables private to scenario `m`, so the same specific index means
//! different things in different scenarios.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, FeatureSchema, Instance, SplitDataset};
use crate::tensor::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub scenarios: usize,
    pub samples: usize,
    pub scenario_proportions: Vec<f64>,
    pub shared_signal_strength: f64,
    pub specific_signal_strength: f64,
    pub base_click_rate: f64,
    pub seed: u64,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    /// Width of each field's teacher embedding.
    pub teacher_dim: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            scenarios: 3,
            samples: 50_000,
            scenario_proportions: vec![0.05, 0.35, 0.60],
            shared_signal_strength: 1.0,
            specific_signal_strength: 1.0,
            base_click_rate: 0.2,
            seed: 2024,
            split: [0.8, 0.1, 0.1],
            teacher_dim: 4,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self, schema: &FeatureSchema) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.scenarios != schema.scenarios {
            return bad(format!(
                "generator scenarios ({}) differs from schema scenarios ({})",
                self.scenarios, schema.scenarios
            ));
        }
        if self.scenario_proportions.len() != self.scenarios {
            return bad(format!(
                "expected {} scenario proportions, got {}",
                self.scenarios,
                self.scenario_proportions.len()
            ));
        }
        if self.scenario_proportions.iter().any(|&p| !(p > 0.0)) {
            return bad("scenario proportions must be positive".into());
        }
        let total: f64 = self.scenario_proportions.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return bad(format!("scenario proportions sum to {total}, expected 1"));
        }
        if !(self.base_click_rate > 0.0 && self.base_click_rate < 1.0) {
            return bad(format!("base click rate {} must lie in (0, 1)", self.base_click_rate));
        }
        if !(self.shared_signal_strength >= 0.0) || !(self.specific_signal_strength >= 0.0) {
            return bad("signal strengths must be non-negative".into());
        }
        if self.split.iter().any(|&f| !(f > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return bad(format!("split fractions {:?} must be positive and sum to 1", self.split));
        }
        if self.teacher_dim == 0 {
            return bad("teacher_dim must be at least 1".into());
        }
        Ok(())
    }
}

/// Hidden weights of the label-generating teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    pub bias: f64,
    pub shared_signal: f64,
    pub specific_signal: f64,
    pub teacher_dim: usize,
    /// Per shared field: `vocab_size × teacher_dim`, row-major.
    pub shared_embeddings: Vec<Vec<f64>>,
    /// Per scenario, per specific field: `vocab_size × teacher_dim`.
    pub specific_embeddings: Vec<Vec<Vec<f64>>>,
    pub u_shared: Vec<f64>,
    /// Per scenario, over shared then specific teacher features.
    pub u_specific: Vec<Vec<f64>>,
}

impl Teacher {
    fn sample<R: Rng>(schema: &FeatureSchema, cfg: &GeneratorConfig, rng: &mut R) -> Self {
        let td = cfg.teacher_dim;
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
        };
        let shared_embeddings: Vec<Vec<f64>> = schema
            .shared_fields()
            .map(|(_, f)| normal(f.vocab_size * td, 1.0))
            .collect();
        let specific_embeddings: Vec<Vec<Vec<f64>>> = (0..schema.scenarios)
            .map(|_| {
                schema
                    .specific_fields()
                    .map(|(_, f)| normal(f.vocab_size * td, 1.0))
                    .collect()
            })
            .collect();
        let n_shared = shared_embeddings.len() * td;
        let n_specific = n_shared + schema.specific_fields().count() * td;
        let u_shared = normal(n_shared, 1.0 / (n_shared as f64).sqrt());
        let u_specific = (0..schema.scenarios)
            .map(|_| normal(n_specific, 1.0 / (n_specific as f64).sqrt()))
            .collect();
        let p = cfg.base_click_rate;
        Self {
            bias: (p / (1.0 - p)).ln(),
            shared_signal: cfg.shared_signal_strength,
            specific_signal: cfg.specific_signal_strength,
            teacher_dim: td,
            shared_embeddings,
            specific_embeddings,
            u_shared,
            u_specific,
        }
    }

    /// Teacher logit for the features of an instance, scored as if it came
    /// from `scenario` (0-based).
    pub fn logit(&self, schema: &FeatureSchema, features: &[u32], scenario: usize) -> f64 {
        let td = self.teacher_dim;
        let mut shared_part = 0.0;
        let mut specific_part = 0.0;
        let u_m = &self.u_specific[scenario];
        let mut offset = 0;
        for (k, (idx, _)) in schema.shared_fields().enumerate() {
            let v = features[idx] as usize;
            let emb = &self.shared_embeddings[k][v * td..(v + 1) * td];
            for (j, e) in emb.iter().enumerate() {
                shared_part += self.u_shared[offset + j] * e;
                specific_part += u_m[offset + j] * e;
            }
            offset += td;
        }
        for (k, (idx, _)) in schema.specific_fields().enumerate() {
            let v = features[idx] as usize;
            let emb = &self.specific_embeddings[scenario][k][v * td..(v + 1) * td];
            for (j, e) in emb.iter().enumerate() {
                specific_part += u_m[offset + j] * e;
            }
            offset += td;
        }
        self.bias + self.shared_signal * shared_part + self.specific_signal * specific_part
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub splits: SplitDataset,
    pub teacher: Teacher,
}

/// Draws `config.samples` instances and splits them. Fully determined by
/// `(config, schema)`.
pub fn generate(config: &GeneratorConfig, schema: &FeatureSchema) -> Result<GeneratedData, DataError> {
    schema.validate()?;
    config.validate(schema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let teacher = Teacher::sample(schema, config, &mut rng);
    let scenario_dist = WeightedIndex::new(&config.scenario_proportions)
        .map_err(|e| DataError::Config(format!("scenario proportions: {e}")))?;

    let mut instances = Vec::with_capacity(config.samples);
    for _ in 0..config.samples {
        let scenario = scenario_dist.sample(&mut rng);
        let features: Vec<u32> = schema
            .fields
            .iter()
            // Index 0 is the reserved out-of-vocabulary bucket.
            .map(|f| if f.vocab_size > 1 { rng.random_range(1..f.vocab_size) as u32 } else { 0 })
            .collect();
        let p = sigmoid(teacher.logit(schema, &features, scenario));
        let label = u8::from(rng.random::<f64>() < p);
        instances.push(Instance { features, label, scenario });
    }

    let n = instances.len();
    let n_train = (config.split[0] * n as f64).round() as usize;
    let n_valid = (config.split[1] * n as f64).round() as usize;
    let n_valid = n_valid.min(n - n_train.min(n));
    let test = instances.split_off(n_train + n_valid);
    let valid = instances.split_off(n_train);
    let splits = SplitDataset {
        train: Dataset::new(instances),
        valid: Dataset::new(valid),
        test: Dataset::new(test),
    };
    for (name, ds) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        let counts = ds.scenario_counts(schema.scenarios);
        if let Some(m) = counts.iter().position(|&c| c == 0) {
            return Err(DataError::Generation(format!(
                "{} samples are too few: scenario {} has no instances in the {name} split",
                config.samples,
                m + 1
            )));
        }
    }
    Ok(GeneratedData { splits, teacher })
}
