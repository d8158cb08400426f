//! Feature schema, instances, synthetic generation, CSV I/O and batching.

mod batch;
mod csv_io;
mod generate;
mod schema;

pub use batch::{batch_indices, Batch};
pub use csv_io::{load_csv, read_csv, write_csv};
pub use generate::{generate, GeneratedData, GeneratorConfig, Teacher};
pub use schema::{FeatureSchema, FieldCategory, FieldDef};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One impression. `scenario` is 0-based internally; files use 1-based ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    /// One vocabulary index per schema field, in schema order.
    pub features: Vec<u32>,
    pub label: u8,
    pub scenario: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(instances: Vec<Instance>) -> Self {
        Self { instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Instance> {
        self.instances.iter()
    }

    pub fn scenario_counts(&self, scenarios: usize) -> Vec<usize> {
        let mut counts = vec![0; scenarios];
        for inst in &self.instances {
            if inst.scenario < scenarios {
                counts[inst.scenario] += 1;
            }
        }
        counts
    }

    pub fn positive_rate(&self) -> f64 {
        if self.instances.is_empty() {
            return 0.0;
        }
        self.instances.iter().map(|i| i.label as f64).sum::<f64>() / self.instances.len() as f64
    }

    /// Checks indices and scenario ids against a schema.
    pub fn validate(&self, schema: &FeatureSchema) -> Result<(), DataError> {
        for (n, inst) in self.instances.iter().enumerate() {
            if inst.features.len() != schema.fields.len() {
                return Err(DataError::Parse {
                    line: n + 1,
                    message: format!("expected {} features, got {}", schema.fields.len(), inst.features.len()),
                });
            }
            if inst.scenario >= schema.scenarios {
                return Err(DataError::Parse {
                    line: n + 1,
                    message: format!("scenario {} outside [1, {}]", inst.scenario + 1, schema.scenarios),
                });
            }
            for (v, f) in inst.features.iter().zip(&schema.fields) {
                if *v as usize >= f.vocab_size {
                    return Err(DataError::Parse {
                        line: n + 1,
                        message: format!("index {v} out of vocabulary for `{}`", f.name),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl SplitDataset {
    pub fn split(&self, name: &str) -> Option<&Dataset> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}
