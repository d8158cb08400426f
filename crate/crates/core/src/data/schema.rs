use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldCategory {
    /// Meaningful in every scenario; embedded through one shared table.
    Shared,
    /// Carries scenario-local semantics; embedded through a per-scenario table.
    Specific,
}

impl FieldCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldCategory::Shared => "shared",
            FieldCategory::Specific => "specific",
        }
    }
}

impl FromStr for FieldCategory {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shared" => Ok(FieldCategory::Shared),
            "specific" => Ok(FieldCategory::Specific),
            other => Err(DataError::Schema(format!(
                "unknown field category `{other}` (expected shared|specific)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldDef {
    pub name: String,
    pub category: FieldCategory,
    /// Includes the reserved out-of-vocabulary bucket at index 0.
    pub vocab_size: usize,
    pub embed_dim: usize,
}

impl FieldDef {
    pub fn new(name: &str, category: FieldCategory, vocab_size: usize, embed_dim: usize) -> Self {
        Self {
            name: name.to_string(),
            category,
            vocab_size,
            embed_dim,
        }
    }
}

/// Ordered feature fields plus the number of scenarios.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub scenarios: usize,
    pub fields: Vec<FieldDef>,
}

impl Default for FeatureSchema {
    fn default() -> Self {
        use FieldCategory::*;
        Self {
            scenarios: 3,
            fields: vec![
                FieldDef::new("user_segment", Shared, 40, 8),
                FieldDef::new("user_age", Shared, 12, 8),
                FieldDef::new("item_category", Shared, 60, 8),
                FieldDef::new("item_price", Shared, 20, 8),
                FieldDef::new("position", Specific, 12, 8),
                FieldDef::new("item_stat", Specific, 24, 8),
            ],
        }
    }
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.scenarios < 1 {
            return Err(DataError::Schema("scenario count must be at least 1".into()));
        }
        if !self.fields.iter().any(|f| f.category == FieldCategory::Shared) {
            return Err(DataError::Schema("at least one shared field is required".into()));
        }
        let mut seen = HashSet::new();
        for f in &self.fields {
            if !seen.insert(f.name.as_str()) {
                return Err(DataError::Schema(format!("duplicate field name `{}`", f.name)));
            }
            if f.name.is_empty() || f.name.contains([' ', ',', '=']) || f.name == "label" || f.name == "scenario" {
                return Err(DataError::Schema(format!("invalid field name `{}`", f.name)));
            }
            if f.vocab_size < 1 {
                return Err(DataError::Schema(format!("field `{}` needs vocab_size >= 1", f.name)));
            }
            if f.embed_dim < 1 {
                return Err(DataError::Schema(format!("field `{}` needs embed_dim >= 1", f.name)));
            }
        }
        Ok(())
    }

    pub fn shared_fields(&self) -> impl Iterator<Item = (usize, &FieldDef)> {
        self.fields
            .iter()
            .enumerate()
            .filter(|(_, f)| f.category == FieldCategory::Shared)
    }

    pub fn specific_fields(&self) -> impl Iterator<Item = (usize, &FieldDef)> {
        self.fields
            .iter()
            .enumerate()
            .filter(|(_, f)| f.category == FieldCategory::Specific)
    }

    /// Serializes to the line-oriented schema file format.
    pub fn to_text(&self) -> String {
        let mut out = format!("scenarios={}\n", self.scenarios);
        for f in &self.fields {
            let _ = writeln!(out, "{} {} {} {}", f.name, f.category.as_str(), f.vocab_size, f.embed_dim);
        }
        out
    }

    /// Parses the schema file format: `scenarios=M` plus one
    /// `name category vocab_size embed_dim` line per field. Blank lines and
    /// `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut scenarios = None;
        let mut fields = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| DataError::Schema(format!("line {}: {msg}", lineno + 1));
            if let Some((key, value)) = line.split_once('=') {
                match key.trim() {
                    "scenarios" => {
                        scenarios = Some(
                            value
                                .trim()
                                .parse::<usize>()
                                .map_err(|e| bad(format!("bad scenario count: {e}")))?,
                        )
                    }
                    other => return Err(bad(format!("unknown key `{other}`"))),
                }
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(bad(format!("expected `name category vocab_size embed_dim`, got `{line}`")));
            }
            let vocab_size = parts[2]
                .parse()
                .map_err(|e| bad(format!("bad vocab_size: {e}")))?;
            let embed_dim = parts[3]
                .parse()
                .map_err(|e| bad(format!("bad embed_dim: {e}")))?;
            fields.push(FieldDef {
                name: parts[0].to_string(),
                category: parts[1].parse().map_err(|e: DataError| bad(e.to_string()))?,
                vocab_size,
                embed_dim,
            });
        }
        let schema = Self {
            scenarios: scenarios.ok_or_else(|| DataError::Schema("missing `scenarios=` line".into()))?,
            fields,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Human-readable list of differences against another schema.
    pub fn diff(&self, other: &FeatureSchema) -> Vec<String> {
        let mut out = Vec::new();
        if self.scenarios != other.scenarios {
            out.push(format!("scenarios: {} vs {}", self.scenarios, other.scenarios));
        }
        let n = self.fields.len().max(other.fields.len());
        for i in 0..n {
            match (self.fields.get(i), other.fields.get(i)) {
                (Some(a), Some(b)) if a != b => out.push(format!(
                    "field {i}: `{} {} {} {}` vs `{} {} {} {}`",
                    a.name, a.category.as_str(), a.vocab_size, a.embed_dim,
                    b.name, b.category.as_str(), b.vocab_size, b.embed_dim
                )),
                (Some(a), None) => out.push(format!("field {i}: `{}` only on the left", a.name)),
                (None, Some(b)) => out.push(format!("field {i}: `{}` only on the right", b.name)),
                _ => {}
            }
        }
        out
    }
}
