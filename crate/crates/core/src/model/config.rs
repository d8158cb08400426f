use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Operator that turns gated shared embeddings into per-scenario
/// representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferVariant {
    /// Shared and per-scenario weights fused by element-wise product.
    Fcn,
    /// Shared experts mixed by per-scenario softmax gates.
    Moe,
    /// Per-scenario experts plus shared experts, mixed by per-scenario gates.
    Cgc,
}

/// Which architecture is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Optmsm,
    /// One tower over pooled samples, no scenario structure.
    Mix,
    /// Shared embeddings feeding one plain tower per scenario.
    SharedBottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthMode {
    /// Sum of pairwise cosines.
    Raw,
    /// Sum of squared pairwise cosines.
    Squared,
}

/// How the pairwise cosine terms are combined into one loss value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthReduction {
    /// Plain sum over samples and scenario pairs; its scale grows with
    /// `B · M(M−1)/2`.
    Sum,
    /// Sum divided by `B · M(M−1)/2`.
    Mean,
}

macro_rules! snake_enum {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = ModelError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(ModelError::Config(format!(
                        "unknown {} `{other}`", stringify!($ty)
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

snake_enum!(TransferVariant { "fcn" => TransferVariant::Fcn, "moe" => TransferVariant::Moe, "cgc" => TransferVariant::Cgc });
snake_enum!(ModelMode { "optmsm" => ModelMode::Optmsm, "mix" => ModelMode::Mix, "shared_bottom" => ModelMode::SharedBottom });
snake_enum!(OrthMode { "raw" => OrthMode::Raw, "squared" => OrthMode::Squared });
snake_enum!(OrthReduction { "sum" => OrthReduction::Sum, "mean" => OrthReduction::Mean });

/// Component switches for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Route specific fields through the shared path and drop them from the
    /// tower input.
    pub no_priors: bool,
    /// Force the orthogonality weight to zero.
    pub no_constraint: bool,
    /// Fix every tower gate at 1.
    pub no_hypernetwork: bool,
}

impl Ablations {
    pub fn parse_flag(&mut self, flag: &str) -> Result<(), ModelError> {
        match flag {
            "no_priors" => self.no_priors = true,
            "no_constraint" => self.no_constraint = true,
            "no_hypernetwork" => self.no_hypernetwork = true,
            other => return Err(ModelError::Config(format!("unknown ablation `{other}`"))),
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_priors {
            parts.push("w/o priors");
        }
        if self.no_constraint {
            parts.push("w/o constraint");
        }
        if self.no_hypernetwork {
            parts.push("w/o hypernetwork");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join(", ")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub variant: TransferVariant,
    /// Layer widths of every transfer stack; the last is the representation width.
    pub transfer_hidden: Vec<usize>,
    /// Hidden widths of each scenario tower; a final width-1 classifier follows.
    pub tower_hidden: Vec<usize>,
    pub hyper_hidden: usize,
    /// MoE expert count; `None` resolves to `2 × scenarios`.
    pub moe_experts: Option<usize>,
    /// CGC experts private to each scenario.
    pub cgc_specific_experts: usize,
    pub cgc_shared_experts: usize,
    pub orth_mode: OrthMode,
    pub orth_reduction: OrthReduction,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: ModelMode::Optmsm,
            variant: TransferVariant::Fcn,
            transfer_hidden: vec![32, 16],
            tower_hidden: vec![32, 16, 8],
            hyper_hidden: 8,
            moe_experts: None,
            cgc_specific_experts: 2,
            cgc_shared_experts: 2,
            orth_mode: OrthMode::Squared,
            orth_reduction: OrthReduction::Mean,
        }
    }
}

impl ModelConfig {
    /// Fills scenario-dependent defaults so the config is fully explicit.
    pub fn resolved(&self, scenarios: usize) -> Self {
        let mut out = self.clone();
        out.moe_experts = Some(self.moe_experts.unwrap_or(2 * scenarios));
        out
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.transfer_hidden.is_empty() || self.transfer_hidden.contains(&0) {
            return bad("transfer_hidden needs at least one non-zero width");
        }
        if self.tower_hidden.contains(&0) {
            return bad("tower_hidden widths must be non-zero");
        }
        if self.hyper_hidden == 0 {
            return bad("hyper_hidden must be non-zero");
        }
        if self.moe_experts == Some(0) {
            return bad("moe_experts must be non-zero");
        }
        if self.cgc_specific_experts + self.cgc_shared_experts == 0 {
            return bad("cgc needs at least one expert");
        }
        Ok(())
    }

    /// Largest layer width anywhere in the network.
    pub fn max_width(&self) -> usize {
        self.transfer_hidden
            .iter()
            .chain(&self.tower_hidden)
            .copied()
            .chain([self.hyper_hidden])
            .max()
            .unwrap_or(0)
    }
}
