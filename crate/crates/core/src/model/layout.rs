// Parameter registration. Names use 1-based scenario ids (`s1`, `s2`, ...).

use rand::Rng;

use super::{Ablations, ModelConfig, ModelMode, TransferVariant};
use crate::data::{FeatureSchema, FieldCategory};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearIds {
    /// `in × out`.
    pub w: ParamId,
    /// `1 × out`.
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HyperIds {
    pub w0: ParamId,
    pub b0: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransferIds {
    None,
    Fcn {
        shared: Vec<LinearIds>,
        /// `[scenario][layer]`, shapes identical to `shared`.
        specific: Vec<Vec<LinearIds>>,
    },
    Moe {
        /// `[expert][layer]`.
        experts: Vec<Vec<LinearIds>>,
        gates: Vec<LinearIds>,
    },
    Cgc {
        /// `[scenario][expert][layer]`.
        specific: Vec<Vec<Vec<LinearIds>>>,
        shared: Vec<Vec<LinearIds>>,
        gates: Vec<LinearIds>,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    /// `(field index, table)` for every field on the shared path.
    pub shared_tables: Vec<(usize, ParamId)>,
    /// Per scenario: `(field index, table)` for the specific (prior) fields.
    pub specific_tables: Vec<Vec<(usize, ParamId)>>,
    pub gates: Vec<LinearIds>,
    pub transfer: TransferIds,
    /// `[scenario][tower layer]`.
    pub hyper: Vec<Vec<HyperIds>>,
    /// `[scenario][layer]`; a single tower in mix mode.
    pub towers: Vec<Vec<LinearIds>>,
}

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, data)
}

struct Builder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        let w = self.store.add(format!("{name}.w"), xavier(self.rng, fan_in, fan_out));
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
        LinearIds { w, b }
    }

    fn stack(&mut self, name: &str, input: usize, widths: &[usize]) -> Vec<LinearIds> {
        let mut fan_in = input;
        widths
            .iter()
            .enumerate()
            .map(|(l, &w)| {
                let ids = self.linear(&format!("{name}.l{l}"), fan_in, w);
                fan_in = w;
                ids
            })
            .collect()
    }
}

impl Layout {
    pub fn build(
        schema: &FeatureSchema,
        config: &ModelConfig,
        ablations: Ablations,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let m_count = schema.scenarios;
        let optmsm = config.mode == ModelMode::Optmsm;
        let priors = optmsm && !ablations.no_priors;
        let mut b = Builder { store, rng };

        let on_shared_path = |cat: FieldCategory| cat == FieldCategory::Shared || !priors;
        let shared_tables: Vec<(usize, ParamId)> = schema
            .fields
            .iter()
            .enumerate()
            .filter(|(_, f)| on_shared_path(f.category))
            .map(|(i, f)| {
                let t = xavier(b.rng, f.vocab_size, f.embed_dim);
                (i, b.store.add(format!("emb.{}", f.name), t))
            })
            .collect();
        let specific_tables: Vec<Vec<(usize, ParamId)>> = (0..m_count)
            .map(|m| {
                if !priors {
                    return Vec::new();
                }
                schema
                    .specific_fields()
                    .map(|(i, f)| {
                        let t = xavier(b.rng, f.vocab_size, f.embed_dim);
                        (i, b.store.add(format!("emb.s{}.{}", m + 1, f.name), t))
                    })
                    .collect()
            })
            .collect();
        let shared_width: usize = shared_tables.iter().map(|&(i, _)| schema.fields[i].embed_dim).sum();
        let prior_width: usize = if priors {
            schema.specific_fields().map(|(_, f)| f.embed_dim).sum()
        } else {
            0
        };

        let mut gates = Vec::new();
        let mut transfer = TransferIds::None;
        let mut hyper = vec![Vec::new(); m_count];
        let tower_in;
        if optmsm {
            let n_fields = shared_tables.len();
            gates = (0..m_count)
                .map(|m| b.linear(&format!("gate.s{}", m + 1), n_fields, n_fields))
                .collect();
            let widths = &config.transfer_hidden;
            transfer = match config.variant {
                TransferVariant::Fcn => {
                    let shared = b.stack("fcn.shared", shared_width, widths);
                    let specific = (0..m_count)
                        .map(|m| {
                            let ids = b.stack(&format!("fcn.s{}", m + 1), shared_width, widths);
                            // Start every scenario at the pure shared network.
                            for l in &ids {
                                b.store.value_mut(l.w).data_mut().fill(1.0);
                            }
                            ids
                        })
                        .collect();
                    TransferIds::Fcn { shared, specific }
                }
                TransferVariant::Moe => {
                    let k = config.moe_experts.unwrap_or(2 * m_count);
                    let experts = (0..k)
                        .map(|e| b.stack(&format!("moe.e{e}"), shared_width, widths))
                        .collect();
                    let gates = (0..m_count)
                        .map(|m| b.linear(&format!("moe.gate.s{}", m + 1), shared_width, k))
                        .collect();
                    TransferIds::Moe { experts, gates }
                }
                TransferVariant::Cgc => {
                    let per = config.cgc_specific_experts;
                    let n_shared = config.cgc_shared_experts;
                    let specific = (0..m_count)
                        .map(|m| {
                            (0..per)
                                .map(|e| b.stack(&format!("cgc.s{}.e{e}", m + 1), shared_width, widths))
                                .collect()
                        })
                        .collect();
                    let shared = (0..n_shared)
                        .map(|e| b.stack(&format!("cgc.shared.e{e}"), shared_width, widths))
                        .collect();
                    let gates = (0..m_count)
                        .map(|m| b.linear(&format!("cgc.gate.s{}", m + 1), shared_width, per + n_shared))
                        .collect();
                    TransferIds::Cgc {
                        specific,
                        shared,
                        gates,
                    }
                }
            };
            tower_in = widths.last().copied().unwrap_or(0) + prior_width;
        } else {
            tower_in = shared_width;
        }

        let mut tower_widths = config.tower_hidden.clone();
        tower_widths.push(1);
        let tower_names: Vec<String> = if config.mode == ModelMode::Mix {
            vec!["tower.mix".into()]
        } else {
            (0..m_count).map(|m| format!("tower.s{}", m + 1)).collect()
        };
        let towers = tower_names
            .iter()
            .map(|name| b.stack(name, tower_in, &tower_widths))
            .collect();

        if optmsm && !ablations.no_hypernetwork {
            let inputs: Vec<usize> = std::iter::once(tower_in)
                .chain(config.tower_hidden.iter().copied())
                .collect();
            for (m, slot) in hyper.iter_mut().enumerate() {
                for (l, &width) in inputs.iter().enumerate() {
                    let name = format!("hyper.s{}.l{l}", m + 1);
                    let first = b.linear(&format!("{name}.0"), tower_in, config.hyper_hidden);
                    let second = b.linear(&format!("{name}.1"), config.hyper_hidden, width);
                    // Zero output layer: every gate starts at 2·σ(0) = 1.
                    b.store.value_mut(second.w).data_mut().fill(0.0);
                    slot.push(HyperIds {
                        w0: first.w,
                        b0: first.b,
                        w1: second.w,
                        b1: second.b,
                    });
                }
            }
        }

        Self {
            shared_tables,
            specific_tables,
            gates,
            transfer,
            hyper,
            towers,
        }
    }
}
