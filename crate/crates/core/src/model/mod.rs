//! The multi-scenario network.
//!
//! Per sample, shared fields are embedded and reweighted by a per-scenario
//! field gate, then a transfer operator produces one representation for
//! *every* scenario. Only the representation of the sample's own scenario
//! feeds that scenario's tower; the others act as contrastive
//! representations for the orthogonality loss. The tower input is the
//! representation concatenated with the scenario-specific embeddings, and a
//! per-layer hypernetwork rescales each tower layer's input.

mod config;
mod layout;
mod persist;

pub use config::{Ablations, ModelConfig, ModelMode, OrthMode, OrthReduction, TransferVariant};
pub use layout::{HyperIds, LinearIds, TransferIds};
pub use persist::{load_model, read_model, save_model, write_model, ModelManifest};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{FeatureSchema, Instance};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use layout::Layout;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("scenario {scenario} outside [1, {scenarios}]")]
    Routing { scenario: usize, scenarios: usize },
    #[error("index {index} out of vocabulary ({vocab}) for field `{field}`")]
    Lookup {
        field: String,
        index: usize,
        vocab: usize,
    },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("model file: {0}")]
    Persist(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Inverted dropout on tower-layer inputs, active only during training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// Everything a forward pass exposes.
#[derive(Debug)]
pub struct ForwardOutput {
    /// Predicted click probability per sample, in batch order.
    pub probs: Vec<f64>,
    /// Mean cross-entropy over the batch.
    pub l_msm: Var,
    /// Orthogonality loss; `None` when there are no contrastive pairs.
    pub l_orth: Option<Var>,
    /// Per scenario, the `B × R` representations of every sample.
    pub reps: Vec<Var>,
}

/// Per-sample representations under every scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRepresentations {
    /// Indexed `[scenario][sample]`; all vectors share one width.
    pub reps: Vec<Vec<Vec<f64>>>,
    /// Real (0-based) scenario of each sample.
    pub active: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Model {
    schema: FeatureSchema,
    config: ModelConfig,
    ablations: Ablations,
    layout: Layout,
}

impl Model {
    /// Builds the model and its freshly initialized parameters.
    pub fn new(
        schema: &FeatureSchema,
        config: &ModelConfig,
        ablations: Ablations,
        rng: &mut impl Rng,
    ) -> Result<(Self, ParamStore), ModelError> {
        schema
            .validate()
            .map_err(|e| ModelError::Config(e.to_string()))?;
        let config = config.resolved(schema.scenarios);
        config.validate()?;
        let mut store = ParamStore::new();
        let layout = Layout::build(schema, &config, ablations, &mut store, rng);
        Ok((
            Self {
                schema: schema.clone(),
                config,
                ablations,
                layout,
            },
            store,
        ))
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ablations(&self) -> Ablations {
        self.ablations
    }

    pub fn scenarios(&self) -> usize {
        self.schema.scenarios
    }

    pub fn hyper_enabled(&self) -> bool {
        self.config.mode == ModelMode::Optmsm && !self.ablations.no_hypernetwork
    }

    pub fn priors_enabled(&self) -> bool {
        self.config.mode == ModelMode::Optmsm && !self.ablations.no_priors
    }

    /// Representation width produced by the transfer operator.
    pub fn repr_width(&self) -> usize {
        *self.config.transfer_hidden.last().expect("validated")
    }

    pub fn layout_ids(&self) -> (&[(usize, ParamId)], &[Vec<(usize, ParamId)>]) {
        (&self.layout.shared_tables, &self.layout.specific_tables)
    }

    pub fn hyper_ids(&self, scenario: usize) -> &[HyperIds] {
        &self.layout.hyper[scenario]
    }

    pub fn tower_ids(&self, scenario: usize) -> &[LinearIds] {
        let idx = if self.config.mode == ModelMode::Mix { 0 } else { scenario };
        &self.layout.towers[idx]
    }

    // ---- components -------------------------------------------------------

    /// Gathers rows of an embedding table for the given indices.
    pub fn embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        table: ParamId,
        indices: &[usize],
    ) -> Result<Var, ModelError> {
        let t = tape.param(store, table);
        Ok(tape.gather_rows(t, indices)?)
    }

    /// Field-level squeeze-and-excitation for one scenario: each field
    /// embedding is squeezed to its mean, `z = σ(means · W + b)` gives one
    /// weight per field, and the output is the concatenation of `z_i · e_i`.
    pub fn se_gate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        field_embeddings: &[Var],
        scenario: usize,
    ) -> Result<Var, ModelError> {
        let means = field_embeddings
            .iter()
            .map(|&e| tape.mean_axis(e, 1))
            .collect::<Result<Vec<_>, _>>()?;
        let means = tape.concat(&means, 1)?;
        self.se_gate_from_means(tape, store, field_embeddings, means, scenario)
    }

    fn se_gate_from_means(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        field_embeddings: &[Var],
        means: Var,
        scenario: usize,
    ) -> Result<Var, ModelError> {
        let gate = &self.layout.gates[scenario];
        let fields = tape.value(means).cols();
        if fields != field_embeddings.len() || store.value(gate.w).rows() != fields {
            return Err(TensorError::Shape {
                op: "se_gate",
                left: vec![field_embeddings.len()],
                right: store.value(gate.w).shape().to_vec(),
            }
            .into());
        }
        let pre = linear(tape, store, means, gate)?;
        let z = tape.sigmoid(pre);
        let mut gated = Vec::with_capacity(fields);
        for (i, &e) in field_embeddings.iter().enumerate() {
            let zi = tape.slice_cols(z, i, i + 1)?;
            gated.push(tape.mul_col(e, zi)?);
        }
        Ok(tape.concat(&gated, 1)?)
    }

    /// Representations for every scenario from the per-scenario gated inputs.
    pub fn transfer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &[Var],
    ) -> Result<Vec<Var>, ModelError> {
        let m_count = self.scenarios();
        if inputs.len() != m_count {
            return Err(ModelError::Config(format!(
                "transfer expects {m_count} scenario inputs, got {}",
                inputs.len()
            )));
        }
        let mut out = Vec::with_capacity(m_count);
        match &self.layout.transfer {
            TransferIds::None => {
                return Err(ModelError::Config(format!(
                    "{} mode has no transfer operator",
                    self.config.mode
                )))
            }
            TransferIds::Fcn { shared, specific } => {
                for (m, &x) in inputs.iter().enumerate() {
                    let mut h = x;
                    for (s, p) in shared.iter().zip(&specific[m]) {
                        let ws = tape.param(store, s.w);
                        let wm = tape.param(store, p.w);
                        let w = tape.mul(ws, wm)?;
                        let bs = tape.param(store, s.b);
                        let bm = tape.param(store, p.b);
                        let b = tape.add(bs, bm)?;
                        let z = tape.matmul(h, w)?;
                        let z = tape.add_row(z, b)?;
                        h = z;
                        if !std::ptr::eq(s, shared.last().expect("non-empty transfer stack")) {
                            h = tape.relu(h);
                        }
                    }
                    out.push(h);
                }
            }
            TransferIds::Moe { experts, gates } => {
                for (m, &x) in inputs.iter().enumerate() {
                    let outs = experts
                        .iter()
                        .map(|e| mlp(tape, store, x, e))
                        .collect::<Result<Vec<_>, _>>()?;
                    out.push(mix_experts(tape, store, x, &outs, &gates[m])?);
                }
            }
            TransferIds::Cgc {
                specific,
                shared,
                gates,
            } => {
                for (m, &x) in inputs.iter().enumerate() {
                    let outs = specific[m]
                        .iter()
                        .chain(shared)
                        .map(|e| mlp(tape, store, x, e))
                        .collect::<Result<Vec<_>, _>>()?;
                    out.push(mix_experts(tape, store, x, &outs, &gates[m])?);
                }
            }
        }
        Ok(out)
    }

    /// Cross-scenario orthogonality loss over all unordered scenario pairs and
    /// all samples, or `None` with fewer than two scenarios.
    pub fn orth_loss(&self, tape: &mut Tape, reps: &[Var]) -> Result<Option<Var>, ModelError> {
        let Some(sum) = orth_loss(tape, reps, self.config.orth_mode)? else {
            return Ok(None);
        };
        Ok(Some(match self.config.orth_reduction {
            OrthReduction::Sum => sum,
            OrthReduction::Mean => {
                let b = tape.value(reps[0]).rows() as f64;
                let m = reps.len() as f64;
                tape.scale(sum, 2.0 / (b * m * (m - 1.0)))
            }
        }))
    }

    /// Per-layer tower gates `2·σ(w1·relu(w0·R0 + b0) + b1)` for one scenario.
    pub fn hyper_gates(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        r0: Var,
        scenario: usize,
    ) -> Result<Vec<Var>, ModelError> {
        let hyper = &self.layout.hyper[scenario];
        if hyper.is_empty() {
            return Ok(Vec::new());
        }
        // The first layers of all per-layer hypernets read the same R0, so
        // they run as one matmul over the column-concatenated weights.
        let w0: Vec<Var> = hyper.iter().map(|ids| tape.param(store, ids.w0)).collect();
        let b0: Vec<Var> = hyper.iter().map(|ids| tape.param(store, ids.b0)).collect();
        let w0 = tape.concat(&w0, 1)?;
        let b0 = tape.concat(&b0, 1)?;
        let h = tape.matmul(r0, w0)?;
        let h = tape.add_row(h, b0)?;
        let h = tape.relu(h);
        let mut gates = Vec::with_capacity(hyper.len());
        let mut start = 0;
        for ids in hyper {
            let width = store.value(ids.w0).cols();
            let hl = tape.slice_cols(h, start, start + width)?;
            start += width;
            let w1 = tape.param(store, ids.w1);
            let b1 = tape.param(store, ids.b1);
            let g = tape.matmul(hl, w1)?;
            let g = tape.add_row(g, b1)?;
            let g = tape.sigmoid(g);
            gates.push(tape.scale(g, 2.0));
        }
        Ok(gates)
    }

    /// Runs one tower. Each layer's input is multiplied by its gate (when
    /// given) and by a dropout mask (when given) before the affine map.
    /// Returns the logit.
    pub fn tower_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        r0: Var,
        gates: Option<&[Var]>,
        scenario: usize,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var, ModelError> {
        let layers = self.tower_ids(scenario);
        if let Some(g) = gates {
            if g.len() != layers.len() {
                return Err(ModelError::Config(format!(
                    "{} gates for a {}-layer tower",
                    g.len(),
                    layers.len()
                )));
            }
        }
        let mut x = r0;
        for (l, ids) in layers.iter().enumerate() {
            let mut input = x;
            if let Some(g) = gates {
                input = tape.mul(input, g[l])?;
            }
            if let Some(d) = dropout.as_deref_mut() {
                if d.rate > 0.0 {
                    let shape = tape.value(input).shape().to_vec();
                    let keep = 1.0 - d.rate;
                    let n: usize = shape.iter().product();
                    let mask: Vec<f64> = (0..n)
                        .map(|_| if d.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let mask = tape.constant(Tensor::new(shape, mask)?);
                    input = tape.mul(input, mask)?;
                }
            }
            let z = linear(tape, store, input, ids)?;
            x = if l + 1 == layers.len() { z } else { tape.relu(z) };
        }
        Ok(x)
    }

    // ---- full pass --------------------------------------------------------

    fn check_batch(&self, batch: &[&Instance]) -> Result<(), ModelError> {
        for inst in batch {
            if inst.scenario >= self.scenarios() {
                return Err(ModelError::Routing {
                    scenario: inst.scenario + 1,
                    scenarios: self.scenarios(),
                });
            }
            for (v, f) in inst.features.iter().zip(&self.schema.fields) {
                if *v as usize >= f.vocab_size {
                    return Err(ModelError::Lookup {
                        field: f.name.clone(),
                        index: *v as usize,
                        vocab: f.vocab_size,
                    });
                }
            }
        }
        Ok(())
    }

    /// Forward pass over a batch, recording everything on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[&Instance],
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<ForwardOutput, ModelError> {
        if batch.is_empty() {
            return Err(TensorError::Degenerate {
                op: "forward",
                reason: "empty batch".into(),
            }
            .into());
        }
        self.check_batch(batch)?;
        let column = |field: usize| -> Vec<usize> {
            batch.iter().map(|i| i.features[field] as usize).collect()
        };

        let field_embs = self
            .layout
            .shared_tables
            .iter()
            .map(|&(field, id)| self.embed(tape, store, id, &column(field)))
            .collect::<Result<Vec<_>, _>>()?;

        // Samples grouped by their real scenario; towers run per group.
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); self.scenarios()];
        for (b, inst) in batch.iter().enumerate() {
            groups[inst.scenario].push(b);
        }

        let mut reps = Vec::new();
        let mut l_orth = None;
        let flat = match self.config.mode {
            ModelMode::Optmsm => {
                let means = field_embs
                    .iter()
                    .map(|&e| tape.mean_axis(e, 1))
                    .collect::<Result<Vec<_>, _>>()?;
                let means = tape.concat(&means, 1)?;
                let gated = (0..self.scenarios())
                    .map(|m| self.se_gate_from_means(tape, store, &field_embs, means, m))
                    .collect::<Result<Vec<_>, _>>()?;
                reps = self.transfer(tape, store, &gated)?;
                l_orth = self.orth_loss(tape, &reps)?;
                None
            }
            ModelMode::Mix | ModelMode::SharedBottom => Some(tape.concat(&field_embs, 1)?),
        };

        let mut group_probs = Vec::new();
        let mut order = Vec::with_capacity(batch.len());
        let single_tower = self.config.mode == ModelMode::Mix;
        let routes: Vec<(usize, Vec<usize>)> = if single_tower {
            vec![(0, (0..batch.len()).collect())]
        } else {
            groups.into_iter().enumerate().filter(|(_, g)| !g.is_empty()).collect()
        };
        for (m, idx) in routes {
            let r0 = match flat {
                Some(x) if single_tower => x,
                Some(x) => tape.gather_rows(x, &idx)?,
                None => {
                    let r = tape.gather_rows(reps[m], &idx)?;
                    if self.priors_enabled() && !self.layout.specific_tables[m].is_empty() {
                        let mut parts = vec![r];
                        for &(field, id) in &self.layout.specific_tables[m] {
                            let ix: Vec<usize> =
                                idx.iter().map(|&b| batch[b].features[field] as usize).collect();
                            parts.push(self.embed(tape, store, id, &ix)?);
                        }
                        tape.concat(&parts, 1)?
                    } else {
                        r
                    }
                }
            };
            let gates = if self.hyper_enabled() {
                Some(self.hyper_gates(tape, store, r0, m)?)
            } else {
                None
            };
            let logit =
                self.tower_forward(tape, store, r0, gates.as_deref(), m, dropout.as_mut())?;
            group_probs.push(tape.sigmoid(logit));
            order.extend(idx);
        }

        let probs_var = tape.concat(&group_probs, 0)?;
        let labels: Vec<f64> = order.iter().map(|&b| batch[b].label as f64).collect();
        let l_msm = tape.bce_mean(probs_var, &labels)?;
        let mut probs = vec![0.0; batch.len()];
        for (k, &b) in order.iter().enumerate() {
            probs[b] = tape.value(probs_var).data()[k];
        }
        Ok(ForwardOutput {
            probs,
            l_msm,
            l_orth,
            reps,
        })
    }

    /// Click probabilities for a slice of instances, evaluated in chunks.
    pub fn predict(&self, store: &ParamStore, instances: &[Instance]) -> Result<Vec<f64>, ModelError> {
        let mut out = Vec::with_capacity(instances.len());
        for chunk in instances.chunks(EVAL_CHUNK) {
            let refs: Vec<&Instance> = chunk.iter().collect();
            let mut tape = Tape::new();
            out.extend(self.forward(&mut tape, store, &refs, None)?.probs);
        }
        Ok(out)
    }

    /// Representations of every instance under every scenario.
    pub fn representations(
        &self,
        store: &ParamStore,
        instances: &[Instance],
    ) -> Result<ScenarioRepresentations, ModelError> {
        if self.config.mode != ModelMode::Optmsm {
            return Err(ModelError::Config(format!(
                "{} mode has no scenario representations",
                self.config.mode
            )));
        }
        let mut reps = vec![Vec::with_capacity(instances.len()); self.scenarios()];
        for chunk in instances.chunks(EVAL_CHUNK) {
            let refs: Vec<&Instance> = chunk.iter().collect();
            let mut tape = Tape::new();
            let out = self.forward(&mut tape, store, &refs, None)?;
            for (m, &r) in out.reps.iter().enumerate() {
                let t = tape.value(r);
                reps[m].extend((0..t.rows()).map(|i| t.row_slice(i).to_vec()));
            }
        }
        Ok(ScenarioRepresentations {
            reps,
            active: instances.iter().map(|i| i.scenario).collect(),
        })
    }
}

const EVAL_CHUNK: usize = 1024;

/// Vectorized orthogonality loss; see [`Tape::pairwise_cosine_sum`].
pub fn orth_loss(tape: &mut Tape, reps: &[Var], mode: OrthMode) -> Result<Option<Var>, ModelError> {
    if reps.len() < 2 {
        return Ok(None);
    }
    Ok(Some(tape.pairwise_cosine_sum(reps, mode == OrthMode::Squared)?))
}

fn linear(tape: &mut Tape, store: &ParamStore, x: Var, ids: &LinearIds) -> Result<Var, TensorError> {
    let w = tape.param(store, ids.w);
    let b = tape.param(store, ids.b);
    let z = tape.matmul(x, w)?;
    tape.add_row(z, b)
}

/// Relu between layers; the output layer is affine.
fn mlp(tape: &mut Tape, store: &ParamStore, x: Var, layers: &[LinearIds]) -> Result<Var, TensorError> {
    let mut h = x;
    for (l, ids) in layers.iter().enumerate() {
        h = linear(tape, store, h, ids)?;
        if l + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// `Σ_k softmax(x·Wg + bg)_k · expert_k`.
fn mix_experts(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    experts: &[Var],
    gate: &LinearIds,
) -> Result<Var, TensorError> {
    let logits = linear(tape, store, x, gate)?;
    let weights = tape.softmax_rows(logits);
    let mut acc: Option<Var> = None;
    for (k, &e) in experts.iter().enumerate() {
        let wk = tape.slice_cols(weights, k, k + 1)?;
        let term = tape.mul_col(e, wk)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one expert"))
}
