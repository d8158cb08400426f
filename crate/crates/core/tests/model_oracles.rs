// Component and end-to-end forward oracles: every value here is recomputed
// from the parameter store with plain loops and compared to the tape.

use optmsm::data::{FeatureSchema, FieldCategory::*, FieldDef, Instance};
use optmsm::model::{Ablations, Model, ModelConfig, ModelError, OrthMode, OrthReduction, TransferVariant};
use optmsm::tensor::sigmoid;
use optmsm::train::joint_loss;
use optmsm::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn schema(scenarios: usize) -> FeatureSchema {
    FeatureSchema {
        scenarios,
        fields: vec![
            FieldDef::new("a", Shared, 3, 2),
            FieldDef::new("b", Shared, 4, 2),
            FieldDef::new("p", Specific, 3, 2),
        ],
    }
}

fn config(variant: TransferVariant) -> ModelConfig {
    ModelConfig {
        variant,
        transfer_hidden: vec![3, 2],
        tower_hidden: vec![3],
        hyper_hidden: 2,
        moe_experts: Some(3),
        cgc_specific_experts: 1,
        cgc_shared_experts: 1,
        ..ModelConfig::default()
    }
}

fn build(schema: &FeatureSchema, cfg: &ModelConfig, ablations: Ablations, seed: u64) -> (Model, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::new(schema, cfg, ablations, &mut rng).unwrap()
}

fn instances(schema: &FeatureSchema, n: usize, seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Instance {
            features: schema.fields.iter().map(|f| rng.random_range(0..f.vocab_size as u32)).collect(),
            label: rng.random_range(0..2),
            scenario: rng.random_range(0..schema.scenarios),
        })
        .collect()
}

fn set(store: &mut ParamStore, name: &str, data: &[f64]) {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.value_mut(id).data_mut().copy_from_slice(data);
}

fn fill(store: &mut ParamStore, prefix: &str, value: f64) {
    for p in store.iter_mut().filter(|p| p.name.starts_with(prefix)) {
        p.value.data_mut().fill(value);
    }
}

// ---- plain-loop linear algebra over store values --------------------------

type Mat = Vec<Vec<f64>>;

fn param(store: &ParamStore, name: &str) -> Mat {
    let t = store.value(store.id(name).unwrap_or_else(|| panic!("no parameter {name}")));
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn affine(x: &[f64], w: &Mat, b: &Mat) -> Vec<f64> {
    (0..w[0].len())
        .map(|j| b[0][j] + x.iter().zip(w).map(|(xi, row)| xi * row[j]).sum::<f64>())
        .collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Naive per-sample forward of the FCN model: returns (probs, l_msm, l_orth).
fn naive_forward(schema: &FeatureSchema, cfg: &ModelConfig, store: &ParamStore, batch: &[Instance]) -> (Vec<f64>, f64, f64) {
    let m_count = schema.scenarios;
    let shared: Vec<(usize, &FieldDef)> = schema.shared_fields().collect();
    let specific: Vec<(usize, &FieldDef)> = schema.specific_fields().collect();
    let layers = cfg.transfer_hidden.len();
    let tower_layers = cfg.tower_hidden.len() + 1;
    let mut probs = Vec::new();
    let mut orth = 0.0;
    for inst in batch {
        let embs: Vec<Vec<f64>> = shared
            .iter()
            .map(|(i, f)| param(store, &format!("emb.{}", f.name))[inst.features[*i] as usize].clone())
            .collect();
        let means: Vec<f64> = embs.iter().map(|e| e.iter().sum::<f64>() / e.len() as f64).collect();
        let mut reps = Vec::new();
        for m in 1..=m_count {
            let z: Vec<f64> = affine(&means, &param(store, &format!("gate.s{m}.w")), &param(store, &format!("gate.s{m}.b")))
                .into_iter()
                .map(sigmoid)
                .collect();
            let mut h: Vec<f64> = embs.iter().zip(&z).flat_map(|(e, zi)| e.iter().map(move |x| zi * x)).collect();
            for l in 0..layers {
                let ws = param(store, &format!("fcn.shared.l{l}.w"));
                let wm = param(store, &format!("fcn.s{m}.l{l}.w"));
                let w: Mat = ws.iter().zip(&wm).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).collect()).collect();
                let bs = param(store, &format!("fcn.shared.l{l}.b"));
                let bm = param(store, &format!("fcn.s{m}.l{l}.b"));
                let b: Mat = vec![bs[0].iter().zip(&bm[0]).map(|(x, y)| x + y).collect()];
                h = affine(&h, &w, &b);
                if l + 1 < layers {
                    h = relu(h);
                }
            }
            reps.push(h);
        }
        for i in 0..m_count {
            for j in i + 1..m_count {
                orth += cos(&reps[i], &reps[j]).powi(2);
            }
        }
        let s = inst.scenario + 1;
        let mut r0 = reps[inst.scenario].clone();
        for (i, f) in &specific {
            r0.extend(&param(store, &format!("emb.s{s}.{}", f.name))[inst.features[*i] as usize]);
        }
        let mut x = r0.clone();
        for l in 0..tower_layers {
            let pre = format!("hyper.s{s}.l{l}");
            let hidden = relu(affine(&r0, &param(store, &format!("{pre}.0.w")), &param(store, &format!("{pre}.0.b"))));
            let gate: Vec<f64> = affine(&hidden, &param(store, &format!("{pre}.1.w")), &param(store, &format!("{pre}.1.b")))
                .into_iter()
                .map(|v| 2.0 * sigmoid(v))
                .collect();
            let input: Vec<f64> = x.iter().zip(&gate).map(|(a, g)| a * g).collect();
            let z = affine(&input, &param(store, &format!("tower.s{s}.l{l}.w")), &param(store, &format!("tower.s{s}.l{l}.b")));
            x = if l + 1 == tower_layers { z } else { relu(z) };
        }
        probs.push(sigmoid(x[0]));
    }
    let n = batch.len() as f64;
    let l_msm = probs
        .iter()
        .zip(batch)
        .map(|(&p, i)| optmsm::tensor::bce_term(p, i.label as f64))
        .sum::<f64>()
        / n;
    let m = m_count as f64;
    (probs, l_msm, orth * 2.0 / (n * m * (m - 1.0)))
}

#[test]
fn full_forward_matches_scalar_recomputation() {
    let schema = schema(2);
    let cfg = config(TransferVariant::Fcn);
    for seed in 0..5 {
        let (model, mut store) = build(&schema, &cfg, Ablations::default(), seed);
        // Random values everywhere, including the zero-initialized hypernet
        // output layers, so every term is exercised.
        store.randomize(&mut ChaCha8Rng::seed_from_u64(seed + 100), 0.8);
        // Two samples per scenario so both towers run.
        let batch: Vec<Instance> = instances(&schema, 4, seed)
            .into_iter()
            .enumerate()
            .map(|(k, i)| Instance { scenario: k % 2, ..i })
            .collect();
        let refs: Vec<&Instance> = batch.iter().collect();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &store, &refs, None).unwrap();
        let (probs, l_msm, l_orth) = naive_forward(&schema, model.config(), &store, &batch);
        for (a, b) in out.probs.iter().zip(&probs) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((tape.value(out.l_msm).item() - l_msm).abs() < 1e-12);
        assert!((tape.value(out.l_orth.unwrap()).item() - l_orth).abs() < 1e-12);
        let loss = joint_loss(&mut tape, &out, 0.3).unwrap();
        assert!((tape.value(loss).item() - (l_msm + 0.3 * l_orth)).abs() < 1e-12);
    }
}

#[test]
fn se_gate_scalar_oracle() {
    let schema = schema(1);
    let (model, mut store) = build(&schema, &config(TransferVariant::Fcn), Ablations::default(), 0);
    set(&mut store, "gate.s1.w", &[0.5, -1.0, 2.0, 0.25]);
    set(&mut store, "gate.s1.b", &[0.1, -0.2]);
    let e1 = [1.0, 3.0];
    let e2 = [-2.0, 4.0];
    let mut tape = Tape::new();
    let v1 = tape.constant(Tensor::row(&e1));
    let v2 = tape.constant(Tensor::row(&e2));
    let out = model.se_gate(&mut tape, &store, &[v1, v2], 0).unwrap();
    // means (2, 1): z = σ(2·0.5 + 1·2 + 0.1), σ(2·-1 + 1·0.25 - 0.2)
    let z1 = sigmoid(3.1);
    let z2 = sigmoid(-1.95);
    let want = [z1 * 1.0, z1 * 3.0, z2 * -2.0, z2 * 4.0];
    for (a, b) in tape.value(out).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn se_gate_limits() {
    let schema = schema(1);
    let (model, mut store) = build(&schema, &config(TransferVariant::Fcn), Ablations::default(), 0);
    let e = [vec![1.5, -0.5], vec![2.0, 7.0]];
    let run = |store: &ParamStore| {
        let mut tape = Tape::new();
        let v: Vec<_> = e.iter().map(|x| tape.constant(Tensor::row(x))).collect();
        let out = model.se_gate(&mut tape, store, &v, 0).unwrap();
        tape.value(out).data().to_vec()
    };
    fill(&mut store, "gate.s1", 0.0);
    assert_eq!(run(&store), vec![0.75, -0.25, 1.0, 3.5]);
    fill(&mut store, "gate.s1.b", 20.0);
    for (a, b) in run(&store).iter().zip([1.5, -0.5, 2.0, 7.0]) {
        assert!((a - b).abs() < 1e-8 * b.abs());
    }
}

#[test]
fn hypernet_scalar_oracle_and_saturation() {
    let schema = schema(1);
    let (model, mut store) = build(&schema, &config(TransferVariant::Fcn), Ablations::default(), 0);
    store.randomize(&mut ChaCha8Rng::seed_from_u64(9), 1.0);
    let r0 = vec![0.3, -1.2, 0.7, 0.4];
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::row(&r0));
    let gates = model.hyper_gates(&mut tape, &store, v, 0).unwrap();
    assert_eq!(gates.len(), 2);
    for (l, g) in gates.iter().enumerate() {
        let pre = format!("hyper.s1.l{l}");
        let h = relu(affine(&r0, &param(&store, &format!("{pre}.0.w")), &param(&store, &format!("{pre}.0.b"))));
        let want: Vec<f64> = affine(&h, &param(&store, &format!("{pre}.1.w")), &param(&store, &format!("{pre}.1.b")))
            .into_iter()
            .map(|x| 2.0 * sigmoid(x))
            .collect();
        for (a, b) in tape.value(*g).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fill(&mut store, "hyper.s1.l0.1.w", 0.0);
    fill(&mut store, "hyper.s1.l0.1.b", -20.0);
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::row(&r0));
    let gates = model.hyper_gates(&mut tape, &store, v, 0).unwrap();
    assert!(tape.value(gates[0]).data().iter().all(|&g| g > 0.0 && g < 1e-8));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    // Bounded so pre-activations stay well inside the range where 2·σ does
    // not round to exactly 0 or 2 in f64.
    fn hypernet_gates_stay_in_open_interval(seed in any::<u64>(), scale in 0.1f64..1.0) {
        let schema = schema(1);
        let (model, mut store) = build(&schema, &config(TransferVariant::Fcn), Ablations::default(), 0);
        store.randomize(&mut ChaCha8Rng::seed_from_u64(seed), scale);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let r0 = Tensor::matrix(5, 4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut tape = Tape::new();
        let v = tape.constant(r0);
        for g in model.hyper_gates(&mut tape, &store, v, 0).unwrap() {
            for &x in tape.value(g).data() {
                prop_assert!(x > 0.0 && x < 2.0);
            }
        }
    }

    #[test]
    fn orth_loss_bounds(seed in any::<u64>(), m in 2usize..5, b in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let reps: Vec<_> = (0..m)
            .map(|_| tape.constant(Tensor::matrix(b, 3, (0..3 * b).map(|_| rng.random_range(-1.0..1.0)).collect())))
            .collect();
        let pairs = (b * m * (m - 1) / 2) as f64;
        let raw = optmsm::model::orth_loss(&mut tape, &reps, OrthMode::Raw).unwrap().unwrap();
        let sq = optmsm::model::orth_loss(&mut tape, &reps, OrthMode::Squared).unwrap().unwrap();
        prop_assert!(tape.value(raw).item().abs() <= pairs + 1e-9);
        prop_assert!((0.0..=pairs + 1e-9).contains(&tape.value(sq).item()));
    }
}

#[test]
fn tower_gates_of_one_and_zero() {
    let schema = schema(1);
    let (model, mut store) = build(&schema, &config(TransferVariant::Fcn), Ablations::default(), 3);
    store.randomize(&mut ChaCha8Rng::seed_from_u64(4), 0.7);
    let r0 = Tensor::from_rows(&[vec![0.2, -0.4, 1.1, 0.5], vec![-1.0, 0.3, 0.0, 0.8]]);
    let widths = [4, 3];
    let run = |gate_value: Option<f64>| {
        let mut tape = Tape::new();
        let x = tape.constant(r0.clone());
        let gates: Option<Vec<_>> =
            gate_value.map(|g| widths.iter().map(|&w| tape.constant(Tensor::full(&[2, w], g))).collect());
        let logit = model.tower_forward(&mut tape, &store, x, gates.as_deref(), 0, None).unwrap();
        tape.value(logit).data().to_vec()
    };
    assert_eq!(run(Some(1.0)), run(None));
    // Every layer input zeroed: the logit is the output bias.
    let b = param(&store, "tower.s1.l1.b")[0][0];
    assert_eq!(run(Some(0.0)), vec![b, b]);
}

#[test]
fn fcn_specific_weights_of_one_give_identical_representations() {
    let schema = schema(3);
    let (model, mut store) = build(&schema, &config(TransferVariant::Fcn), Ablations::default(), 5);
    store.randomize(&mut ChaCha8Rng::seed_from_u64(6), 0.8);
    for m in 1..=3 {
        fill(&mut store, &format!("fcn.s{m}.l"), 0.0);
        for l in 0..2 {
            fill(&mut store, &format!("fcn.s{m}.l{l}.w"), 1.0);
        }
    }
    let mut tape = Tape::new();
    let inputs: Vec<_> = (0..3)
        .map(|_| tape.constant(Tensor::from_rows(&[vec![0.5, -1.0, 0.25, 2.0], vec![1.0, 0.0, -0.5, 0.3]])))
        .collect();
    let reps = model.transfer(&mut tape, &store, &inputs).unwrap();
    for r in &reps[1..] {
        assert_eq!(tape.value(*r), tape.value(reps[0]));
    }
    // Zeroed specific weights remove the input entirely.
    for m in 1..=3 {
        fill(&mut store, &format!("fcn.s{m}.l"), 0.0);
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![0.5, -1.0, 0.25, 2.0], vec![9.0, 3.0, -5.0, 0.3]]));
    let reps = model.transfer(&mut tape, &store, &[x, x, x]).unwrap();
    let t = tape.value(reps[0]);
    assert_eq!(t.row_slice(0), t.row_slice(1));
}

#[test]
fn moe_with_equal_experts_ignores_the_gate() {
    let schema = schema(2);
    let (model, mut store) = build(&schema, &config(TransferVariant::Moe), Ablations::default(), 7);
    store.randomize(&mut ChaCha8Rng::seed_from_u64(8), 0.8);
    for l in 0..2 {
        for suffix in ["w", "b"] {
            let src = param(&store, &format!("moe.e0.l{l}.{suffix}")).concat();
            for e in 1..3 {
                set(&mut store, &format!("moe.e{e}.l{l}.{suffix}"), &src);
            }
        }
    }
    let x = vec![0.3, -0.7, 1.2, 0.1];
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::row(&x));
    let reps = model.transfer(&mut tape, &store, &[v, v]).unwrap();
    let h = relu(affine(&x, &param(&store, "moe.e0.l0.w"), &param(&store, "moe.e0.l0.b")));
    let want = affine(&h, &param(&store, "moe.e0.l1.w"), &param(&store, "moe.e0.l1.b"));
    for r in reps {
        for (a, b) in tape.value(r).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

fn grad_norm(store: &ParamStore, prefix: &str) -> f64 {
    store
        .iter()
        .filter(|p| p.name.starts_with(prefix))
        .map(|p| p.grad.data().iter().map(|g| g.abs()).sum::<f64>())
        .sum()
}

#[test]
fn contrastive_representations_only_reach_the_orthogonality_loss() {
    let schema = schema(2);
    let cfg = config(TransferVariant::Fcn);
    let (model, mut store) = build(&schema, &cfg, Ablations::default(), 11);
    store.randomize(&mut ChaCha8Rng::seed_from_u64(12), 0.8);
    let batch: Vec<Instance> = instances(&schema, 6, 13)
        .into_iter()
        .map(|i| Instance { scenario: 0, ..i })
        .collect();
    let refs: Vec<&Instance> = batch.iter().collect();
    let grads_at = |store: &mut ParamStore, lambda: f64| {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, store, &refs, None).unwrap();
        let loss = joint_loss(&mut tape, &out, lambda).unwrap();
        tape.backward_into(loss, store).unwrap();
    };
    grads_at(&mut store, 0.0);
    for prefix in ["fcn.s2.", "gate.s2.", "tower.s2.", "hyper.s2.", "emb.s2."] {
        assert_eq!(grad_norm(&store, prefix), 0.0, "{prefix}");
    }
    assert!(grad_norm(&store, "fcn.s1.") > 0.0);
    grads_at(&mut store, 0.5);
    assert!(grad_norm(&store, "fcn.s2.") > 0.0);
    assert!(grad_norm(&store, "gate.s2.") > 0.0);
    for prefix in ["tower.s2.", "hyper.s2.", "emb.s2."] {
        assert_eq!(grad_norm(&store, prefix), 0.0, "{prefix}");
    }
}

#[test]
fn zero_hypernet_matches_no_hypernet_bitwise() {
    let schema = schema(3);
    for variant in [TransferVariant::Fcn, TransferVariant::Moe, TransferVariant::Cgc] {
        let cfg = config(variant);
        let (full, mut full_store) = build(&schema, &cfg, Ablations::default(), 21);
        let ablate = Ablations {
            no_hypernetwork: true,
            ..Ablations::default()
        };
        let (bare, mut bare_store) = build(&schema, &cfg, ablate, 21);
        bare_store.randomize(&mut ChaCha8Rng::seed_from_u64(22), 0.8);
        for p in full_store.iter_mut() {
            match bare_store.id(&p.name) {
                Some(id) => p.value = bare_store.value(id).clone(),
                None => p.value.data_mut().fill(0.0),
            }
        }
        assert!(full_store.iter().any(|p| p.name.starts_with("hyper.")));
        for trial in 0..10 {
            let batch = instances(&schema, 9, trial);
            let refs: Vec<&Instance> = batch.iter().collect();
            let a = full.forward(&mut Tape::new(), &full_store, &refs, None).unwrap().probs;
            let b = bare.forward(&mut Tape::new(), &bare_store, &refs, None).unwrap().probs;
            assert_eq!(a, b, "{variant:?}");
        }
    }
}

#[test]
fn mean_reduction_scales_the_pair_sum() {
    let schema = schema(3);
    let mut cfg = config(TransferVariant::Fcn);
    let (model, store) = build(&schema, &cfg, Ablations::default(), 1);
    cfg.orth_reduction = OrthReduction::Sum;
    let (summed, _) = build(&schema, &cfg, Ablations::default(), 1);
    let batch = instances(&schema, 5, 2);
    let refs: Vec<&Instance> = batch.iter().collect();
    let mut tape = Tape::new();
    let mean = model.forward(&mut tape, &store, &refs, None).unwrap().l_orth.unwrap();
    let sum = summed.forward(&mut tape, &store, &refs, None).unwrap().l_orth.unwrap();
    let ratio = tape.value(mean).item() / tape.value(sum).item();
    assert!((ratio - 2.0 / (5.0 * 3.0 * 2.0)).abs() < 1e-15);
}

#[test]
fn single_scenario_has_no_orthogonality_term() {
    let schema = schema(1);
    let (model, store) = build(&schema, &config(TransferVariant::Fcn), Ablations::default(), 0);
    let batch = instances(&schema, 3, 0);
    let refs: Vec<&Instance> = batch.iter().collect();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &store, &refs, None).unwrap();
    assert!(out.l_orth.is_none());
    assert_eq!(joint_loss(&mut tape, &out, 1.0).unwrap(), out.l_msm);
}

#[test]
fn routing_and_lookup_errors() {
    let schema = schema(2);
    let (model, store) = build(&schema, &config(TransferVariant::Fcn), Ablations::default(), 0);
    let bad_scenario = Instance {
        features: vec![0, 0, 0],
        label: 1,
        scenario: 2,
    };
    let err = model.forward(&mut Tape::new(), &store, &[&bad_scenario], None).unwrap_err();
    assert!(matches!(err, ModelError::Routing { scenario: 3, scenarios: 2 }));
    let bad_index = Instance {
        features: vec![0, 4, 0],
        label: 1,
        scenario: 0,
    };
    let err = model.forward(&mut Tape::new(), &store, &[&bad_index], None).unwrap_err();
    assert!(matches!(err, ModelError::Lookup { index: 4, vocab: 4, .. }));
    assert!(model.forward(&mut Tape::new(), &store, &[], None).is_err());
}

#[test]
fn embedding_lookup_returns_table_rows() {
    let schema = schema(1);
    let (model, store) = build(&schema, &config(TransferVariant::Fcn), Ablations::default(), 0);
    let id = store.id("emb.b").unwrap();
    let mut tape = Tape::new();
    let e = model.embed(&mut tape, &store, id, &[3, 0, 3]).unwrap();
    let table = store.value(id);
    let got = tape.value(e);
    assert_eq!(got.row_slice(0), table.row_slice(3));
    assert_eq!(got.row_slice(1), table.row_slice(0));
    assert_eq!(got.row_slice(2), table.row_slice(3));
}

#[test]
fn priors_ablation_moves_specific_fields_to_the_shared_path() {
    let schema = schema(2);
    let ablate = Ablations {
        no_priors: true,
        ..Ablations::default()
    };
    let (model, store) = build(&schema, &config(TransferVariant::Fcn), ablate, 0);
    assert!(store.id("emb.p").is_some());
    assert!(store.id("emb.s1.p").is_none());
    assert_eq!(store.value(store.id("gate.s1.w").unwrap()).shape(), &[3, 3]);
    assert_eq!(model.layout_ids().0.len(), 3);
}
