use optmsm::data::{generate, FeatureSchema, GeneratorConfig, SplitDataset};
use optmsm::gradcheck::{grad_check, GradCheckConfig, GradCheckError, GroupStatus};
use optmsm::model::{Ablations, ModelConfig, TransferVariant};
use optmsm::train::{auc, evaluate, train, write_metrics_jsonl, MetricError, TrainConfig};
use proptest::prelude::*;

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

proptest! {
    #[test]
    fn rank_auc_matches_pair_count(
        cases in prop::collection::vec((0u8..6, any::<bool>()), 2..400)
    ) {
        // Few distinct scores, so ties are common.
        let scores: Vec<f64> = cases.iter().map(|(s, _)| *s as f64 * 0.1).collect();
        let labels: Vec<u8> = cases.iter().map(|(_, y)| u8::from(*y)).collect();
        let both = labels.contains(&0) && labels.contains(&1);
        match auc(&scores, &labels) {
            Ok(a) => {
                prop_assert!(both);
                prop_assert!((a - pairwise_auc(&scores, &labels)).abs() < 1e-12);
            }
            Err(MetricError::SingleClass { .. }) => prop_assert!(!both),
            Err(e) => prop_assert!(false, "{e}"),
        }
    }
}

fn tiny_data() -> (SplitDataset, FeatureSchema) {
    let schema = FeatureSchema::default();
    let cfg = GeneratorConfig {
        samples: 3_000,
        ..GeneratorConfig::default()
    };
    (generate(&cfg, &schema).unwrap().splits, schema)
}

fn small_model(variant: TransferVariant) -> ModelConfig {
    ModelConfig {
        variant,
        transfer_hidden: vec![8, 4],
        tower_hidden: vec![8, 4],
        hyper_hidden: 4,
        ..ModelConfig::default()
    }
}

fn short_run() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 128,
        ..TrainConfig::default()
    }
}

#[test]
fn logged_loss_is_msm_plus_weighted_orth() {
    let (data, schema) = tiny_data();
    let cfg = TrainConfig {
        lambda: 0.7,
        ..short_run()
    };
    let out = train(&data, &schema, &small_model(TransferVariant::Fcn), &cfg).unwrap();
    assert_eq!(out.report.lambda_effective, 0.7);
    for e in out.report.history.iter().skip(1) {
        let t = e.train.as_ref().unwrap();
        assert!(t.l_orth > 0.0);
        assert!((t.loss - (t.l_msm + 0.7 * t.l_orth)).abs() < 1e-12);
    }
}

#[test]
fn evaluation_is_bitwise_repeatable_and_batch_independent() {
    let (data, schema) = tiny_data();
    let out = train(&data, &schema, &small_model(TransferVariant::Cgc), &short_run()).unwrap();
    let a = evaluate(&out.model, &out.params, &data.test).unwrap();
    let b = evaluate(&out.model, &out.params, &data.test).unwrap();
    assert_eq!(a, b);
    let all = out.model.predict(&out.params, data.test.instances()).unwrap();
    for (k, inst) in data.test.instances().iter().enumerate().take(50) {
        let one = out.model.predict(&out.params, std::slice::from_ref(inst)).unwrap();
        assert!((one[0] - all[k]).abs() < 1e-14);
    }
}

#[test]
fn metrics_files_are_identical_across_runs() {
    let (data, schema) = tiny_data();
    for variant in [TransferVariant::Fcn, TransferVariant::Moe, TransferVariant::Cgc] {
        let file = || {
            let out = train(&data, &schema, &small_model(variant), &short_run()).unwrap();
            let mut buf = Vec::new();
            write_metrics_jsonl(&mut buf, &out.report).unwrap();
            buf
        };
        let first = file();
        assert!(!first.is_empty());
        assert_eq!(first, file(), "{variant:?}");
    }
}

#[test]
fn no_constraint_logs_zero_lambda() {
    let (data, schema) = tiny_data();
    let cfg = TrainConfig {
        ablations: Ablations {
            no_constraint: true,
            ..Ablations::default()
        },
        epochs: 1,
        ..short_run()
    };
    let out = train(&data, &schema, &small_model(TransferVariant::Fcn), &cfg).unwrap();
    assert_eq!(out.report.lambda_effective, 0.0);
    let t = out.report.history[1].train.as_ref().unwrap();
    assert_eq!(t.loss, t.l_msm);
}

#[test]
fn gradcheck_passes_on_tiny_fcn() {
    let report = grad_check(&GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "{}", report.table());
    // Zero-initialized hypernet output layers still receive gradient.
    assert!(report.group("hyper.s1.l0.1.w").unwrap().max_grad > 0.0);
    // The third scenario has no samples: its tower is skipped, but its
    // transfer weights are reached through the orthogonality term.
    assert_eq!(report.group("tower.s3.l0.w").unwrap().status, GroupStatus::Skipped);
    assert_eq!(report.group("fcn.s3.l0.w").unwrap().status, GroupStatus::Pass);
}

fn small_check() -> GradCheckConfig {
    let mut cfg = GradCheckConfig::default();
    cfg.model.transfer_hidden = vec![4];
    cfg.model.tower_hidden = vec![4];
    cfg.model.hyper_hidden = 2;
    cfg
}

#[test]
fn gradcheck_flags_an_injected_fault() {
    let cfg = GradCheckConfig {
        fault: Some("gate.s1.w".into()),
        ..small_check()
    };
    let report = grad_check(&cfg).unwrap();
    assert!(!report.passed());
    let failed: Vec<&str> = report.failures().map(|g| g.group.as_str()).collect();
    assert_eq!(failed, vec!["gate.s1.w"]);
    assert!(report.table().contains("FAIL"));
}

#[test]
fn gradcheck_without_constraint_skips_absent_scenario_transfer() {
    let cfg = GradCheckConfig {
        lambda: 0.0,
        ..small_check()
    };
    let report = grad_check(&cfg).unwrap();
    assert!(report.passed(), "{}", report.table());
    assert_eq!(report.group("fcn.s3.l0.w").unwrap().status, GroupStatus::Skipped);
    assert_eq!(report.group("gate.s3.w").unwrap().status, GroupStatus::Skipped);
    assert!(report.table().contains("skipped (zero gradient expected)"));
}

#[test]
fn gradcheck_refuses_large_models() {
    let mut cfg = GradCheckConfig::default();
    cfg.model.transfer_hidden = vec![64, 4];
    assert!(matches!(grad_check(&cfg), Err(GradCheckError::TooLarge(_))));
}
