use optmsm::data::{batch_indices, generate, read_csv, write_csv, Dataset, FeatureSchema, GeneratorConfig};
use optmsm::model::ModelConfig;
use optmsm::train::{auc, train, TrainConfig};
use proptest::prelude::*;

fn generator(samples: usize) -> GeneratorConfig {
    GeneratorConfig {
        samples,
        ..GeneratorConfig::default()
    }
}

#[test]
fn scenario_counts_follow_proportions() {
    let schema = FeatureSchema::default();
    let cfg = generator(50_000);
    let data = generate(&cfg, &schema).unwrap();
    let mut counts = [0usize; 3];
    for ds in [&data.splits.train, &data.splits.valid, &data.splits.test] {
        for (c, n) in counts.iter_mut().zip(ds.scenario_counts(3)) {
            *c += n;
        }
    }
    assert_eq!(counts.iter().sum::<usize>(), 50_000);
    for (c, p) in counts.iter().zip(&cfg.scenario_proportions) {
        let share = *c as f64 / 50_000.0;
        assert!((share - p).abs() < 0.02, "share {share} vs {p}");
    }
    assert_eq!(data.splits.train.len(), 40_000);
    assert_eq!(data.splits.valid.len(), 5_000);
    assert_eq!(data.splits.test.len(), 5_000);
}

fn scores(data: &Dataset, f: impl Fn(&optmsm::data::Instance) -> f64) -> (Vec<f64>, Vec<u8>) {
    (data.iter().map(f).collect(), data.iter().map(|i| i.label).collect())
}

#[test]
fn own_scenario_teacher_beats_cross_scenario_teacher() {
    let schema = FeatureSchema::default();
    let data = generate(&generator(30_000), &schema).unwrap();
    let t = &data.teacher;
    for m in 0..3 {
        let subset = Dataset::new(data.splits.train.iter().filter(|i| i.scenario == m).cloned().collect());
        let (own, labels) = scores(&subset, |i| t.logit(&schema, &i.features, m));
        let (cross, _) = scores(&subset, |i| t.logit(&schema, &i.features, (m + 1) % 3));
        let (a_own, a_cross) = (auc(&own, &labels).unwrap(), auc(&cross, &labels).unwrap());
        assert!(a_own > a_cross, "scenario {}: {a_own} vs {a_cross}", m + 1);
        assert!(a_own > 0.6);
    }
}

#[test]
fn no_specific_signal_gives_one_teacher() {
    let schema = FeatureSchema::default();
    let cfg = GeneratorConfig {
        specific_signal_strength: 0.0,
        ..generator(2_000)
    };
    let data = generate(&cfg, &schema).unwrap();
    for inst in data.splits.test.iter() {
        let l0 = data.teacher.logit(&schema, &inst.features, 0);
        for m in 1..3 {
            assert_eq!(data.teacher.logit(&schema, &inst.features, m), l0);
        }
    }
}

#[test]
fn pure_noise_labels_cannot_be_learned() {
    let schema = FeatureSchema::default();
    let cfg = GeneratorConfig {
        samples: 40_000,
        shared_signal_strength: 0.0,
        specific_signal_strength: 0.0,
        split: [0.5, 0.1, 0.4],
        ..GeneratorConfig::default()
    };
    let data = generate(&cfg, &schema).unwrap();
    let n = 40_000.0;
    let rate = [&data.splits.train, &data.splits.valid, &data.splits.test]
        .iter()
        .map(|d| d.positive_rate() * d.len() as f64)
        .sum::<f64>()
        / n;
    assert!((rate - cfg.base_click_rate).abs() < 0.01, "{rate}");

    let model = ModelConfig {
        transfer_hidden: vec![16, 8],
        tower_hidden: vec![8],
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let out = train(&data.splits, &schema, &model, &train_cfg).unwrap();
    let probs = out.model.predict(&out.params, data.splits.test.instances()).unwrap();
    let labels: Vec<u8> = data.splits.test.iter().map(|i| i.label).collect();
    let a = auc(&probs, &labels).unwrap();
    assert!((a - 0.5).abs() < 0.02, "{a}");
}

#[test]
fn csv_round_trip_is_exact() {
    let schema = FeatureSchema::default();
    let data = generate(&generator(3_000), &schema).unwrap();
    let mut buf = Vec::new();
    write_csv(&mut buf, &data.splits.train, &schema).unwrap();
    let back = read_csv(buf.as_slice(), &schema).unwrap();
    assert_eq!(back, data.splits.train);
}

#[test]
fn schema_text_round_trip_and_hash() {
    let schema = FeatureSchema::default();
    let back = FeatureSchema::parse(&schema.to_text()).unwrap();
    assert_eq!(back, schema);
    assert_eq!(back.hash(), schema.hash());
    let mut other = schema.clone();
    other.fields[0].vocab_size += 1;
    assert_ne!(other.hash(), schema.hash());
    assert!(!schema.diff(&other).is_empty());
}

#[test]
fn generator_rejects_bad_configs() {
    let schema = FeatureSchema::default();
    for cfg in [
        GeneratorConfig {
            scenario_proportions: vec![0.5, 0.5, 0.5],
            ..generator(1_000)
        },
        GeneratorConfig {
            base_click_rate: 1.0,
            ..generator(1_000)
        },
        GeneratorConfig {
            shared_signal_strength: -1.0,
            ..generator(1_000)
        },
        GeneratorConfig {
            scenarios: 2,
            scenario_proportions: vec![0.5, 0.5],
            ..generator(1_000)
        },
    ] {
        assert!(generate(&cfg, &schema).is_err(), "{cfg:?}");
    }
    // Too few samples for the sparsest scenario to reach every split.
    assert!(generate(&generator(20), &schema).is_err());
}

proptest! {
    #[test]
    fn batches_cover_the_dataset_exactly_once(len in 0usize..300, batch in 1usize..64, seed in proptest::option::of(any::<u64>())) {
        let batches = batch_indices(len, batch, seed);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        prop_assert!(batches.iter().all(|b| b.len() <= batch && !b.is_empty()));
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
    }
}

#[test]
fn shuffling_depends_only_on_the_seed() {
    assert_eq!(batch_indices(100, 7, Some(3)), batch_indices(100, 7, Some(3)));
    assert_ne!(batch_indices(100, 7, Some(3)), batch_indices(100, 7, Some(4)));
    assert_eq!(batch_indices(5, 2, None), vec![vec![0, 1], vec![2, 3], vec![4]]);
}
