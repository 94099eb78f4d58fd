use std::collections::HashSet;

use halloc_core::corpus::{self, GenerationRecord};
use halloc_core::harness::{self, AnnotatedRecord, GroupBy, ModelSpec, RateDenominator, Regime};
use halloc_core::predict::{self, ModelKind, TrainConfig};
use halloc_core::synthetic::{planted_corpus, PlantedConfig};
use halloc_core::FeatureMode;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus_of(n: usize) -> Vec<GenerationRecord> {
    planted_corpus(&PlantedConfig {
        records: n,
        max_tokens: 14,
        ..Default::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folds_partition_every_group(n in 10usize..80, k in 2usize..6, seed in any::<u64>()) {
        let records = corpus_of(n);
        for regime in Regime::ALL {
            let Ok(plan) = harness::make_folds(&records, regime, k, seed) else { continue };
            let mut seen = HashSet::new();
            for folds in plan.groups.values() {
                prop_assert_eq!(folds.len(), k);
                let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
                for id in folds.iter().flatten() {
                    prop_assert!(seen.insert(id.clone()));
                }
            }
            prop_assert_eq!(seen.len(), n);
        }
    }
}

#[test]
fn evaluation_ignores_record_order() {
    let records = corpus_of(60);
    let mut samples = harness::build_samples(&records, FeatureMode::PerToken).unwrap();
    let plan = harness::make_folds(&samples, Regime::OnePerDataset, 3, 5).unwrap();
    let spec = ModelSpec::trained(
        ModelKind::LinearLogistic,
        TrainConfig {
            epochs: 3,
            ..Default::default()
        },
    );
    let a = harness::evaluate(&plan, &samples, &spec, FeatureMode::PerToken).unwrap();
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let b = harness::evaluate(&plan, &samples, &spec, FeatureMode::PerToken).unwrap();
    assert_eq!(a, b);
}

#[test]
fn saved_models_predict_identically() {
    let records = corpus_of(80);
    let dir = tempfile::tempdir().unwrap();
    for kind in [ModelKind::FeedForward, ModelKind::AttentionPointer] {
        let samples = harness::build_samples(&records, kind.mode()).unwrap();
        let matrices: Vec<_> = samples.iter().map(|s| s.matrix.clone()).collect();
        let config = TrainConfig {
            epochs: 1,
            feed_forward_hidden: 8,
            encoder: kind.encoder().map(|e| halloc_core::predict::EncoderConfig {
                hidden_dim: 4,
                layers: 1,
                heads: 2,
                ff_dim: 4,
                pointer_dim: 4,
                ..halloc_core::predict::EncoderConfig::default_for(e)
            }),
            ..Default::default()
        };
        let model = predict::train(&matrices, kind, &config).unwrap();
        let path = dir.path().join(format!("{kind}.json"));
        predict::save_model(&model, &path).unwrap();
        let loaded = predict::load_model(&path).unwrap();
        for s in &samples {
            assert_eq!(
                predict::predict_index(&model, &s.matrix, 0.5).unwrap(),
                predict::predict_index(&loaded, &s.matrix, 0.5).unwrap()
            );
        }
    }
}

#[test]
fn instance_files_round_trip() {
    let records = corpus_of(25);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    corpus::save_records(&path, &records).unwrap();
    assert_eq!(corpus::load_records(&path).unwrap(), records);
}

#[test]
fn planted_gold_tokens_have_low_probability() {
    let annotated: Vec<AnnotatedRecord> = corpus_of(100).into_iter().map(|r| AnnotatedRecord::new(r).unwrap()).collect();
    let report = harness::distribution_report(&annotated);
    use harness::{Position, Signal};
    let gold = report.find("dataset", "mbpp", Signal::ChosenProb, Position::Gold).unwrap();
    let pre = report.find("dataset", "mbpp", Signal::ChosenProb, Position::PreGold).unwrap();
    assert!(gold.max < pre.min);
    let rates = harness::type_rate_table(&annotated, GroupBy::All, RateDenominator::Prefix);
    let all = harness::type_rate_table(&annotated, GroupBy::All, RateDenominator::All);
    for (t, cell) in &rates.groups["all"] {
        assert!(cell.rate >= all.rate("all", *t).unwrap());
    }
}
