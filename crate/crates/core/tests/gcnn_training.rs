mod common;

use common::toy_dataset;
use lesionuq::gcnn::{train, GcnnModel, GcnnParams, TrainConfig, Variant};
use lesionuq::graph::{FeatureScaler, LesionGraph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn accuracy(model: &GcnnModel, graphs: &[LesionGraph]) -> f64 {
    let correct = graphs
        .iter()
        .filter(|g| (model.predict_uncertainty(g).unwrap() > 0.5) == !g.tp)
        .count();
    correct as f64 / graphs.len() as f64
}

fn toy_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..Default::default()
    }
}

#[test]
fn separable_toy_reaches_full_accuracy() {
    let graphs = toy_dataset(11, 20);
    let (model, _) = train(&graphs, &toy_config(0, 50)).unwrap();
    assert_eq!(accuracy(&model, &graphs), 1.0);
}

#[test]
fn early_training_loss_does_not_increase() {
    let mut monotone = 0;
    for seed in 0..10 {
        let graphs = toy_dataset(100 + seed, 20);
        let (_, log) = train(&graphs, &toy_config(seed, 50)).unwrap();
        let first: Vec<f64> = log.epochs[..10].iter().map(|e| e.train_loss).collect();
        if first.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    assert!(
        monotone >= 9,
        "only {monotone}/10 seeds had non-increasing loss"
    );
}

#[test]
fn training_is_reproducible() {
    let graphs = toy_dataset(5, 10);
    for variant in [Variant::Classification, Variant::Regression] {
        let cfg = TrainConfig {
            variant,
            ..toy_config(3, 15)
        };
        let (a, la) = train(&graphs, &cfg).unwrap();
        let (b, lb) = train(&graphs, &cfg).unwrap();
        assert_eq!(a.params.data, b.params.data);
        assert_eq!(la, lb);
        let (c, _) = train(&graphs, &TrainConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a.params.data, c.params.data);
    }
}

#[test]
fn node_order_does_not_change_predictions() {
    let graphs = toy_dataset(8, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for variant in [Variant::Classification, Variant::Regression] {
        let model = GcnnModel {
            variant,
            params: GcnnParams::init(5, 64, variant.n_outputs(), &mut rng),
            scaler: FeatureScaler::fit(&graphs).unwrap(),
            n_channels: 1,
            seed: 0,
        };
        for g in &graphs {
            let mut perm: Vec<usize> = (0..g.n_nodes()).collect();
            perm.shuffle(&mut rng);
            let a = model.predict_uncertainty(g).unwrap();
            let b = model.predict_uncertainty(&g.permuted(&perm)).unwrap();
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn model_file_round_trip() {
    let graphs = toy_dataset(9, 8);
    let dir = tempfile::tempdir().unwrap();
    for variant in [Variant::Classification, Variant::Regression] {
        let (model, _) = train(
            &graphs,
            &TrainConfig {
                variant,
                ..toy_config(2, 5)
            },
        )
        .unwrap();
        let path = dir.path().join(format!("{variant}.model"));
        model.save(&path).unwrap();
        let back = GcnnModel::load(&path).unwrap();
        assert_eq!(back, model);
        for g in &graphs {
            assert_eq!(
                back.predict_uncertainty(g).unwrap().to_bits(),
                model.predict_uncertainty(g).unwrap().to_bits()
            );
        }
    }
}

#[test]
fn corrupt_model_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.model");
    std::fs::write(&path, b"{\"format\":\"nope\"}\n").unwrap();
    assert!(GcnnModel::load(&path).is_err());
    let graphs = toy_dataset(9, 4);
    let (model, _) = train(&graphs, &toy_config(2, 2)).unwrap();
    model.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(GcnnModel::load(&path).is_err());
}
