//! End-to-end runs on a small synthetic dataset.

use hscsfl_core::aggregation::RuleName;
use hscsfl_core::dataset::LabeledDataset;
use hscsfl_core::model::{local_train, TrainConfig};
use hscsfl_core::rng::{stream_seed, Stream};
use hscsfl_core::simulator::{
    prepare, run_with_data, AttackConfig, DatasetPaths, Datasets, ExperimentConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 12;
const CLASSES: usize = 4;

/// Each class lights up its own block of three features.
fn blobs(per_class: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for i in 0..per_class * CLASSES {
        let c = i % CLASSES;
        for j in 0..DIM {
            let on = j / 3 == c;
            features.push(if on { rng.gen_range(0.6..1.0) } else { rng.gen_range(0.0..0.3) });
        }
        labels.push(c);
    }
    LabeledDataset::new(features, DIM, labels, CLASSES).unwrap()
}

fn data() -> Datasets {
    Datasets::new(blobs(100, 1), blobs(25, 2)).unwrap()
}

fn config(rule: RuleName) -> ExperimentConfig {
    ExperimentConfig {
        name: "synthetic".into(),
        dataset: DatasetPaths::in_dir("unused"),
        clients: 8,
        rounds: 10,
        noniid_degree: 0.1,
        bias_clusters: vec![(0..CLASSES).collect()],
        per_client_volume: None,
        adversary_fraction: 0.25,
        attack: AttackConfig {
            source_classes: vec![0],
            target_class: 1,
        },
        rule,
        trim_fraction: None,
        train: TrainConfig {
            learning_rate: 0.1,
            batch_size: 8,
            local_epochs: 1,
            seed: 0,
        },
        eval_fraction: 0.1,
        polluted_classes: vec![],
        eta: 1.0,
        seed: 9,
        checkpoint_every: 0,
        snapshot_rounds: vec![],
    }
}

#[test]
fn one_client_one_round_fedavg_is_the_local_model() {
    let data = data();
    let mut cfg = config(RuleName::FedAvg);
    cfg.clients = 1;
    cfg.rounds = 1;
    cfg.adversary_fraction = 0.0;
    let prepared = prepare(&cfg, &data).unwrap();
    let start = hscsfl_core::model::ModelState::zeros(DIM, CLASSES);
    let local_cfg = TrainConfig {
        seed: stream_seed(cfg.seed, Stream::ClientTraining, 0, 1),
        ..cfg.train.clone()
    };
    let g = local_train(&start, &prepared.shards[0], &local_cfg, 0).unwrap();
    let result = run_with_data(&cfg, &data).unwrap();
    assert_eq!(result.final_model.flatten(), g.values);
    assert_eq!(result.records.len(), 1);
    assert_eq!(result.records[0].round, 1);
}

#[test]
fn equal_seeds_give_equal_runs() {
    let data = data();
    for rule in RuleName::ALL {
        let cfg = config(rule);
        let a = run_with_data(&cfg, &data).unwrap();
        let b = run_with_data(&cfg, &data).unwrap();
        assert_eq!(a.records, b.records, "{rule}");
        assert_eq!(a.final_model, b.final_model, "{rule}");
    }
    let mut other = config(RuleName::FedAvg);
    other.seed += 1;
    assert_ne!(
        run_with_data(&config(RuleName::FedAvg), &data).unwrap().final_model,
        run_with_data(&other, &data).unwrap().final_model
    );
}

#[test]
fn selecting_everyone_reduces_to_fedavg() {
    let data = data();
    let mut hs = config(RuleName::Hscsfl);
    hs.adversary_fraction = 0.0;
    let mut avg = hs.clone();
    avg.rule = RuleName::FedAvg;
    let mut trim = hs.clone();
    trim.rule = RuleName::TrimmedMean;
    trim.trim_fraction = Some(0.0);
    let reference = run_with_data(&avg, &data).unwrap().final_model;
    assert_eq!(run_with_data(&hs, &data).unwrap().final_model, reference);
    assert_eq!(run_with_data(&trim, &data).unwrap().final_model, reference);
}

#[test]
fn adversary_shards_carry_no_source_labels() {
    let data = data();
    let cfg = config(RuleName::FedAvg);
    let prepared = prepare(&cfg, &data).unwrap();
    let adversaries = cfg.adversaries();
    assert_eq!(adversaries.len(), 2);
    for (client, shard) in prepared.shards.iter().enumerate() {
        let counts = shard.class_counts();
        if adversaries.contains(&client) {
            assert_eq!(counts[0], 0, "client {client}");
        } else {
            assert!(counts[0] > 0, "client {client}");
        }
    }
}

#[test]
fn honest_scores_are_recorded_every_round() {
    let data = data();
    let result = run_with_data(&config(RuleName::Hscsfl), &data).unwrap();
    for (i, rec) in result.records.iter().enumerate() {
        assert_eq!(rec.round, i + 1);
        let board = rec.board.as_ref().expect("board");
        assert_eq!(board.scores.selected.len(), 6);
        assert_eq!(rec.selected, board.scores.selected);
        assert!(rec.hs_gap.is_some());
        for (p, r) in board.performance.values.iter().zip(&board.risk.values) {
            assert_eq!(p + r, 1.0);
        }
    }
    assert!(result.final_record().global_accuracy > 0.5);
}
