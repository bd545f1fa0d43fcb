//! Loss gradient against central finite differences, plus training properties.

use hscsfl_core::dataset::LabeledDataset;
use hscsfl_core::model::{apply_update, local_train, GradientVector, ModelState, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FEATURES: usize = 10;
const CLASSES: usize = 3;

fn random_instance(rng: &mut ChaCha8Rng, samples: usize) -> (ModelState, LabeledDataset) {
    let flat: Vec<f64> = (0..(FEATURES + 1) * CLASSES).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let model = ModelState::from_flat(FEATURES, CLASSES, &flat, 0).unwrap();
    let features: Vec<f64> = (0..samples * FEATURES).map(|_| rng.gen_range(0.0..1.0)).collect();
    let labels: Vec<usize> = (0..samples).map(|_| rng.gen_range(0..CLASSES)).collect();
    (model, LabeledDataset::new(features, FEATURES, labels, CLASSES).unwrap())
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let samples = rng.gen_range(1..=8);
        let (model, data) = random_instance(&mut rng, samples);
        let idx: Vec<usize> = (0..samples).collect();
        let (_, analytic) = model.loss_and_gradient(&data, &idx);
        let base = model.flatten();
        let loss_at = |theta: &[f64]| {
            ModelState::from_flat(FEATURES, CLASSES, theta, 0)
                .unwrap()
                .loss_and_gradient(&data, &idx)
                .0
        };
        let numeric: Vec<f64> = (0..base.len())
            .map(|p| {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[p] += h;
                minus[p] -= h;
                (loss_at(&plus) - loss_at(&minus)) / (2.0 * h)
            })
            .collect();
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let rel = diff / scale.max(1e-12);
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

#[test]
fn gradient_of_trained_model_is_the_parameter_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (start, data) = random_instance(&mut rng, 20);
    let cfg = TrainConfig {
        learning_rate: 0.1,
        batch_size: 4,
        local_epochs: 2,
        seed: 5,
    };
    let g = local_train(&start, &data, &cfg, 7).unwrap();
    assert_eq!(g.client_id, 7);
    assert_eq!(g.len(), start.parameter_count());
    let trained = apply_update(&start, &g, 1.0).unwrap();
    let (before, _) = start.loss_and_gradient(&data, &(0..20).collect::<Vec<_>>());
    let (after, _) = trained.loss_and_gradient(&data, &(0..20).collect::<Vec<_>>());
    assert!(after < before, "loss went from {before} to {after}");
    assert_eq!(trained.version, start.version + 1);
    assert_eq!(local_train(&start, &data, &cfg, 7).unwrap(), g);
}

#[test]
fn zero_update_keeps_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (start, _) = random_instance(&mut rng, 1);
    let zero = GradientVector::new(0, vec![0.0; start.parameter_count()]);
    assert_eq!(apply_update(&start, &zero, 3.0).unwrap().flatten(), start.flatten());
}
