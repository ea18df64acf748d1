//! Seeded training runs shared by the integration tests and the acceptance run.

use ldag_core::episodes::{split_folds, EpisodeSource, Phase, SyntheticWorld, FOLD_COUNT};
use ldag_core::metrics::aggregate;
use ldag_core::pipeline::{prepare, Toggles};
use ldag_core::training::{evaluate, evaluate_prepared, train, train_prepared, TrainConfig, TrainOutcome};

pub const OVERFIT_SEED: u64 = 7;

/// Eight 1-shot episodes of the two fold-0 test classes, 200 full-batch Adam
/// steps at the default hyperparameters; returns the run and its train mIoU.
pub fn overfit() -> (TrainOutcome, f64) {
    let world = SyntheticWorld::new(OVERFIT_SEED).unwrap();
    let cfg = TrainConfig {
        seed: OVERFIT_SEED,
        epochs: 200,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let split = split_folds(&world.catalog, FOLD_COUNT, 0).unwrap();
    assert_eq!(split.test_classes.len(), 2);
    let forward = cfg.forward();
    let episodes: Vec<_> = EpisodeSource::episodes(&world, &split, Phase::Test, 8, 1, OVERFIT_SEED)
        .unwrap()
        .iter()
        .map(|e| prepare(e, &world.attribute_set(&e.class_name, cfg.n).unwrap(), &forward).unwrap())
        .collect();
    assert_eq!(episodes.len(), 8);
    let out = train_prepared(&cfg, &episodes).unwrap();
    let records = evaluate_prepared(&out.params, &episodes, &forward).unwrap();
    let miou = aggregate(&records, cfg.echo()).unwrap().miou;
    (out, miou)
}

/// Means of `xs` over consecutive windows of `w`.
pub fn window_means(xs: &[f64], w: usize) -> Vec<f64> {
    xs.chunks(w).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct Ablation {
    /// MaE off (all-zero priors), MaA off.
    pub base: f64,
    /// MaE on, MaA off.
    pub mae: f64,
    /// Both modules on.
    pub full: f64,
    /// Both modules on, supports removed.
    pub no_support: f64,
}

/// Test mIoU of `toggles`, averaged over the four folds at desk-scale defaults.
pub fn fold_mean(seed: u64, toggles: Toggles) -> f64 {
    let world = SyntheticWorld::new(seed).unwrap();
    let total: f64 = (0..FOLD_COUNT)
        .map(|fold| {
            let cfg = TrainConfig {
                seed,
                fold,
                toggles,
                ..TrainConfig::default()
            };
            let out = train(&cfg, &world).unwrap();
            evaluate(&out.params, &cfg, &world).unwrap().miou
        })
        .sum();
    total / FOLD_COUNT as f64
}

pub fn ablation(seed: u64) -> Ablation {
    let t = |mae_on, maa_on, use_support| Toggles { mae_on, maa_on, use_support };
    Ablation {
        base: fold_mean(seed, t(false, false, true)),
        mae: fold_mean(seed, t(true, false, true)),
        full: fold_mean(seed, t(true, true, true)),
        no_support: fold_mean(seed, t(true, true, false)),
    }
}
