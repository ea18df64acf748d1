//! Fold, k-shot and attribute-count checks shared by the protocol tests and
//! the acceptance run.

use ldag_core::attributes::ClassCatalog;
use ldag_core::episodes::{split_folds, EpisodeSource, Phase, SyntheticWorld, FOLD_COUNT};
use ldag_core::metrics::EvalReport;
use ldag_core::model::{FrozenDecoder, ModelParameters, ModelShape};
use ldag_core::pipeline::{prepare, predict_episode};
use ldag_core::training::{evaluate, train, TrainConfig};

pub fn catalog(m: usize) -> ClassCatalog {
    ClassCatalog::new("protocol", (0..m).map(|i| format!("class{i:02}")).collect()).unwrap()
}

/// Every fold's test set is disjoint from its train set, the two cover the
/// catalog, and the test sets of all folds partition it.
pub fn folds_partition(m: usize) -> Result<(), String> {
    let cat = catalog(m);
    let mut seen = vec![0usize; m];
    for fold in 0..FOLD_COUNT {
        let s = split_folds(&cat, FOLD_COUNT, fold).map_err(|e| e.to_string())?;
        if s.test_classes.len() != m / FOLD_COUNT {
            return Err(format!("M={m} fold {fold}: {} test classes", s.test_classes.len()));
        }
        let mut all: Vec<usize> = s.train_classes.iter().chain(&s.test_classes).copied().collect();
        all.sort_unstable();
        if all != (0..m).collect::<Vec<_>>() {
            return Err(format!("M={m} fold {fold}: train and test overlap or miss classes"));
        }
        s.test_classes.iter().for_each(|&c| seen[c] += 1);
    }
    if seen.iter().any(|&k| k != 1) {
        return Err(format!("M={m}: test sets do not partition the catalog"));
    }
    Ok(())
}

/// Largest probability difference between a 1-shot prediction and the 5-shot
/// prediction whose supports are five copies of the same support.
pub fn identical_support_gap(seed: u64) -> f64 {
    let world = SyntheticWorld::new(seed).unwrap();
    let cfg = TrainConfig { seed, ..TrainConfig::default() };
    let split = split_folds(&world.catalog, FOLD_COUNT, 0).unwrap();
    let forward = cfg.forward();
    let params = ModelParameters::init(ModelShape { text_dim: 64, feat_dim: 64, n: cfg.n }, seed).unwrap();
    let decoder = FrozenDecoder::for_params(&params);
    let mut worst = 0.0f64;
    for one in EpisodeSource::episodes(&world, &split, Phase::Test, 4, 1, seed).unwrap() {
        let attrs = world.attribute_set(&one.class_name, cfg.n).unwrap();
        let mut five = one.clone();
        five.supports = vec![one.supports[0].clone(); 5];
        let (p1, _) = predict_episode(&params, &decoder, &prepare(&one, &attrs, &forward).unwrap(), &forward).unwrap();
        let (p5, _) = predict_episode(&params, &decoder, &prepare(&five, &attrs, &forward).unwrap(), &forward).unwrap();
        if p1.mask != p5.mask {
            return f64::INFINITY;
        }
        for (a, b) in p1.probabilities.data().iter().zip(p5.probabilities.data()) {
            worst = worst.max(f64::from((a - b).abs()));
        }
    }
    worst
}

pub const N_SWEEP: [usize; 7] = [0, 1, 2, 3, 4, 5, 10];

/// A short train-and-evaluate run per attribute count.
pub fn n_sweep(seed: u64) -> Vec<(usize, EvalReport)> {
    let world = SyntheticWorld::new(seed).unwrap();
    N_SWEEP
        .iter()
        .map(|&n| {
            let cfg = TrainConfig {
                n,
                seed,
                epochs: 1,
                batch_size: 4,
                episodes: 8,
                eval_episodes: 8,
                ..TrainConfig::default()
            };
            let out = train(&cfg, &world).unwrap();
            (n, evaluate(&out.params, &cfg, &world).unwrap())
        })
        .collect()
}

pub fn report_is_valid(n: usize, r: &EvalReport) -> bool {
    let unit = |v: f64| (0.0..=1.0).contains(&v);
    r.episode_count > 0
        && unit(r.miou)
        && unit(r.fbiou)
        && r.per_class_iou.values().all(|&v| unit(v))
        && r.episodes.len() == r.episode_count
        && r.config["n"] == serde_json::json!(n)
}
