//! Batch gradient computation on the rayon pool versus a plain loop.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ldag_core::autodiff::Precision;
use ldag_core::episodes::{split_folds, EpisodeSource, Phase, SyntheticWorld, FOLD_COUNT};
use ldag_core::exec::{map_ordered, map_sequential};
use ldag_core::model::{FrozenDecoder, ModelParameters, ModelShape};
use ldag_core::pipeline::{episode_step, prepare, PreparedEpisode};
use ldag_core::training::TrainConfig;

fn batch(size: usize) -> Vec<PreparedEpisode> {
    let world = SyntheticWorld::new(0).unwrap();
    let cfg = TrainConfig::default();
    let split = split_folds(&world.catalog, FOLD_COUNT, 0).unwrap();
    let forward = cfg.forward();
    EpisodeSource::episodes(&world, &split, Phase::Train, size, 1, 0)
        .unwrap()
        .iter()
        .map(|ep| prepare(ep, &world.attribute_set(&ep.class_name, cfg.n).unwrap(), &forward).unwrap())
        .collect()
}

fn steps(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let forward = cfg.forward();
    let params = ModelParameters::init(ModelShape { text_dim: 64, feat_dim: 64, n: cfg.n }, 0).unwrap();
    let decoder = FrozenDecoder::for_params(&params);
    let step = |ep: &PreparedEpisode| episode_step(&params, &decoder, ep, &forward, Precision::F32).unwrap().loss;

    let mut group = c.benchmark_group("episode_step");
    group.sample_size(10);
    for size in [8, 32] {
        let eps = batch(size);
        group.bench_with_input(BenchmarkId::new("map_ordered", size), &eps, |b, eps| b.iter(|| map_ordered(eps, step)));
        group.bench_with_input(BenchmarkId::new("map_sequential", size), &eps, |b, eps| b.iter(|| map_sequential(eps, step)));
    }
    group.finish();
}

criterion_group!(benches, steps);
criterion_main!(benches);
