//! Parallel vs single-threaded throughput of the data-parallel stages.
//!
//! Each stage runs once on the default rayon pool and once inside a
//! one-thread pool, which is what the sequential build does. Building with
//! `--no-default-features` runs only the sequential variant.

use criterion::{criterion_group, criterion_main, Criterion};

use pgan::config::RunConfig;
use pgan::data::generate_dataset;
use pgan::pipeline::detect;
use pgan::trainer::{FeatureCache, ModelState};

fn bench_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.scene.image_size = 240;
    cfg.model.discriminator.hidden = [64, 32];
    cfg
}

#[cfg(feature = "parallel")]
fn variants() -> Vec<(&'static str, Option<rayon::ThreadPool>)> {
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool");
    vec![("parallel", None), ("sequential", Some(single))]
}

#[cfg(not(feature = "parallel"))]
fn variants() -> Vec<(&'static str, Option<()>)> {
    vec![("sequential", None)]
}

#[cfg(feature = "parallel")]
fn run_in<R: Send>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> R + Send) -> R {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_in<R>(_: &Option<()>, f: impl FnOnce() -> R) -> R {
    f()
}

fn throughput(c: &mut Criterion) {
    let cfg = bench_config();
    let data = generate_dataset(&cfg.scene, &cfg.proposals, 0, 8, 1).expect("dataset");
    let state = ModelState::new(&cfg.model, cfg.scene.num_classes, 1).expect("model");
    let level = state.config.generator.input_level;
    let roi = state.config.roi_hw();

    let mut group = c.benchmark_group("stages");
    group.sample_size(10);
    for (name, pool) in variants() {
        group.bench_function(format!("generate_dataset/{name}"), |b| {
            b.iter(|| {
                run_in(&pool, || {
                    generate_dataset(&cfg.scene, &cfg.proposals, 0, 8, 1).unwrap()
                })
            })
        });
        group.bench_function(format!("feature_cache/{name}"), |b| {
            b.iter(|| {
                run_in(&pool, || {
                    FeatureCache::build(&state.backbone, &data, level, roi).unwrap()
                })
            })
        });
        group.bench_function(format!("detect/{name}"), |b| {
            b.iter(|| run_in(&pool, || detect(&state, &data, true, &cfg.eval).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, throughput);
criterion_main!(benches);
