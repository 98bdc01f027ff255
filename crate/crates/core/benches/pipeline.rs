//! Single-threaded versus default rayon pool on the heavy stages.
//!
//! Build with `--no-default-features` to measure the sequential fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qkatlas_core::model::AttentionDirection;
use qkatlas_core::normalize::{key_translation, search_scale, ScaleSearchConfig};
use qkatlas_core::project::{pairwise_cosine, tsne_project, Method, TsneConfig};
use qkatlas_core::store::{precompute, PrecomputeConfig};
use qkatlas_core::synthetic::{self, HeadStyle};

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    vec![
        ("1-thread", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("default", rayon::ThreadPoolBuilder::new().build().unwrap()),
    ]
}

fn scale_search(c: &mut Criterion) {
    let h = synthetic::fill_head(0, 0, &synthetic::text_tokens(&[32; 8], false), 64, HeadStyle::decoder_like(), 1);
    let v = key_translation(&h).unwrap();
    let cfg = ScaleSearchConfig::default();
    let mut g = c.benchmark_group("scale_search");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| black_box(search_scale(&h, &v, &cfg, AttentionDirection::Causal).unwrap())))
        });
    }
    g.finish();
}

fn tsne(c: &mut Criterion) {
    let h = synthetic::gaussian_head(0, 0, &[50; 6], 32, 1.0, 1.0, 2);
    let d = pairwise_cosine(&h.joint_points()).distances;
    let cfg = TsneConfig { iters: 250, ..Default::default() };
    let mut g = c.benchmark_group("tsne");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| black_box(tsne_project(&d, 2, &cfg, 0).unwrap())))
        });
    }
    g.finish();
}

fn full_precompute(c: &mut Criterion) {
    let model = synthetic::text_model("bench", 2, 4, 16, AttentionDirection::Causal);
    let bundle = synthetic::text_bundle(model, &[24; 6], HeadStyle::decoder_like(), true, 3);
    let cfg = PrecomputeConfig { methods: vec![Method::Pca, Method::Tsne], dims: vec![2], ..Default::default() };
    let mut g = c.benchmark_group("precompute");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let out = tempfile::tempdir().unwrap();
                pool.install(|| black_box(precompute(&bundle, out.path(), &cfg, &|_| {}).unwrap()))
            })
        });
    }
    g.finish();
}

criterion_group!(benches, scale_search, tsne, full_precompute);
criterion_main!(benches);
