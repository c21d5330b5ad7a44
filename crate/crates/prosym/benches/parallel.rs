//! Throughput of the data-parallel hot paths, comparing the default rayon
//! pool against a single-thread pool (and the plain sequential map when the
//! `parallel` feature is off).
//!
//!     cargo bench -p prosym
//!     cargo bench -p prosym --no-default-features   # sequential build

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use prosym::data;
use prosym::distribution::NoiseSpec;
use prosym::groups::sinkhorn_tensor;
use prosym::parallel::{map_indexed, map_indexed_seq};
use prosym::rng::{substream, Lane};
use prosym::symmetrize::{
    GraphSymmetrized, GraphTask, PointSymmetrized, SampleKey, SymmetrizationConfig,
};
use prosym::tensor::Tensor;
use prosym::train::{RunConfig, TaskName};

fn graph_model() -> (GraphSymmetrized, prosym::groups::Graph) {
    let ds = data::gen_csl_dataset(11, &[2, 3], 4, 1).unwrap();
    let cfg = RunConfig::for_task(TaskName::ClassifyCsl, 1);
    let model = GraphSymmetrized::new(
        11,
        1,
        &[256, 128],
        1,
        GraphTask::Invariant,
        SymmetrizationConfig::learned(cfg.tau, NoiseSpec::uniform(1.0), 1, 10),
        32,
        1,
    );
    (model, ds.train[0].0.clone())
}

fn bench_mc_estimate(c: &mut Criterion) {
    let (model, graph) = graph_model();
    let key = SampleKey::new(7, Lane::EvalNoise, 0);
    let mut group = c.benchmark_group("mc_estimate_graph");
    for &samples in &[8usize, 32] {
        group.bench_with_input(BenchmarkId::new("default", samples), &samples, |b, &s| {
            b.iter(|| model.estimate(&graph, s, key).unwrap());
        });
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
            group.bench_with_input(
                BenchmarkId::new("one_thread", samples),
                &samples,
                |b, &s| {
                    b.iter(|| pool.install(|| model.estimate(&graph, s, key).unwrap()));
                },
            );
        }
    }
    group.finish();
}

fn bench_point_estimate(c: &mut Criterion) {
    let samples = data::gen_nbody(5, 1e-3, 50, 1, 3);
    let cfg = SymmetrizationConfig::learned(0.1, NoiseSpec::gaussian(1.0), 4, 16);
    let model = PointSymmetrized::new(5, 32, 2, 4, 2, false, cfg, 2);
    let key = SampleKey::new(9, Lane::EvalNoise, 0);
    let state = samples[0].initial.clone();
    let mut group = c.benchmark_group("mc_estimate_nbody");
    group.bench_function("default/16", |b| {
        b.iter(|| model.estimate_euclidean(&state, 16, key).unwrap());
    });
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        group.bench_function("one_thread/16", |b| {
            b.iter(|| pool.install(|| model.estimate_euclidean(&state, 16, key).unwrap()));
        });
    }
    group.finish();
}

fn bench_sinkhorn_batch(c: &mut Criterion) {
    let mut rng = substream(11, Lane::Diagnostics, 0);
    let logits: Vec<Tensor> = (0..64).map(|_| Tensor::randn([16, 16], 1.0, &mut rng)).collect();
    let mut group = c.benchmark_group("sinkhorn_batch_64x16x16");
    group.bench_function("map_indexed", |b| {
        b.iter(|| map_indexed(logits.len(), |i| sinkhorn_tensor(&logits[i], 20)));
    });
    group.bench_function("map_indexed_seq", |b| {
        b.iter(|| map_indexed_seq(logits.len(), |i| sinkhorn_tensor(&logits[i], 20)));
    });
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_mc_estimate, bench_point_estimate, bench_sinkhorn_batch
}
criterion_main!(benches);
