use std::hint::black_box;

use certkv::harness::{generate_workload, run_decode_step, KvScratch, WorkloadConfig, WorkloadKind};
use certkv::{dense_attention, phase1_score, quantize_key_block, quantize_value_block, PolicyConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

const D: usize = 128;

fn block(seed: u32) -> Vec<f32> {
    (0..16 * D)
        .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) as f32 / u32::MAX as f32) * 4.0 - 2.0)
        .collect()
}

fn quantize(c: &mut Criterion) {
    let data = block(1);
    let mut g = c.benchmark_group("quantize");
    g.throughput(Throughput::Elements(data.len() as u64));
    g.bench_function("int8_keys", |b| {
        b.iter(|| quantize_key_block(black_box(&data), D, 0).unwrap())
    });
    g.bench_function("int4_values", |b| {
        b.iter(|| quantize_value_block(black_box(&data), D, 16).unwrap())
    });
    g.finish();
}

fn scoring(c: &mut Criterion) {
    let mut g = c.benchmark_group("score");
    for n in [2048, 8192] {
        let w = generate_workload(&WorkloadConfig::new(WorkloadKind::Gaussian, n, D, 1, 1, 1, 7)).unwrap();
        let (q, cache) = (&w.queries[0][0], &w.caches[0]);
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::new("phase1", n), &n, |b, _| {
            b.iter(|| phase1_score(black_box(q), cache).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("dense", n), &n, |b, _| {
            b.iter(|| dense_attention(black_box(q), cache).unwrap())
        });
    }
    g.finish();
}

fn decode_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("decode_step");
    g.sample_size(20);
    for n in [2048, 8192] {
        let w = generate_workload(&WorkloadConfig::new(WorkloadKind::Gaussian, n, D, 4, 2, 1, 7)).unwrap();
        let policy = PolicyConfig::default();
        g.bench_with_input(BenchmarkId::new("certified", n), &n, |b, _| {
            b.iter(|| {
                let mut scratch: Vec<KvScratch> = (0..2).map(|_| KvScratch::new(&policy)).collect();
                run_decode_step(0, black_box(&w.queries[0]), &w.caches, &mut scratch, &policy, 7).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, quantize, scoring, decode_step);
criterion_main!(benches);
