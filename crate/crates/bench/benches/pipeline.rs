use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gconv::pipeline::{fuse, lower, map_chain, random_bindings};
use gconv::{analyze_chain, exchange_for_consistency, exec_chain, preset, presets, run_pipeline};
use gconv_bench::corpus;

fn lowering(c: &mut Criterion) {
    let mut g = c.benchmark_group("lower_fuse");
    for (name, net) in corpus() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &net, |b, net| {
            b.iter(|| fuse(&lower(black_box(net)).unwrap().chain).unwrap())
        });
    }
    g.finish();
}

fn mapping(c: &mut Criterion) {
    let accel = preset("eyeriss").unwrap();
    let mut g = c.benchmark_group("map_exchange");
    for (name, net) in corpus() {
        let chain = fuse(&lower(&net).unwrap().chain).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(name), &chain, |b, chain| {
            b.iter(|| {
                let mut plans = map_chain(black_box(chain), &accel).unwrap();
                exchange_for_consistency(chain, &mut plans);
                plans
            })
        });
    }
    g.finish();
}

fn analysis(c: &mut Criterion) {
    let accel = preset("eyeriss").unwrap();
    let mut g = c.benchmark_group("analyze");
    for (name, net) in corpus() {
        let chain = fuse(&lower(&net).unwrap().chain).unwrap();
        let plans = map_chain(&chain, &accel).unwrap();
        g.bench_function(name, |b| {
            b.iter(|| analyze_chain(black_box(&chain), &plans, &accel).unwrap())
        });
    }
    g.finish();
}

fn compile(c: &mut Criterion) {
    let nets = corpus();
    let mut g = c.benchmark_group("compile");
    for accel in presets() {
        g.bench_function(&accel.name, |b| {
            b.iter(|| {
                for (_, net) in &nets {
                    black_box(run_pipeline(net, &accel, Default::default()).unwrap());
                }
            })
        });
    }
    g.finish();
}

fn interpret(c: &mut Criterion) {
    let mut g = c.benchmark_group("interpret");
    g.sample_size(10);
    for (name, net) in corpus() {
        let chain = fuse(&lower(&net).unwrap().chain).unwrap();
        let bindings = random_bindings(&chain, 7);
        g.bench_function(name, |b| b.iter(|| exec_chain(black_box(&chain), &bindings).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, lowering, mapping, analysis, compile, interpret);
criterion_main!(benches);
