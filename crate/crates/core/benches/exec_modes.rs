use std::hint::black_box;

use boxforge::postproc::{evaluate_ap_with, EvalParams};
use boxforge::simtrain::{parse_variant_list, run_variant_grid, TrainConfig, Trainer, VariantConfig};
use boxforge::ExecMode;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn training_step(c: &mut Criterion) {
    let cfg = TrainConfig {
        scenes: 16,
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("training_step");
    for (name, mode) in MODES {
        let trainer = Trainer::from_config(&cfg, mode).unwrap();
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter_batched(
                || trainer.clone(),
                |mut t| black_box(t.step().unwrap()),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let cfg = TrainConfig {
        scenes: 32,
        ..TrainConfig::default()
    };
    let trainer = Trainer::from_config(&cfg, ExecMode::Parallel).unwrap();
    let dets = trainer.detections();
    let gts = trainer.ground_truth();
    let params = EvalParams::default();
    let mut g = c.benchmark_group("evaluate_ap");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(evaluate_ap_with(&dets, &gts, &params, mode)))
        });
    }
    g.finish();
}

fn variant_grid(c: &mut Criterion) {
    let base = TrainConfig {
        scenes: 4,
        variant: VariantConfig {
            epochs: 4,
            ..VariantConfig::default()
        },
        ..TrainConfig::default()
    };
    let variants = parse_variant_list("baseline,dnr,mean,dnr+mean", &base.variant).unwrap();
    let mut g = c.benchmark_group("variant_grid");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(run_variant_grid(&base, &variants, mode).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, training_step, evaluation, variant_grid);
criterion_main!(benches);
