use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mtle_core::corpus::synth::{generate_synthetic_tasks, Scenario};
use mtle_core::corpus::{build_vocabulary, TaskData, TokenId, Vocabulary};
use mtle_core::model::label_ids;
use mtle_core::trainer::{evaluate, init_parameters, pairwise_ablation, TrainConfig};

fn fixture(n: usize, tasks: usize) -> (Vec<TaskData>, Vocabulary) {
    let raw = generate_synthetic_tasks(0, Scenario::Domain, &vec![n; tasks]);
    let vocab = build_vocabulary(&raw, 1).unwrap();
    (raw.iter().map(|t| t.encode(&vocab)).collect(), vocab)
}

fn cfg() -> TrainConfig {
    TrainConfig {
        embed_dim: 64,
        hidden_size: 48,
        batch_size: 32,
        ..Default::default()
    }
}

fn batch_gradient(c: &mut Criterion) {
    let (tasks, vocab) = fixture(64, 1);
    let (model, _) = init_parameters(&cfg(), vocab.len());
    let labels = label_ids(&vocab, &tasks[0].spec.label_tokens);
    let batch: Vec<(&[TokenId], usize)> =
        tasks[0].train.examples[..32].iter().map(|e| (e.tokens.as_slice(), e.gold)).collect();
    let mut group = c.benchmark_group("batch_gradient");
    for parallel in [false, true] {
        group.bench_with_input(BenchmarkId::from_parameter(mode(parallel)), &parallel, |b, &p| {
            b.iter(|| model.batch_gradient(&batch, &labels, 1.0, p).unwrap())
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let (tasks, vocab) = fixture(50, 1);
    let (model, _) = init_parameters(&cfg(), vocab.len());
    let labels = label_ids(&vocab, &tasks[0].spec.label_tokens);
    let mut group = c.benchmark_group("evaluate");
    for parallel in [false, true] {
        group.bench_with_input(BenchmarkId::from_parameter(mode(parallel)), &parallel, |b, &p| {
            b.iter(|| evaluate(&model, &labels, &tasks[0].test.examples, p).unwrap())
        });
    }
    group.finish();
}

fn ablation(c: &mut Criterion) {
    let (tasks, vocab) = fixture(24, 3);
    let cfg = TrainConfig {
        embed_dim: 8,
        hidden_size: 6,
        batch_size: 8,
        epochs: 2,
        parallel: false,
        ..Default::default()
    };
    let mut group = c.benchmark_group("pairwise_ablation");
    group.sample_size(10);
    for parallel in [false, true] {
        group.bench_with_input(BenchmarkId::from_parameter(mode(parallel)), &parallel, |b, &p| {
            b.iter(|| pairwise_ablation(&tasks, &vocab, &cfg, p).unwrap())
        });
    }
    group.finish();
}

fn mode(parallel: bool) -> &'static str {
    if parallel {
        "parallel"
    } else {
        "serial"
    }
}

criterion_group!(benches, batch_gradient, evaluation, ablation);
criterion_main!(benches);
