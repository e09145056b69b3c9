use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use seco_bench::{noise_stack, unit_rows};
use seco_core::encoder::{Encoder, EncoderConfig};
use seco_core::image::to_tensor;
use seco_core::learner::{info_nce, seco_loss, EmbeddingQueue, LearnerConfig, SecoState, SubspaceEmbeddings, TrainConfig};
use seco_core::rng::seeded;
use seco_core::views::{make_views, AugmentationConfig};

fn bench_info_nce(c: &mut Criterion) {
    let m = unit_rows(1026, 128, 1);
    let negatives: Vec<&[f64]> = (2..1026).map(|i| m.row(i).to_slice().unwrap()).collect();
    let (q, k) = (m.row(0).to_slice().unwrap(), m.row(1).to_slice().unwrap());
    c.bench_function("info_nce_1024_negatives", |b| {
        b.iter(|| info_nce(black_box(q), black_box(k), black_box(&negatives), 0.07).unwrap())
    });
}

fn bench_seco_loss(c: &mut Criterion) {
    let batch = 32;
    let emb: [SubspaceEmbeddings; 3] = std::array::from_fn(|s| SubspaceEmbeddings {
        q: unit_rows(batch, 128, 10 + s as u64),
        k0: unit_rows(batch, 128, 20 + s as u64),
        k1: unit_rows(batch, 128, 30 + s as u64),
        k2: unit_rows(batch, 128, 40 + s as u64),
    });
    let queues: [EmbeddingQueue; 3] = std::array::from_fn(|s| {
        let mut q = EmbeddingQueue::new(1024, 128).unwrap();
        q.push_rows(unit_rows(1024, 128, 50 + s as u64).view()).unwrap();
        q
    });
    c.bench_function("seco_loss_batch32_queue1024", |b| {
        b.iter(|| seco_loss(black_box(&emb), black_box(&queues), 0.07, false).unwrap())
    });
}

fn bench_encoder(c: &mut Criterion) {
    let enc = Encoder::new(EncoderConfig::default(), &mut seeded(2)).unwrap();
    let stack = noise_stack(64, 3);
    let refs: Vec<_> = stack.iter().collect();
    let x = to_tensor(&refs);
    c.bench_function("encoder_embed_5x64x64", |b| b.iter(|| enc.embed(black_box(&x))));
}

fn bench_train_step(c: &mut Criterion) {
    let learner = LearnerConfig {
        queue_size: 256,
        key_momentum: 0.99,
        ..Default::default()
    };
    let train = TrainConfig::default();
    let state = SecoState::new(learner, &train, 4).unwrap();
    let aug = AugmentationConfig::default();
    let mut rng = seeded(5);
    let batch: Vec<_> = (0..8)
        .map(|i| make_views(&noise_stack(64, 100 + i), &mut rng, &aug).unwrap())
        .collect();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("train_step_batch8", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| s.train_step(black_box(&batch), 0.03).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

fn bench_views(c: &mut Criterion) {
    let stack = noise_stack(64, 6);
    let aug = AugmentationConfig::default();
    let mut rng = seeded(7);
    c.bench_function("make_views_64", |b| b.iter(|| make_views(black_box(&stack), &mut rng, &aug).unwrap()));
}

criterion_group!(benches, bench_info_nce, bench_seco_loss, bench_encoder, bench_train_step, bench_views);
criterion_main!(benches);
