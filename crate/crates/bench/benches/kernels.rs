use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flowconvert_bench::Fixture;
use flowconvert_core::duration::{build_warp_matrix, warp_frames};
use flowconvert_core::eval::wer;
use flowconvert_core::LatentSequence;

fn flow(c: &mut Criterion) {
    let fx = Fixture::new();
    let mut group = c.benchmark_group("flow");
    for t in [50, 200] {
        let (x, cond) = fx.frames(t);
        let (z, _) = fx.flow.inverse(&x, &cond).unwrap();
        group.bench_with_input(BenchmarkId::new("inverse", t), &t, |b, _| {
            b.iter(|| fx.flow.inverse(black_box(&x), &cond).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward", t), &t, |b, _| {
            b.iter(|| fx.flow.forward(black_box(&z), &cond).unwrap())
        });
    }
    group.finish();
}

fn warp(c: &mut Criterion) {
    let src: Vec<usize> = (0..40).map(|k| 2 + k % 7).collect();
    let tgt: Vec<usize> = (0..40).map(|k| 1 + (k * 5) % 9).collect();
    let z = ndarray::Array2::from_shape_fn((src.iter().sum(), 16), |(i, j)| (i * 16 + j) as f64);
    c.bench_function("warp/build", |b| b.iter(|| build_warp_matrix(black_box(&src), &tgt).unwrap()));
    let w = build_warp_matrix(&src, &tgt).unwrap();
    c.bench_function("warp/apply", |b| b.iter(|| warp_frames(black_box(&z), &w).unwrap()));
}

fn edit_distance(c: &mut Criterion) {
    let r: Vec<usize> = (0..40).map(|k| (k * 7) % 40).collect();
    let h: Vec<usize> = (0..38).map(|k| (k * 11) % 40).collect();
    c.bench_function("wer/40x38", |b| b.iter(|| wer(black_box(&r), &h).unwrap()));
}

fn attention(c: &mut Criterion) {
    let fx = Fixture::new();
    let u = &fx.corpus.utterances[0];
    let cond = fx.features.build_conditioning(&u.phoneme_seq, u.speaker_id, u.accent_id).unwrap();
    let (z, _): (LatentSequence, f64) = fx.flow.inverse(&u.mel, &cond).unwrap();
    c.bench_function("attention/attend", |b| {
        b.iter(|| fx.attention.attend(&cond, &u.phoneme_seq, black_box(&z), &u.phoneme_seq).unwrap())
    });
}

criterion_group!(benches, flow, warp, edit_distance, attention);
criterion_main!(benches);
