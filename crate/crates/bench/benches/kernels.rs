use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pslab_core::data::generate_scene;
use pslab_core::diffcore::{Array, Shape, Tape};
use pslab_core::loss::pe;
use pslab_core::matcher::{estimate, infer, FieldKey, View};
use pslab_core::render::{forward_render, generate_pseudo_pair};
use pslab_core::trainer::{pairs_from_scenes, Trainer};
use pslab_core::{EstimatorParams, LossConfig, SceneConfig, TrainConfig, TrainState};

fn scene() -> pslab_core::SceneSample {
    generate_scene(&SceneConfig::default()).expect("default scene")
}

fn noise(shape: Shape, seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::from_fn(shape, |_, _, _| rng.gen_range(0.0..1.0)).expect("finite noise")
}

fn bench_conv(c: &mut Criterion) {
    let input = noise(Shape::new(4, 48, 64), 1);
    let kernel = noise(Shape::new(16, 3, 3), 2);
    c.bench_function("conv2d 4->4 3x3 64x48 fwd+bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let x = tape.param(input.clone());
            let k = tape.param(kernel.clone());
            let y = tape.conv2d(x, k, 4, 1, 1, 1).unwrap();
            let l = tape.reduce_mean(y, None).unwrap();
            black_box(tape.backward(l).unwrap());
        })
    });
}

fn bench_render(c: &mut Criterion) {
    let s = scene();
    c.bench_function("forward_render 96x64", |b| {
        b.iter(|| black_box(forward_render(&s.left, &s.gt_disp_left, 96).unwrap()))
    });
    c.bench_function("pseudo pair wider 80 of 96", |b| {
        b.iter(|| black_box(generate_pseudo_pair(&s.left, &s.gt_disp_left, 80).unwrap()))
    });
}

fn bench_ssim(c: &mut Criterion) {
    let s = scene();
    let cfg = LossConfig::default();
    c.bench_function("pe (ssim + l1) 96x64 fwd+bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let x = tape.param(s.left.array().clone());
            let y = tape.constant(s.right.array().clone());
            let e = pe(&mut tape, x, y, &cfg).unwrap();
            let l = tape.reduce_mean(e, None).unwrap();
            black_box(tape.backward(l).unwrap());
        })
    });
}

fn bench_estimate(c: &mut Criterion) {
    let s = scene();
    let params = EstimatorParams::tinynet(s.left.channels(), 16, 0).unwrap();
    let key = FieldKey::new(0, View::Left);
    c.bench_function("tinynet infer 96x64", |b| {
        b.iter(|| black_box(infer(&params, s.left.array(), s.right.array(), key).unwrap()))
    });
    c.bench_function("tinynet estimate 96x64 fwd+bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let mut binding = params.bind(true);
            let l = tape.constant(s.left.array().clone());
            let r = tape.constant(s.right.array().clone());
            let d = estimate(&mut tape, &mut binding, l, r, key).unwrap();
            let m = tape.reduce_mean(d, None).unwrap();
            black_box(tape.backward(m).unwrap());
        })
    });
}

fn bench_step(c: &mut Criterion) {
    let pairs = pairs_from_scenes(&[scene()]);
    let mut group = c.benchmark_group("train step");
    group.sample_size(20);
    for label in ['a', 'h'] {
        let cfg = TrainConfig {
            strategy: pslab_core::Strategy::from_label(label).unwrap(),
            batch_size: 1,
            iterations: 1_000_000,
            ..TrainConfig::default()
        };
        let state = TrainState::initial(&cfg, &pairs).unwrap();
        group.bench_function(format!("{} batch 1", cfg.strategy), |b| {
            b.iter_batched(
                || Trainer::new(&pairs, cfg.clone(), state.clone()).unwrap(),
                |mut t| black_box(t.step().unwrap()),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_conv,
    bench_render,
    bench_ssim,
    bench_estimate,
    bench_step
);
criterion_main!(benches);
