//! Threaded versus single-worker execution of the hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use lvseg::model::{build_model, Family, ModelConfig};
use lvseg::nn::kernels::{conv3d_backward, conv3d_forward, ConvGeom};
use lvseg::nn::Volume;
use lvseg::parallel;
use lvseg::train::{train_step, AdamParams, AdamW, Example};
use lvseg::types::{BinaryMask, RandomSource, SparseLabelSet, VideoTensor};

fn random_volume(shape: [usize; 4], seed: u64) -> Volume {
    let mut g = RandomSource::new(seed);
    let n = shape.iter().product();
    Volume::from_vec(shape, (0..n).map(|_| g.normal()).collect()).unwrap()
}

fn random_clip(h: usize, w: usize, f: usize, seed: u64) -> VideoTensor {
    let mut g = RandomSource::new(seed);
    let frames: Vec<Vec<f32>> = (0..f).map(|_| (0..h * w).map(|_| g.uniform() as f32).collect()).collect();
    VideoTensor::from_gray_frames(h, w, &frames).unwrap()
}

fn conv(c: &mut Criterion) {
    let x = random_volume([8, 8, 32, 32], 1);
    let geom = ConvGeom::same([3, 3, 3], [1, 1, 1]);
    let w = random_volume([16, 8, 27, 1], 2).data;
    let bias = vec![0.0; 16];
    let dy = random_volume([16, 8, 32, 32], 3);
    let mut group = c.benchmark_group("conv3d");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("forward", "parallel"), |b| {
        b.iter(|| conv3d_forward(&x, &w, Some(&bias), 16, &geom))
    });
    group.bench_function(BenchmarkId::new("forward", "sequential"), |b| {
        b.iter(|| parallel::run_sequential(|| conv3d_forward(&x, &w, Some(&bias), 16, &geom)))
    });
    group.bench_function(BenchmarkId::new("backward", "parallel"), |b| {
        b.iter(|| conv3d_backward(&x, &w, 16, &geom, &dy, true))
    });
    group.bench_function(BenchmarkId::new("backward", "sequential"), |b| {
        b.iter(|| parallel::run_sequential(|| conv3d_backward(&x, &w, 16, &geom, &dy, true)))
    });
    group.finish();
}

fn step(c: &mut Criterion) {
    let cfg = ModelConfig {
        encoder_channels: vec![2, 4, 8, 16, 32],
        ..ModelConfig::tiny(Family::Volumetric, 64, 64, 4)
    };
    let model = build_model(cfg).unwrap();
    let disk = BinaryMask::from_fn(64, 64, |y, x| (y as f64 - 32.0).powi(2) + (x as f64 - 32.0).powi(2) < 200.0);
    let batch: Vec<Example> = (0..4)
        .map(|i| {
            let clip = random_clip(64, 64, 4, i);
            let mut labels = SparseLabelSet::new(4, 64, 64);
            labels.insert(1, disk.clone()).unwrap();
            Example::Segmentation { clip, labels }
        })
        .collect();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (name, seq) in [("parallel", false), ("sequential", true)] {
        group.bench_function(name, |b| {
            let mut m = model.clone();
            let mut opt = AdamW::new(m.params(), 1e-3, 0.0, AdamParams::default());
            b.iter(|| {
                if seq {
                    parallel::run_sequential(|| train_step(&mut m, &mut opt, &batch).unwrap())
                } else {
                    train_step(&mut m, &mut opt, &batch).unwrap()
                }
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv, step);
criterion_main!(benches);
