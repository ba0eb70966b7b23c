#![allow(dead_code)]

use std::path::Path;

use lvseg::ingest::{open_dataset, Dataset};
use lvseg::model::Family;
use lvseg::phantom::{derive_specs, export_sparse, generate_phantom, PhantomSpec, SplitRatios};
use lvseg::train::{ModelSection, Stage, TrainConfig};
use lvseg::types::{RandomSource, VideoTensor};

/// Export phantoms with exact split counts and load them back.
pub fn phantom_dataset(dir: &Path, counts: [usize; 3], size: usize, length: usize, period: f64, seed: u64) -> Dataset {
    let n: usize = counts.iter().sum();
    let template = PhantomSpec {
        height: size,
        width: size,
        length,
        period,
        seed,
        ..PhantomSpec::default()
    };
    let phantoms: Vec<_> = derive_specs(&template, n)
        .iter()
        .map(|s| generate_phantom(s).unwrap())
        .collect();
    // val/test counts are floored, so nudge by half a video
    let frac = |k: usize| if k == 0 { 0.0 } else { (k as f64 + 0.5) / n as f64 };
    let ratios = SplitRatios {
        train: 1.0 - frac(counts[1]) - frac(counts[2]),
        val: frac(counts[1]),
        test: frac(counts[2]),
    };
    export_sparse(&phantoms, dir, ratios).unwrap();
    Dataset::load(&open_dataset(dir).unwrap()).unwrap()
}

/// Desk-scale run: 4-frame clips at stride 2, stage widths 2..32.
pub fn desk_config(stage: Stage, epochs: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(stage);
    c.epochs = Some(epochs);
    c.frames = 4;
    c.period = 2;
    c.batch_size = 4;
    c.learning_rate = 3e-3;
    c.seed = seed;
    c.deterministic = true;
    c.model = ModelSection {
        family: Family::Volumetric,
        channels: Some(vec![2, 4, 8, 16, 32]),
        residual_units: Some(1),
        init_seed: seed,
    };
    c
}

pub fn random_clip(h: usize, w: usize, f: usize, seed: u64) -> VideoTensor {
    let mut g = RandomSource::new(seed);
    let frames: Vec<Vec<f32>> = (0..f)
        .map(|_| (0..h * w).map(|_| g.uniform() as f32 + 0.05).collect())
        .collect();
    VideoTensor::from_gray_frames(h, w, &frames).unwrap()
}
