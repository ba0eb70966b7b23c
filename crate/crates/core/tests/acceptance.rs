//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the summary prints in order. Set
//! `LVSEG_ACCEPTANCE=1,4,7` to run a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use lvseg::analysis::{mean_frame_dsc, predict_video, shuffle_report, spectrum};
use lvseg::ingest::{Dataset, Split};
use lvseg::losses::{labeled_only_dice_with_grad, sigmoid, sparse_dice_loss, sparse_dice_with_grad};
use lvseg::masking::{mask_clip, masked_count};
use lvseg::metrics::{bootstrap_ci, dsc, score_split, DEFAULT_LEVEL, DEFAULT_RESAMPLES};
use lvseg::model::{build_model, Checkpoint, Framewise, ModelConfig, SegmentationModel};
use lvseg::nn::{ParamId, Volume};
use lvseg::sampler::{eval_anchor_slot, resample_uniform, sample_eval_clip, sample_train_clip, slot_of};
use lvseg::super_image::{from_super_image, to_super_image};
use lvseg::train::{finetune, init_model, pretrain, RunOptions, Stage, TrainOutcome};
use lvseg::types::{BinaryMask, ClipSpec, RandomSource, Slot, SparseLabelSet};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn random_mask(h: usize, w: usize, g: &mut RandomSource) -> BinaryMask {
    let bits = (0..h * w).map(|_| g.bernoulli(0.4)).collect();
    BinaryMask::from_bits(h, w, bits).unwrap()
}

// 1 -----------------------------------------------------------------------

fn seg_loss(model: &SegmentationModel, clip: &lvseg::types::VideoTensor, labels: &SparseLabelSet) -> f64 {
    sparse_dice_with_grad(labels, &model.predict_logits(clip).unwrap()).unwrap().0
}

fn gradient_masking() -> Outcome {
    let cfg = ModelConfig {
        encoder_channels: vec![2, 4],
        residual_units_per_stage: 1,
        init_seed: 11,
        ..ModelConfig::volumetric(8, 8, 4)
    };
    let mut model = build_model(cfg).unwrap();
    let n_params = model.parameter_count();
    ensure!(n_params <= 10_000, "model has {n_params} parameters");
    let clip = common::random_clip(8, 8, 4, 5);
    let mut g = RandomSource::new(6);
    let mut labels = SparseLabelSet::new(4, 8, 8);
    labels.insert(1, random_mask(8, 8, &mut g)).unwrap();
    labels.insert(3, random_mask(8, 8, &mut g)).unwrap();

    // (a) unlabeled slots do not enter the loss
    let logits = model.predict_logits(&clip).unwrap();
    let probs = |v: &Volume| Volume::from_vec(v.shape, v.data.iter().map(|&x| sigmoid(x)).collect()).unwrap();
    let base = sparse_dice_loss(&labels, &probs(&logits)).unwrap();
    let mut perturbed = logits.clone();
    let hw = 64;
    for slot in [0, 2] {
        for v in &mut perturbed.data[slot * hw..(slot + 1) * hw] {
            *v += 5.0 * g.normal();
        }
    }
    let after = sparse_dice_loss(&labels, &probs(&perturbed)).unwrap();
    ensure!(base.to_bits() == after.to_bits(), "loss moved from {base} to {after}");

    // (b) full graph versus a graph that only keeps labeled frames
    let mut pass = model.forward(&clip).unwrap();
    let (_, full_grad) = sparse_dice_with_grad(&labels, pass.output()).unwrap();
    let full = pass.backward(full_grad);
    let slots = labels.labeled_slots();
    let selected: Vec<f64> = slots.iter().flat_map(|&s| pass.output().plane(0, s).to_vec()).collect();
    let selected = Volume::from_vec([1, slots.len(), 8, 8], selected).unwrap();
    let (_, sel_grad) = labeled_only_dice_with_grad(&labels, &selected).unwrap();
    let only = pass.backward_selected(&slots, sel_grad);
    let diff = full.max_abs_diff(&only);
    ensure!(diff <= 1e-6, "labeled-only gradient differs by {diff:e}");

    // (c) central differences on 50 sampled parameters
    let sizes: Vec<usize> = model.params().iter().map(|(_, p)| p.data.len()).collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let mut flat = g.below(total);
        let mut id = 0;
        while flat >= sizes[id] {
            flat -= sizes[id];
            id += 1;
        }
        let analytic = full.get(ParamId(id))[flat];
        let orig = model.params().data(ParamId(id))[flat];
        model.params_mut().get_mut(ParamId(id)).data[flat] = orig + h;
        let up = seg_loss(&model, &clip, &labels);
        model.params_mut().get_mut(ParamId(id)).data[flat] = orig - h;
        let down = seg_loss(&model, &clip, &labels);
        model.params_mut().get_mut(ParamId(id)).data[flat] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    ensure!(worst <= 1e-3, "worst relative finite-difference error {worst:e}");
    Ok(format!("{n_params} params; perturbation delta 0; labeled-only diff {diff:.1e}; FD rel err {worst:.1e}"))
}

// 2 -----------------------------------------------------------------------

fn masking_contract() -> Outcome {
    let ratios = [0.0, 0.1, 0.25, 0.5, 0.6, 0.9];
    let mut g = RandomSource::new(21);
    for f in 1..=256usize {
        let clip = common::random_clip(2, 2, f, f as u64);
        for &r in &ratios {
            let m = mask_clip(&clip, r, &mut g).unwrap();
            let expected = ((r * f as f64).round() as usize).min(f - 1);
            ensure!(masked_count(f, r) == expected, "masked_count({f}, {r})");
            ensure!(m.masked_slots.len() == expected, "F={f} r={r}: {} masked", m.masked_slots.len());
            for s in 0..f {
                let hidden = m.masked_slots.contains(&s);
                if hidden {
                    ensure!(m.clip.frame(s).iter().all(|&p| p == 0.0), "F={f} r={r}: slot {s} not zeroed");
                } else {
                    let same = m.clip.frame(s).iter().zip(clip.frame(s)).all(|(a, b)| a.to_bits() == b.to_bits());
                    ensure!(same, "F={f} r={r}: unmasked slot {s} changed");
                }
            }
        }
    }
    let clip = common::random_clip(2, 2, 10, 1);
    let draws = 10_000;
    let mut hits = [0usize; 10];
    for _ in 0..draws {
        for s in mask_clip(&clip, 0.5, &mut g).unwrap().masked_slots {
            hits[s] += 1;
        }
    }
    let worst = hits.iter().map(|&h| (h as f64 / draws as f64 - 0.5).abs()).fold(0.0, f64::max);
    ensure!(worst <= 0.02, "slot frequency deviates by {worst}");
    Ok(format!("F 1..=256 x {} ratios exact; max frequency deviation {worst:.4}", ratios.len()))
}

// 3 -----------------------------------------------------------------------

fn super_image_exactness() -> Outcome {
    for f in [1usize, 4, 9, 16, 25] {
        let clip = common::random_clip(12, 10, f, f as u64);
        let img = to_super_image(&clip).unwrap();
        let back = from_super_image(&img, f).unwrap();
        ensure!(back.pixels() == clip.pixels(), "F={f} round trip differs");
    }
    let img = to_super_image(&common::random_clip(112, 112, 16, 3)).unwrap();
    ensure!((img.height, img.width) == (448, 448), "F=16 at 112 gave {}x{}", img.height, img.width);
    Ok("round trip exact for F in {1,4,9,16,25}; 16 x 112^2 -> 448x448".into())
}

// 4 -----------------------------------------------------------------------

fn sampling_contracts() -> Outcome {
    for f in [1usize, 2, 7, 16, 32] {
        let spec = ClipSpec::new(f, 2).unwrap();
        let slots = sample_eval_clip(500, 250, &spec).unwrap();
        ensure!(slot_of(&slots, 250) == Some(f / 2), "F={f}: eval anchor at {:?}", slot_of(&slots, 250));
        ensure!(eval_anchor_slot(&spec) == f / 2, "eval_anchor_slot({f})");
    }
    let r = resample_uniform(10, 4);
    ensure!(r == [0, 3, 6, 9].map(Slot::Frame), "resample_uniform(10, 4) = {r:?}");
    for (l, f) in [(10usize, 16usize), (1, 4), (31, 32)] {
        let r = resample_uniform(l, f);
        let pads = r.iter().filter(|s| s.is_pad()).count();
        ensure!(r.len() == f && pads == f - l, "L={l} F={f}: {pads} pads");
        ensure!(r[..l].iter().all(|s| !s.is_pad()), "L={l} F={f}: pads not at tail");
        ensure!(r[l..].iter().all(|s| s.is_pad()), "L={l} F={f}: pads not at tail");
    }
    let spec = ClipSpec::new(16, 1).unwrap();
    let mut g = RandomSource::new(41);
    let mut counts = [0f64; 16];
    let draws = 10_000;
    for _ in 0..draws {
        let slots = sample_train_clip(1000, 500, &spec, &mut g).unwrap();
        counts[slot_of(&slots, 500).unwrap()] += 1.0;
    }
    let e = draws as f64 / 16.0;
    let chi2: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
    let p = 1.0 - ChiSquared::new(15.0).unwrap().cdf(chi2);
    ensure!(p > 0.01, "anchor-slot chi-square p = {p}");
    Ok(format!("eval anchor floor(F/2); resample and padding exact; chi2 = {chi2:.2}, p = {p:.3}"))
}

// 5, 8 --------------------------------------------------------------------

struct Trained {
    data: Dataset,
    outcome: TrainOutcome,
}

fn train_phantom_model(dir: &Path) -> Trained {
    // 20 train, 4 validation, 50 held-out
    let data = common::phantom_dataset(dir, [20, 4, 50], 64, 100, 20.0, 7);
    let cfg = common::desk_config(Stage::Finetune, 20, 0);
    let model = init_model(&cfg, 64, 64, None).unwrap();
    let outcome = finetune(model, &data, &cfg, &RunOptions::default()).unwrap();
    Trained { data, outcome }
}

fn end_to_end(t: &Trained) -> Outcome {
    let ck: &Checkpoint = &t.outcome.best;
    let spec = ck.clip_spec().unwrap();
    let test = t.data.split(Split::Test);
    ensure!(!test.is_empty(), "no held-out videos");
    let scores = score_split(&ck.model, &test, &spec, &ck.normalization).unwrap();
    let anchor = scores.iter().map(|s| s.dsc).sum::<f64>() / scores.len() as f64;
    let mut all = 0.0;
    for v in &test {
        let pred = predict_video(&ck.model, v, &spec, &ck.normalization).unwrap();
        all += mean_frame_dsc(&pred, v.dense.as_ref().unwrap()).unwrap();
    }
    let all = all / test.len() as f64;
    let epochs = t.outcome.history.len();
    ensure!(anchor >= 0.80 && all >= 0.75, "anchor DSC {anchor:.4}, all-frames DSC {all:.4}");
    Ok(format!("{epochs} epochs; held-out anchor DSC {anchor:.4}, all-frames DSC {all:.4}"))
}

fn shuffle_probe(t: &Trained) -> Outcome {
    let ck = &t.outcome.best;
    let spec = ck.clip_spec().unwrap();
    let test = t.data.split(Split::Test);
    let rng = RandomSource::new(81);

    let single = ModelConfig {
        encoder_channels: vec![2, 4, 8],
        residual_units_per_stage: 1,
        ..ModelConfig::volumetric(64, 64, 1)
    };
    let framewise = Framewise::new(build_model(single).unwrap()).unwrap();
    let indep = shuffle_report(&framewise, &test[..8], &spec, &ck.normalization, &rng).unwrap();
    let nonzero = indep.rows.iter().filter(|r| r.result.delta != 0.0).count();
    ensure!(nonzero == 0, "{nonzero} frame-independent rows have nonzero delta");

    let report = shuffle_report(&ck.model, &test, &spec, &ck.normalization, &rng).unwrap();
    ensure!(report.rows.len() >= 50, "only {} videos in the report", report.rows.len());
    Ok(format!(
        "frame-independent delta 0 on {} videos; trained model over {} videos: ordered {:.4}, shuffled {:.4}, mean delta {:+.4} (observational, expected >= 0)",
        indep.rows.len(),
        report.rows.len(),
        report.mean_ordered,
        report.mean_shuffled,
        report.mean_delta
    ))
}

// 6 -----------------------------------------------------------------------

fn best_val(o: &TrainOutcome) -> f64 {
    o.history.iter().filter_map(|h| h.val_dsc).fold(f64::NEG_INFINITY, f64::max)
}

fn pretraining_benefit(dir: &Path) -> Outcome {
    let data = common::phantom_dataset(dir, [20, 4, 0], 64, 100, 20.0, 0);
    let (mut ssl, mut scratch) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let pc = common::desk_config(Stage::Pretrain, 10, seed);
        let pre = pretrain(init_model(&pc, 64, 64, None).unwrap(), &data, &pc, &RunOptions::default()).unwrap();
        let fc = common::desk_config(Stage::Finetune, 10, seed);
        let a = finetune(init_model(&fc, 64, 64, Some(pre.last)).unwrap(), &data, &fc, &RunOptions::default()).unwrap();
        let b = finetune(init_model(&fc, 64, 64, None).unwrap(), &data, &fc, &RunOptions::default()).unwrap();
        ssl.push(best_val(&a));
        scratch.push(best_val(&b));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (p, s) = (mean(&ssl), mean(&scratch));
    let detail = format!("pretrained {p:.4} {ssl:.3?} vs scratch {s:.4} {scratch:.3?}");
    ensure!(p >= s - 0.02, "{detail}");
    Ok(detail)
}

// 7 -----------------------------------------------------------------------

fn spectrum_analysis() -> Outcome {
    for c in [0.0, 2.5, 1.0 / 3.0, 1234.5] {
        let s = spectrum(&[c; 100]).unwrap();
        let e: f64 = s.magnitudes[1..].iter().map(|m| m * m).sum();
        // exact for dyadic constants; the mean of other values carries one rounding
        ensure!(e <= 1e-24 * (1.0 + c * c), "constant {c}: non-DC energy {e:e}");
    }
    let x: Vec<f64> = (0..100).map(|t| (2.0 * std::f64::consts::PI * t as f64 / 25.0).sin()).collect();
    let s = spectrum(&x).unwrap();
    ensure!(s.dominant_bin() == 4, "dominant bin {}", s.dominant_bin());
    let peak = s.magnitudes[4];
    let leak = (0..100).filter(|&k| k != 4 && k != 96).map(|k| s.magnitudes[k]).fold(0.0, f64::max) / peak;
    ensure!(leak < 1e-9, "side-bin leakage {leak:e}");
    let mut g = RandomSource::new(71);
    let mut worst: f64 = 0.0;
    for len in [2usize, 17, 100, 257] {
        let y: Vec<f64> = (0..len).map(|_| g.normal() * 3.0 + 1.0).collect();
        let m = y.iter().sum::<f64>() / len as f64;
        let time: f64 = y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() * len as f64;
        let freq: f64 = spectrum(&y).unwrap().magnitudes.iter().map(|v| v * v).sum();
        worst = worst.max((time - freq).abs() / time);
    }
    ensure!(worst <= 1e-6, "Parseval relative error {worst:e}");
    Ok(format!("constant energy 0; period-25 peak at bin 4, leakage {leak:.1e}; Parseval rel err {worst:.1e}"))
}

// 9 -----------------------------------------------------------------------

fn metric_suite() -> Outcome {
    let a = BinaryMask::from_fn(4, 4, |y, _| y < 2);
    let none = BinaryMask::from_fn(4, 4, |y, _| y >= 2);
    let half = BinaryMask::from_fn(4, 4, |y, x| y < 2 && x < 2 || y >= 2 && x >= 2);
    for (b, want) in [(&a, 1.0), (&none, 0.0), (&half, 0.5)] {
        let got = dsc(&a, b).unwrap();
        ensure!(got == want, "dsc gave {got}, expected {want}");
    }
    let rng = RandomSource::new(91);
    let (lo, hi) = bootstrap_ci(&[0.83; 200], DEFAULT_LEVEL, DEFAULT_RESAMPLES, &rng).unwrap();
    ensure!(lo == hi, "constant list CI [{lo}, {hi}]");
    let mut g = RandomSource::new(92);
    let mut ratios = Vec::new();
    for rep in 0..20u64 {
        let width = |n: usize, g: &mut RandomSource| {
            let v: Vec<f64> = (0..n).map(|_| g.normal()).collect();
            let (lo, hi) = bootstrap_ci(&v, DEFAULT_LEVEL, DEFAULT_RESAMPLES, &rng.fork(rep * 2 + n as u64)).unwrap();
            hi - lo
        };
        let big = width(1600, &mut g);
        let small = width(400, &mut g);
        ratios.push(big / small);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    ensure!((mean - 0.5).abs() <= 0.1, "mean width ratio {mean:.4}");
    Ok(format!("dsc 1/0/0.5; constant CI zero width; n=1600 vs 400 width ratio {mean:.4}"))
}

// 10 ----------------------------------------------------------------------

fn lvseg(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lvseg")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("lvseg {args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const DESK_TOML: &str = "epochs = 2\nframes = 4\nperiod = 2\nbatch_size = 4\nlearning_rate = 3e-3\nseed = 5\n\n[model]\nchannels = [2, 4, 8]\nresidual_units = 1\n";

fn determinism(dir: &Path) -> Outcome {
    std::fs::write(dir.join("pre.toml"), format!("stage = \"pretrain\"\n{DESK_TOML}")).unwrap();
    std::fs::write(dir.join("ft.toml"), format!("stage = \"finetune\"\n{DESK_TOML}")).unwrap();
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    let mut compared = 0;
    for run in ["a", "b"] {
        let r = |s: &str| p(&format!("{run}/{s}"));
        lvseg(&["synth", "--out", &r("data"), "--count", "8", "--length", "60", "--period", "15", "--seed", "3"])?;
        lvseg(&["pretrain", "--data", &r("data"), "--config", &p("pre.toml"), "--out", &r("pre"), "--deterministic"])?;
        lvseg(&[
            "finetune", "--data", &r("data"), "--config", &p("ft.toml"), "--init", &r("pre/last.ckpt"), "--out", &r("ft"), "--deterministic",
        ])?;
        lvseg(&["eval", "--data", &r("data"), "--checkpoint", &r("ft/best.ckpt"), "--split", "test", "--report", &r("eval/test")])?;
    }
    for sub in ["data", "pre", "ft", "eval"] {
        let (a, b) = (tree_bytes(&dir.join("a").join(sub)), tree_bytes(&dir.join("b").join(sub)));
        ensure!(!a.is_empty(), "{sub} produced no files");
        ensure!(a.len() == b.len(), "{sub}: file sets differ");
        for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
            ensure!(na == nb && ba == bb, "{sub}/{na} differs between runs");
            compared += 1;
        }
    }
    Ok(format!("{compared} files byte-identical across two synth/pretrain/finetune/eval runs"))
}

// ------------------------------------------------------------------------

fn main() {
    let only: Option<Vec<usize>> = std::env::var("LVSEG_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let want = |n: usize| only.as_ref().map_or(true, |o| o.contains(&n));
    let tmp = tempfile::tempdir().unwrap();
    let trained = OnceLock::new();
    let trained = || trained.get_or_init(|| train_phantom_model(&tmp.path().join("e2e")));

    let mut criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "gradient masking", Box::new(gradient_masking)),
        (2, "masking contract", Box::new(masking_contract)),
        (3, "super-image exactness", Box::new(super_image_exactness)),
        (4, "clip sampling contracts", Box::new(sampling_contracts)),
        (6, "pretraining non-inferiority", Box::new(|| pretraining_benefit(&tmp.path().join("ssl")))),
        (7, "spectrum analysis", Box::new(spectrum_analysis)),
        (9, "metric and CI suite", Box::new(metric_suite)),
        (5, "end-to-end phantom learning", Box::new(|| end_to_end(trained()))),
        (8, "shuffle probe", Box::new(|| shuffle_probe(trained()))),
        (10, "determinism", Box::new(|| {
            let d = tmp.path().join("det");
            std::fs::create_dir_all(&d).unwrap();
            determinism(&d)
        })),
    ];
    criteria.sort_by_key(|c| c.0);

    let mut failed = 0;
    for (n, name, f) in &criteria {
        if !want(*n) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
