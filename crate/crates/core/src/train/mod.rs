//! Reconstruction pre-training and sparse-label fine-tuning.
//!
//! Every clip draws its randomness from a stream forked off the run seed by
//! `(epoch, item)`, and per-clip gradients are summed in batch order, so a
//! run is reproducible for any worker count.

mod augment;
mod config;
mod optim;

pub use augment::{augment, clahe, AugmentConfig, AugmentParams};
pub use config::{ModelSection, Stage, TrainConfig};
pub use optim::{AdamParams, AdamW};

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::ingest::{Dataset, LoadedVideo, Normalization, Split};
use crate::losses::{mse_with_grad, sparse_dice_with_grad};
use crate::masking::mask_clip;
use crate::metrics::score_split;
use crate::model::{build_model, clip_volume, Checkpoint, EpochSummary, HeadKind, SegmentationModel, StageTag};
use crate::nn::{Grads, Volume};
use crate::parallel;
use crate::sampler::{extract, sample_train_clip};
use crate::types::{ClipSpec, Phase, RandomSource, SparseLabelSet, VideoTensor};

pub const LOG_FILE: &str = "train.log";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Stream used for the per-epoch visiting order.
const ORDER_STREAM: u64 = 0x6f72_6465_7200_0000;

/// One training example, ready for the network.
#[derive(Clone, Debug)]
pub enum Example {
    /// Masked input and the unmasked clip it should reproduce.
    Reconstruction { input: VideoTensor, target: Volume },
    Segmentation { clip: VideoTensor, labels: SparseLabelSet },
}

impl Example {
    fn head(&self) -> HeadKind {
        match self {
            Example::Reconstruction { .. } => HeadKind::Reconstruction,
            Example::Segmentation { .. } => HeadKind::Segmentation,
        }
    }
}

/// Loss and parameter gradient of a single example.
pub fn example_gradient(model: &SegmentationModel, ex: &Example) -> Result<(f64, Grads)> {
    if model.head() != ex.head() {
        return Err(Error::config(
            "head",
            format!("model has a {} head, example needs {}", model.head().as_str(), ex.head().as_str()),
        ));
    }
    match ex {
        Example::Reconstruction { input, target } => {
            let pass = model.forward(input)?;
            let (loss, g) = mse_with_grad(&target.data, &pass.output().data)?;
            let grad = Volume::from_vec(pass.output().shape, g)?;
            Ok((loss, pass.backward(grad)))
        }
        Example::Segmentation { clip, labels } => {
            let pass = model.forward(clip)?;
            let (loss, grad) = sparse_dice_with_grad(labels, pass.output())?;
            Ok((loss, pass.backward(grad)))
        }
    }
}

/// One optimizer step on the batch mean loss. Returns that mean.
pub fn train_step(model: &mut SegmentationModel, opt: &mut AdamW, batch: &[Example]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let results = parallel::map_slice(batch, |ex| example_gradient(model, ex));
    let mut total = Grads::zeros_like(model.params());
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.accumulate(&g);
    }
    let scale = 1.0 / batch.len() as f64;
    loss *= scale;
    total.scale(scale);
    if !loss.is_finite() || !total.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    opt.step(model.params_mut(), &total);
    if !model.params().all_finite() {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    Ok(loss)
}

fn clip_stream(epoch: usize, item: usize) -> u64 {
    ((epoch as u64) << 32) ^ item as u64
}

fn augmented(
    video: &LoadedVideo,
    anchor: usize,
    annotations: &BTreeMap<usize, crate::types::BinaryMask>,
    spec: &ClipSpec,
    cfg: &TrainConfig,
    norm: &Normalization,
    rng: &mut RandomSource,
) -> Result<(VideoTensor, SparseLabelSet)> {
    let slots = sample_train_clip(video.video.frames(), anchor, spec, rng)?;
    let (clip, labels) = extract(&video.video, &slots, annotations)?;
    let (mut clip, labels) = if cfg.augment.enabled {
        let (c, l, _) = augment(&clip, &labels, &cfg.augment, rng)?;
        (c, l)
    } else {
        (clip, labels)
    };
    norm.apply(&mut clip);
    Ok((clip, labels))
}

/// Pre-training example for `video`: a clip around a uniformly drawn
/// anchor, with a fraction of its slots zeroed.
pub fn reconstruction_example(
    video: &LoadedVideo,
    cfg: &TrainConfig,
    norm: &Normalization,
    rng: &mut RandomSource,
) -> Result<Example> {
    let spec = cfg.clip_spec()?;
    let anchor = rng.below(video.video.frames());
    let (clip, _) = augmented(video, anchor, &BTreeMap::new(), &spec, cfg, norm, rng)?;
    let target = clip_volume(&clip);
    let masked = mask_clip(&clip, cfg.masking_ratio(), rng)?;
    Ok(Example::Reconstruction {
        input: masked.clip,
        target,
    })
}

/// Fine-tuning example anchored at annotated frame `anchor`. Every
/// annotation falling inside the clip becomes a label.
pub fn segmentation_example(
    video: &LoadedVideo,
    anchor: usize,
    cfg: &TrainConfig,
    norm: &Normalization,
    rng: &mut RandomSource,
) -> Result<Example> {
    let spec = cfg.clip_spec()?;
    let (clip, labels) = augmented(video, anchor, &video.entry.annotation_map(), &spec, cfg, norm, rng)?;
    Ok(Example::Segmentation { clip, labels })
}

/// The two anchors a video contributes per fine-tuning epoch: its ED and
/// ES frames, falling back to whatever frames are annotated.
pub fn finetune_anchors(video: &LoadedVideo) -> Result<[usize; 2]> {
    let ann = &video.entry.annotated;
    if ann.is_empty() {
        return Err(Error::invalid(format!("video `{}` has no annotated frames", video.entry.video_id)));
    }
    let find = |p: Phase| ann.iter().find(|a| a.phase == p).map(|a| a.frame);
    let ed = find(Phase::Ed).unwrap_or(ann[0].frame);
    let es = find(Phase::Es).unwrap_or(ann[ann.len().min(2) - 1].frame);
    Ok([ed, es])
}

/// Optional side effects of a run.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Receives `train.log`, `last.ckpt` and `best.ckpt`.
    pub out_dir: Option<&'a Path>,
    pub on_epoch: Option<&'a dyn Fn(&EpochSummary)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochSummary>,
}

fn append_log(dir: &Path, row: &EpochSummary) -> Result<()> {
    let path = dir.join(LOG_FILE);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let line = serde_json::to_string(row).expect("summary serialises");
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
}

/// Fresh model for `cfg`, or `init` with its head swapped to the one the
/// stage needs. A trunk that does not match the configuration is rejected.
pub fn init_model(cfg: &TrainConfig, height: usize, width: usize, init: Option<Checkpoint>) -> Result<SegmentationModel> {
    let want = cfg.model_config(height, width);
    want.validate()?;
    match init {
        None => build_model(want),
        Some(ck) => {
            want.check_compatible(ck.model.config())?;
            let model = ck.model;
            if model.head() == want.head {
                Ok(model)
            } else {
                Ok(model.swap_head(want.head, cfg.model.init_seed ^ cfg.seed))
            }
        }
    }
}

struct Item<'a> {
    video: &'a LoadedVideo,
    anchor: Option<usize>,
}

fn run(model: SegmentationModel, data: &Dataset, cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.head() != cfg.stage.head() {
        return Err(Error::config(
            "head",
            format!("{} needs a {} head, model has {}", cfg.stage.as_str(), cfg.stage.head().as_str(), model.head().as_str()),
        ));
    }
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::invalid("dataset has no training videos"));
    }
    let val = data.split(Split::Val);
    let items: Vec<Item> = match cfg.stage {
        Stage::Pretrain => train.iter().map(|&video| Item { video, anchor: None }).collect(),
        Stage::Finetune => {
            let mut v = Vec::with_capacity(2 * train.len());
            for &video in &train {
                for a in finetune_anchors(video)? {
                    v.push(Item { video, anchor: Some(a) });
                }
            }
            v
        }
    };
    if let Some(dir) = opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let spec = cfg.clip_spec()?;
    let norm = data.normalization;
    let tag = match cfg.stage {
        Stage::Pretrain => StageTag::Pretrained,
        Stage::Finetune => StageTag::Finetuned,
    };
    let root = RandomSource::new(cfg.seed);
    let mut model = model;
    let mut opt = AdamW::new(model.params(), cfg.learning_rate, cfg.weight_decay, cfg.optimizer);
    let started = Instant::now();
    let mut history = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 0..cfg.epochs() {
        let order = root.fork(ORDER_STREAM ^ epoch as u64).permutation(items.len());
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let examples = parallel::map_slice(chunk, |&i| {
                let item = &items[i];
                let mut rng = root.fork(clip_stream(epoch, i));
                match item.anchor {
                    None => reconstruction_example(item.video, cfg, &norm, &mut rng),
                    Some(a) => segmentation_example(item.video, a, cfg, &norm, &mut rng),
                }
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let loss = train_step(&mut model, &mut opt, &examples).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{} epoch {} batch {b}: {what}", cfg.stage.as_str(), epoch + 1)),
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
            batches += 1;
        }
        let val_dsc = match (cfg.stage, val.is_empty()) {
            (Stage::Finetune, false) => {
                let scores = score_split(&model, &val, &spec, &norm)?;
                Some(scores.iter().map(|s| s.dsc).sum::<f64>() / scores.len().max(1) as f64)
            }
            _ => None,
        };
        let row = EpochSummary {
            epoch: epoch + 1,
            stage: cfg.stage.as_str().into(),
            loss: loss_sum / items.len() as f64,
            batches,
            val_dsc,
            wall_time: if cfg.deterministic { 0.0 } else { started.elapsed().as_secs_f64() },
        };
        history.push(row.clone());
        let ck = Checkpoint {
            period: cfg.period,
            model: model.clone(),
            stage: tag,
            normalization: norm,
            history: history.clone(),
        };
        let score = val_dsc.unwrap_or(-row.loss);
        let improved = best.as_ref().map_or(true, |(s, _)| score > *s);
        if let Some(dir) = opts.out_dir {
            append_log(dir, &row)?;
            ck.save(&dir.join(LAST_CHECKPOINT))?;
            if improved {
                ck.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        if let Some(cb) = opts.on_epoch {
            cb(&row);
        }
        if improved {
            best = Some((score, ck));
        }
    }

    let last = Checkpoint {
        period: cfg.period,
        model,
        stage: tag,
        normalization: norm,
        history: history.clone(),
    };
    let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { best, last, history })
}

/// Reconstruction pre-training; `cfg.stage` must be `pretrain`.
pub fn pretrain(model: SegmentationModel, data: &Dataset, cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Pretrain {
        return Err(Error::config("stage", "expected pretrain"));
    }
    run(model, data, cfg, opts)
}

/// Sparse dice fine-tuning; `cfg.stage` must be `finetune`.
pub fn finetune(model: SegmentationModel, data: &Dataset, cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Finetune {
        return Err(Error::config("stage", "expected finetune"));
    }
    run(model, data, cfg, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{open_dataset, Dataset};
    use crate::model::{Family, ModelConfig};
    use crate::phantom::{derive_specs, export_sparse, generate_phantom, PhantomSpec, SplitRatios};

    pub(crate) fn phantom_dataset(count: usize, size: usize, dir: &Path) -> Dataset {
        let template = PhantomSpec {
            height: size,
            width: size,
            length: 48,
            period: 12.0,
            ..PhantomSpec::default()
        };
        let phantoms: Vec<_> = derive_specs(&template, count)
            .iter()
            .map(|s| generate_phantom(s).unwrap())
            .collect();
        export_sparse(&phantoms, dir, SplitRatios { train: 0.75, val: 0.25, test: 0.0 }).unwrap();
        Dataset::load(&open_dataset(dir).unwrap()).unwrap()
    }

    fn tiny_cfg(stage: Stage) -> TrainConfig {
        let mut c = TrainConfig::new(stage);
        c.epochs = Some(2);
        c.frames = 4;
        c.period = 2;
        c.batch_size = 2;
        c.learning_rate = 1e-3;
        c.deterministic = true;
        c.model = ModelSection {
            family: Family::Volumetric,
            channels: Some(vec![2, 4]),
            residual_units: Some(1),
            init_seed: 3,
        };
        c
    }

    #[test]
    fn finetune_batches_cover_two_clips_per_video() {
        let dir = tempfile::tempdir().unwrap();
        let data = phantom_dataset(4, 16, dir.path());
        let cfg = tiny_cfg(Stage::Finetune);
        let model = init_model(&cfg, 16, 16, None).unwrap();
        let out = finetune(model, &data, &cfg, &RunOptions::default()).unwrap();
        // 3 training videos, 6 clips, batch 2
        assert!(out.history.iter().all(|h| h.batches == 3));
        assert!(out.history.iter().all(|h| h.val_dsc.is_some()));
    }

    #[test]
    fn runs_are_reproducible_and_logged() {
        let dir = tempfile::tempdir().unwrap();
        let data = phantom_dataset(4, 16, &dir.path().join("data"));
        let cfg = tiny_cfg(Stage::Pretrain);
        let run_once = |name: &str| {
            let out_dir = dir.path().join(name);
            let model = init_model(&cfg, 16, 16, None).unwrap();
            let opts = RunOptions {
                out_dir: Some(&out_dir),
                on_epoch: None,
            };
            pretrain(model, &data, &cfg, &opts).unwrap();
            out_dir
        };
        let (a, b) = (run_once("a"), run_once("b"));
        for f in [LAST_CHECKPOINT, BEST_CHECKPOINT, LOG_FILE] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
        }
        let log = std::fs::read_to_string(a.join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 2);
    }

    #[test]
    fn zero_label_clip_leaves_parameters_untouched() {
        let cfg = ModelConfig::tiny(Family::Volumetric, 16, 16, 4);
        let mut model = build_model(cfg).unwrap();
        let before = model.params().clone();
        let mut opt = AdamW::new(model.params(), 1e-2, 0.0, AdamParams::default());
        let mut clip = VideoTensor::zeros(16, 16, 4);
        clip.pixels_mut().iter_mut().enumerate().for_each(|(i, p)| *p = (i % 7) as f32 / 7.0);
        let ex = Example::Segmentation {
            clip,
            labels: SparseLabelSet::new(4, 16, 16),
        };
        train_step(&mut model, &mut opt, &[ex]).unwrap();
        assert_eq!(model.params(), &before);
    }

    #[test]
    fn head_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let data = phantom_dataset(4, 16, dir.path());
        let cfg = tiny_cfg(Stage::Finetune);
        let model = init_model(&tiny_cfg(Stage::Pretrain), 16, 16, None).unwrap();
        assert!(matches!(
            finetune(model.clone(), &data, &cfg, &RunOptions::default()),
            Err(Error::InvalidConfig { .. })
        ));
        let ck = Checkpoint {
            period: cfg.period,
            model,
            stage: StageTag::Pretrained,
            normalization: data.normalization,
            history: vec![],
        };
        let swapped = init_model(&cfg, 16, 16, Some(ck)).unwrap();
        assert_eq!(swapped.head(), HeadKind::Segmentation);
    }

    #[test]
    fn missing_annotations_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = phantom_dataset(4, 16, dir.path());
        data.videos[0].entry.annotated.clear();
        let cfg = tiny_cfg(Stage::Finetune);
        let model = init_model(&cfg, 16, 16, None).unwrap();
        assert!(finetune(model, &data, &cfg, &RunOptions::default()).is_err());
    }
}
