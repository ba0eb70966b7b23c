//! Dice scores, split evaluation at annotated frames, and percentile
//! bootstrap intervals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{LoadedVideo, Normalization};
use crate::model::{ClipContext, ClipPredictor};
use crate::nn::Volume;
use crate::parallel;
use crate::sampler::{extract, sample_eval_clip, slot_of};
use crate::types::{BinaryMask, ClipSpec, Phase, RandomSource, Slot, VideoTensor};

pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_LEVEL: f64 = 0.95;

/// `2|a n b| / (|a| + |b|)`, and 1 when both masks are empty.
pub fn dsc(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::ShapeMismatch {
            dim: "mask pixels",
            expected: a.bits().len(),
            actual: b.bits().len(),
        });
    }
    let total = a.area() + b.area();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * a.intersection(b) as f64 / total as f64)
}

/// Foreground where the logit is positive (probability above one half).
pub fn binarize(logits: &[f64], height: usize, width: usize) -> BinaryMask {
    BinaryMask::from_bits(height, width, logits.iter().map(|&z| z > 0.0).collect())
        .expect("plane size matches mask size")
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Percentile bootstrap interval for the mean. Resample `r` draws from
/// `rng.fork(r)`, so the result does not depend on thread count.
pub fn bootstrap_ci(values: &[f64], level: f64, resamples: usize, rng: &RandomSource) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("bootstrap of an empty sample"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level} outside (0, 1)")));
    }
    if resamples == 0 {
        return Err(Error::invalid("resamples must be positive"));
    }
    let n = values.len();
    let mut means = parallel::map_indexed(resamples, |r| {
        let mut g = rng.fork(r as u64);
        (0..n).map(|_| values[g.below(n)]).sum::<f64>() / n as f64
    });
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let m = mean(values);
    let lo = quantile_sorted(&means, alpha).min(m);
    let hi = quantile_sorted(&means, 1.0 - alpha).max(m);
    Ok((lo, hi))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub video_id: String,
    pub frame: usize,
    pub phase: Phase,
    pub dsc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Aggregate {
    pub fn of(values: &[f64], rng: &RandomSource) -> Result<Self> {
        let (lo, hi) = bootstrap_ci(values, DEFAULT_LEVEL, DEFAULT_RESAMPLES, rng)?;
        Ok(Self {
            n: values.len(),
            mean: mean(values),
            lo,
            hi,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_frame: Vec<FrameScore>,
    pub overall: Aggregate,
    pub ed: Option<Aggregate>,
    pub es: Option<Aggregate>,
    pub middle: Option<Aggregate>,
}

impl DiceReport {
    /// Pool scores; each aggregate uses its own forked stream of `rng`.
    pub fn from_scores(per_frame: Vec<FrameScore>, rng: &RandomSource) -> Result<Self> {
        if per_frame.is_empty() {
            return Err(Error::invalid("no annotated frames to evaluate"));
        }
        let values: Vec<f64> = per_frame.iter().map(|s| s.dsc).collect();
        let phase = |p: Phase, stream: u64| -> Result<Option<Aggregate>> {
            let v: Vec<f64> = per_frame.iter().filter(|s| s.phase == p).map(|s| s.dsc).collect();
            if v.is_empty() {
                Ok(None)
            } else {
                Aggregate::of(&v, &rng.fork(stream)).map(Some)
            }
        };
        Ok(Self {
            overall: Aggregate::of(&values, &rng.fork(0))?,
            ed: phase(Phase::Ed, 1)?,
            es: phase(Phase::Es, 2)?,
            middle: phase(Phase::Middle, 3)?,
            per_frame,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("video_id,frame,phase,dsc\n");
        for f in &self.per_frame {
            let _ = writeln!(s, "{},{},{},{:.6}", f.video_id, f.frame, f.phase.as_str(), f.dsc);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let mut line = |name: &str, a: &Option<Aggregate>| {
            if let Some(a) = a {
                let _ = writeln!(s, "{name:<8} n={:<5} dsc={:.4} (95% CI {:.4}-{:.4})", a.n, a.mean, a.lo, a.hi);
            }
        };
        line("overall", &Some(self.overall));
        line("ED", &self.ed);
        line("ES", &self.es);
        line("middle", &self.middle);
        s
    }

    /// Writes `<stem>.csv` (per-frame rows then a `#`-prefixed summary) and
    /// `<stem>.json`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        let csv_path = stem.with_extension("csv");
        let mut body = self.to_csv();
        for l in self.summary().lines() {
            let _ = writeln!(body, "# {l}");
        }
        std::fs::write(&csv_path, body).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = stem.with_extension("json");
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))
    }
}

/// Normalised clip for `slots` of a loaded video.
pub fn prepare_clip(video: &LoadedVideo, slots: &[Slot], norm: &Normalization) -> Result<VideoTensor> {
    let (mut clip, _) = extract(&video.video, slots, &BTreeMap::new())?;
    norm.apply(&mut clip);
    Ok(clip)
}

/// Anchor-frame DSC of one annotated frame under its evaluation clip.
pub fn score_anchor(
    predictor: &dyn ClipPredictor,
    video: &LoadedVideo,
    anchor: usize,
    truth: &BinaryMask,
    spec: &ClipSpec,
    norm: &Normalization,
) -> Result<f64> {
    let slots = sample_eval_clip(video.video.frames(), anchor, spec)?;
    let clip = prepare_clip(video, &slots, norm)?;
    let ctx = ClipContext {
        video_id: &video.entry.video_id,
        slots: &slots,
    };
    let out = predictor.predict(&clip, &ctx)?;
    let slot = slot_of(&slots, anchor).ok_or_else(|| Error::invalid(format!("anchor {anchor} not in its clip")))?;
    dsc(&binarize(out.plane(0, slot), clip.height(), clip.width()), truth)
}

/// Per-frame scores for every annotated frame of `videos`, in video order.
pub fn score_split(
    predictor: &dyn ClipPredictor,
    videos: &[&LoadedVideo],
    spec: &ClipSpec,
    norm: &Normalization,
) -> Result<Vec<FrameScore>> {
    let per_video = parallel::map_slice(videos, |v| -> Result<Vec<FrameScore>> {
        v.entry
            .annotated
            .iter()
            .map(|a| {
                Ok(FrameScore {
                    video_id: v.entry.video_id.clone(),
                    frame: a.frame,
                    phase: a.phase,
                    dsc: score_anchor(predictor, v, a.frame, &a.mask, spec, norm)?,
                })
            })
            .collect()
    });
    let mut out = Vec::new();
    for v in per_video {
        out.extend(v?);
    }
    Ok(out)
}

pub fn evaluate_split(
    predictor: &dyn ClipPredictor,
    videos: &[&LoadedVideo],
    spec: &ClipSpec,
    norm: &Normalization,
    rng: &RandomSource,
) -> Result<DiceReport> {
    if videos.is_empty() {
        return Err(Error::invalid("empty split"));
    }
    DiceReport::from_scores(score_split(predictor, videos, spec, norm)?, rng)
}

/// Logit magnitude the oracle emits.
const ORACLE_LOGIT: f64 = 10.0;

/// Answers from stored ground truth: dense masks where available, otherwise
/// the annotated frames; anything else is predicted empty.
#[derive(Clone, Debug, Default)]
pub struct OraclePredictor {
    masks: BTreeMap<String, BTreeMap<usize, BinaryMask>>,
}

impl OraclePredictor {
    pub fn new(videos: &[&LoadedVideo]) -> Self {
        let masks = videos
            .iter()
            .map(|v| {
                let m = match &v.dense {
                    Some(d) => d.iter().cloned().enumerate().collect(),
                    None => v.entry.annotation_map(),
                };
                (v.entry.video_id.clone(), m)
            })
            .collect();
        Self { masks }
    }
}

impl ClipPredictor for OraclePredictor {
    fn predict(&self, clip: &VideoTensor, ctx: &ClipContext) -> Result<Volume> {
        let (f, h, w) = (clip.frames(), clip.height(), clip.width());
        let known = self.masks.get(ctx.video_id);
        let mut out = Volume::from_vec([1, f, h, w], vec![-ORACLE_LOGIT; f * h * w])?;
        for (k, s) in ctx.slots.iter().enumerate() {
            let Some(m) = s.frame().and_then(|fr| known.and_then(|m| m.get(&fr))) else { continue };
            for (i, &b) in m.bits().iter().enumerate() {
                if b {
                    out.data[k * h * w + i] = ORACLE_LOGIT;
                }
            }
        }
        Ok(out)
    }
}

/// Predicts background everywhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct EmptyPredictor;

impl ClipPredictor for EmptyPredictor {
    fn predict(&self, clip: &VideoTensor, _ctx: &ClipContext) -> Result<Volume> {
        let (f, h, w) = (clip.frames(), clip.height(), clip.width());
        Volume::from_vec([1, f, h, w], vec![-ORACLE_LOGIT; f * h * w])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{AnnotatedFrame, IndexEntry, Split};
    use crate::phantom::{generate_phantom, PhantomSpec};
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn square(n: usize, y0: usize, x0: usize, s: usize) -> BinaryMask {
        BinaryMask::from_fn(n, n, |y, x| (y0..y0 + s).contains(&y) && (x0..x0 + s).contains(&x))
    }

    #[test]
    fn dsc_hand_cases() {
        let a = square(20, 0, 0, 10);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &square(20, 10, 10, 10)).unwrap(), 0.0);
        // 10x10 squares overlapping in a 5x10 band
        assert_eq!(dsc(&a, &square(20, 5, 0, 10)).unwrap(), 0.5);
        let e = BinaryMask::empty(4, 4);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert!(dsc(&e, &BinaryMask::empty(4, 5)).is_err());
    }

    proptest! {
        #[test]
        fn dsc_symmetric_and_reflexive(
            a in proptest::collection::vec(any::<bool>(), 36),
            b in proptest::collection::vec(any::<bool>(), 36),
        ) {
            let a = BinaryMask::from_bits(6, 6, a).unwrap();
            let b = BinaryMask::from_bits(6, 6, b).unwrap();
            prop_assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
            prop_assert_eq!(dsc(&a, &a).unwrap(), 1.0);
            let d = dsc(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn ci_brackets_the_mean(values in proptest::collection::vec(0.0f64..1.0, 1..60), seed in 0u64..1000) {
            let (lo, hi) = bootstrap_ci(&values, 0.95, 500, &RandomSource::new(seed)).unwrap();
            let m = mean(&values);
            prop_assert!(lo <= m && m <= hi);
        }
    }

    #[test]
    fn constant_list_has_zero_width_ci() {
        let v = vec![0.9; 100];
        let (lo, hi) = bootstrap_ci(&v, 0.95, DEFAULT_RESAMPLES, &RandomSource::new(1)).unwrap();
        assert_eq!(lo, hi);
        assert!((lo - 0.9).abs() < 1e-12);
        assert!(bootstrap_ci(&[], 0.95, 10, &RandomSource::new(1)).is_err());
    }

    #[test]
    fn bootstrap_is_deterministic_and_close_to_normal_theory() {
        let mut g = RandomSource::new(3);
        let v: Vec<f64> = (0..400).map(|_| 0.9 + 0.01 * g.normal()).collect();
        let a = bootstrap_ci(&v, 0.95, 4000, &RandomSource::new(8)).unwrap();
        let b = bootstrap_ci(&v, 0.95, 4000, &RandomSource::new(8)).unwrap();
        assert_eq!(a, b);
        // oracle: mean +- z * s / sqrt(n)
        let m = mean(&v);
        let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.975);
        let half = z * s / (v.len() as f64).sqrt();
        assert!(((a.1 - a.0) / (2.0 * half) - 1.0).abs() < 0.1);
    }

    #[test]
    fn quantile_is_linear_interpolation() {
        let s = [1.0, 2.0, 4.0, 8.0];
        assert_eq!(quantile_sorted(&s, 0.0), 1.0);
        assert_eq!(quantile_sorted(&s, 1.0), 8.0);
        assert_eq!(quantile_sorted(&s, 0.5), 3.0);
    }

    fn phantom_video(seed: u64, split: Split) -> LoadedVideo {
        let p = generate_phantom(&PhantomSpec {
            height: 32,
            width: 32,
            length: 40,
            period: 10.0,
            seed,
            ..PhantomSpec::default()
        })
        .unwrap();
        let (ed, es) = p.annotated_pair().unwrap();
        let annotated = vec![
            AnnotatedFrame {
                frame: ed,
                phase: Phase::Ed,
                mask: p.masks[ed].clone(),
            },
            AnnotatedFrame {
                frame: es,
                phase: Phase::Es,
                mask: p.masks[es].clone(),
            },
        ];
        LoadedVideo {
            entry: IndexEntry {
                video_id: format!("v{seed}"),
                path: "unused".into(),
                split,
                frames: 40,
                height: 32,
                width: 32,
                annotated,
                dense_path: None,
            },
            video: p.video,
            dense: Some(p.masks),
        }
    }

    #[test]
    fn oracle_scores_one_and_empty_scores_zero() {
        let vids: Vec<LoadedVideo> = (0..4).map(|s| phantom_video(s, Split::Test)).collect();
        let refs: Vec<&LoadedVideo> = vids.iter().collect();
        let spec = ClipSpec::new(8, 2).unwrap();
        let rng = RandomSource::new(0);
        let oracle = OraclePredictor::new(&refs);
        let r = evaluate_split(&oracle, &refs, &spec, &Normalization::default(), &rng).unwrap();
        assert_eq!(r.per_frame.len(), 8);
        assert!(r.per_frame.iter().all(|s| s.dsc == 1.0));
        assert_eq!((r.overall.lo, r.overall.mean, r.overall.hi), (1.0, 1.0, 1.0));
        assert_eq!(r.ed.unwrap().n, 4);
        assert!(r.middle.is_none());

        let r = evaluate_split(&EmptyPredictor, &refs, &spec, &Normalization::default(), &rng).unwrap();
        assert!(r.per_frame.iter().all(|s| s.dsc == 0.0));
        assert!(evaluate_split(&oracle, &[], &spec, &Normalization::default(), &rng).is_err());
    }

    #[test]
    fn report_files_have_rows_and_summary() {
        let scores = vec![
            FrameScore {
                video_id: "a".into(),
                frame: 3,
                phase: Phase::Ed,
                dsc: 0.8,
            },
            FrameScore {
                video_id: "a".into(),
                frame: 9,
                phase: Phase::Es,
                dsc: 0.6,
            },
        ];
        let r = DiceReport::from_scores(scores, &RandomSource::new(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("report");
        r.write(&stem).unwrap();
        let csv = std::fs::read_to_string(stem.with_extension("csv")).unwrap();
        assert!(csv.starts_with("video_id,frame,phase,dsc\na,3,ED,0.800000\na,9,ES,0.600000\n"));
        assert!(csv.contains("# overall"));
        let json: DiceReport = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json")).unwrap()).unwrap();
        assert_eq!(json, r);
    }
}
