//! Whole-video prediction by window tiling, LV area series, spectra and the
//! frame-order shuffle probe.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{LoadedVideo, Normalization};
use crate::metrics::{binarize, dsc, prepare_clip};
use crate::model::{ClipContext, ClipPredictor};
use crate::parallel;
use crate::sampler::{sample_eval_clip, slot_of};
use crate::types::{BinaryMask, ClipSpec, RandomSource, Slot};

pub const DEFAULT_CUTOFF: f64 = 0.25;

/// One evaluation window and the source frames it is responsible for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub slots: Vec<Slot>,
    /// `(slot, frame)` pairs this window supplies predictions for.
    pub owned: Vec<(usize, usize)>,
}

/// Cover `0..len` with windows of `spec.frames` slots at stride
/// `spec.period`.
///
/// Frames are split into `period` interleaved chains (`r, r+T, r+2T, ...`).
/// Each chain is tiled consecutively; when the last tile would overrun, it is
/// right-aligned to the chain's end and only supplies the frames no earlier
/// tile covered. Chains shorter than `F` are zero-padded at the tail.
pub fn tiling_windows(len: usize, spec: &ClipSpec) -> Result<Vec<Window>> {
    if len == 0 {
        return Err(Error::invalid("cannot tile an empty video"));
    }
    let (f, t) = (spec.frames, spec.period);
    let mut windows = Vec::new();
    for r in 0..t.min(len) {
        let chain: Vec<usize> = (r..len).step_by(t).collect();
        let n = chain.len();
        if n <= f {
            let slots = (0..f)
                .map(|i| if i < n { Slot::Frame(chain[i]) } else { Slot::Pad(i) })
                .collect();
            let owned = (0..n).map(|i| (i, chain[i])).collect();
            windows.push(Window { slots, owned });
            continue;
        }
        let mut covered = 0;
        while covered < n {
            let start = if covered + f <= n { covered } else { n - f };
            let slots = (0..f).map(|i| Slot::Frame(chain[start + i])).collect();
            let owned = (covered - start..f).map(|i| (i, chain[start + i])).collect();
            windows.push(Window { slots, owned });
            covered = start + f;
        }
    }
    Ok(windows)
}

/// Reassemble per-frame results from window outputs; `outputs[w][slot]`.
pub fn stitch<T: Clone>(len: usize, windows: &[Window], outputs: &[Vec<T>]) -> Result<Vec<T>> {
    let mut frames: Vec<Option<T>> = vec![None; len];
    for (w, out) in windows.iter().zip(outputs) {
        for &(slot, frame) in &w.owned {
            if frame >= len {
                return Err(Error::invalid(format!("window owns frame {frame} beyond length {len}")));
            }
            frames[frame] = Some(out[slot].clone());
        }
    }
    frames
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| Error::invalid(format!("frame {i} is not covered by any window"))))
        .collect()
}

/// Binary prediction for every frame of a video.
pub fn predict_video(
    predictor: &dyn ClipPredictor,
    video: &LoadedVideo,
    spec: &ClipSpec,
    norm: &Normalization,
) -> Result<Vec<BinaryMask>> {
    let len = video.video.frames();
    let (h, w) = (video.video.height(), video.video.width());
    let windows = tiling_windows(len, spec)?;
    let outputs = windows
        .iter()
        .map(|win| -> Result<Vec<BinaryMask>> {
            let clip = prepare_clip(video, &win.slots, norm)?;
            let ctx = ClipContext {
                video_id: &video.entry.video_id,
                slots: &win.slots,
            };
            let out = predictor.predict(&clip, &ctx)?;
            Ok((0..spec.frames).map(|k| binarize(out.plane(0, k), h, w)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    stitch(len, &windows, &outputs)
}

/// Positive-pixel count per frame.
pub fn area_series(masks: &[BinaryMask]) -> Vec<f64> {
    masks.iter().map(|m| m.area() as f64).collect()
}

/// Mean DSC over all frames against dense ground truth.
pub fn mean_frame_dsc(pred: &[BinaryMask], truth: &[BinaryMask]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch {
            dim: "frames",
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        total += dsc(p, t)?;
    }
    Ok(total / pred.len() as f64)
}

/// Unnormalised DFT magnitudes of the de-meaned series, all `L` bins, so
/// that `sum |X_k|^2 = L * sum (x - mean)^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub magnitudes: Vec<f64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.magnitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.magnitudes.is_empty()
    }

    /// Bins `0..=L/2`.
    pub fn one_sided(&self) -> &[f64] {
        &self.magnitudes[..self.len() / 2 + 1]
    }

    /// Normalised frequency of bin `k`, folded into `[0, 0.5]`.
    pub fn frequency(&self, k: usize) -> f64 {
        let l = self.len();
        k.min(l - k) as f64 / l as f64
    }

    /// Largest non-DC one-sided bin.
    pub fn dominant_bin(&self) -> usize {
        let s = self.one_sided();
        (1..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap_or(0)
    }
}

pub fn spectrum(series: &[f64]) -> Result<Spectrum> {
    if series.len() < 2 {
        return Err(Error::invalid("spectrum needs at least two samples"));
    }
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    let mut buf: Vec<Complex<f64>> = series.iter().map(|&x| Complex::new(x - mean, 0.0)).collect();
    let fft: Arc<dyn rustfft::Fft<f64>> = FftPlanner::new().plan_fft_forward(buf.len());
    fft.process(&mut buf);
    Ok(Spectrum {
        magnitudes: buf.iter().map(|c| c.norm()).collect(),
    })
}

/// Energy of bins whose folded frequency exceeds `cutoff` cycles per sample.
pub fn high_freq_energy(series: &[f64], cutoff: f64) -> Result<f64> {
    if !(cutoff > 0.0 && cutoff <= 0.5) {
        return Err(Error::invalid(format!("cutoff {cutoff} outside (0, 0.5]")));
    }
    let s = spectrum(series)?;
    Ok((0..s.len())
        .filter(|&k| s.frequency(k) > cutoff)
        .map(|k| s.magnitudes[k] * s.magnitudes[k])
        .sum())
}

/// Lag in `min_lag..=max_lag` with the highest autocorrelation.
pub fn dominant_lag(series: &[f64], min_lag: usize, max_lag: usize) -> Option<usize> {
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n.max(1) as f64;
    let x: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let var: f64 = x.iter().map(|v| v * v).sum();
    if var == 0.0 {
        return None;
    }
    (min_lag.max(1)..=max_lag.min(n.saturating_sub(1)))
        .map(|k| {
            let r: f64 = (0..n - k).map(|t| x[t] * x[t + k]).sum();
            (k, r / var)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShuffleResult {
    pub dsc_ordered: f64,
    pub dsc_shuffled: f64,
    /// `dsc_ordered - dsc_shuffled`.
    pub delta: f64,
}

/// Compare anchor DSC for the ordered eval clip and for the same clip with
/// its non-anchor slots rearranged by `order` (a permutation of those slots).
pub fn shuffle_with_order(
    predictor: &dyn ClipPredictor,
    video: &LoadedVideo,
    anchor: usize,
    truth: &BinaryMask,
    spec: &ClipSpec,
    norm: &Normalization,
    order: &[usize],
) -> Result<ShuffleResult> {
    let slots = sample_eval_clip(video.video.frames(), anchor, spec)?;
    let a = slot_of(&slots, anchor).ok_or_else(|| Error::invalid("anchor missing from its clip"))?;
    let others: Vec<usize> = (0..slots.len()).filter(|&i| i != a).collect();
    if order.len() != others.len() {
        return Err(Error::ShapeMismatch {
            dim: "shuffle order",
            expected: others.len(),
            actual: order.len(),
        });
    }
    let mut shuffled = slots.clone();
    for (dst, &src) in others.iter().zip(order) {
        shuffled[*dst] = slots[others[src]];
    }
    let score = |s: &[Slot]| -> Result<f64> {
        let clip = prepare_clip(video, s, norm)?;
        let ctx = ClipContext {
            video_id: &video.entry.video_id,
            slots: s,
        };
        let out = predictor.predict(&clip, &ctx)?;
        dsc(&binarize(out.plane(0, a), clip.height(), clip.width()), truth)
    };
    let dsc_ordered = score(&slots)?;
    let dsc_shuffled = score(&shuffled)?;
    Ok(ShuffleResult {
        dsc_ordered,
        dsc_shuffled,
        delta: dsc_ordered - dsc_shuffled,
    })
}

pub fn shuffle_consistency_test(
    predictor: &dyn ClipPredictor,
    video: &LoadedVideo,
    anchor: usize,
    truth: &BinaryMask,
    spec: &ClipSpec,
    norm: &Normalization,
    rng: &mut RandomSource,
) -> Result<ShuffleResult> {
    let order = rng.permutation(spec.frames - 1);
    shuffle_with_order(predictor, video, anchor, truth, spec, norm, &order)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShuffleRow {
    pub video_id: String,
    pub frame: usize,
    #[serde(flatten)]
    pub result: ShuffleResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShuffleSummary {
    pub rows: Vec<ShuffleRow>,
    pub mean_ordered: f64,
    pub mean_shuffled: f64,
    pub mean_delta: f64,
}

/// Shuffle probe at the first annotated frame of every video. Video `i`
/// draws its permutation from `rng.fork(i)`.
pub fn shuffle_report(
    predictor: &dyn ClipPredictor,
    videos: &[&LoadedVideo],
    spec: &ClipSpec,
    norm: &Normalization,
    rng: &RandomSource,
) -> Result<ShuffleSummary> {
    let rows = parallel::map_indexed(videos.len(), |i| -> Result<Option<ShuffleRow>> {
        let v = videos[i];
        let Some(a) = v.entry.annotated.first() else { return Ok(None) };
        let mut g = rng.fork(i as u64);
        let result = shuffle_consistency_test(predictor, v, a.frame, &a.mask, spec, norm, &mut g)?;
        Ok(Some(ShuffleRow {
            video_id: v.entry.video_id.clone(),
            frame: a.frame,
            result,
        }))
    });
    let rows: Vec<ShuffleRow> = rows.into_iter().filter_map(|r| r.transpose()).collect::<Result<_>>()?;
    if rows.is_empty() {
        return Err(Error::invalid("no annotated videos for the shuffle probe"));
    }
    let n = rows.len() as f64;
    let mean_of = |f: fn(&ShuffleResult) -> f64| rows.iter().map(|r| f(&r.result)).sum::<f64>() / n;
    Ok(ShuffleSummary {
        mean_ordered: mean_of(|r| r.dsc_ordered),
        mean_shuffled: mean_of(|r| r.dsc_shuffled),
        mean_delta: mean_of(|r| r.delta),
        rows,
    })
}
