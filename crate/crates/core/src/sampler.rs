//! Clip extraction: training windows around an annotated frame, centred
//! evaluation windows, and uniform resampling for dense-label sequences.
//!
//! All three share one edge policy. The window keeps the anchor on its
//! stride lattice and is shifted until it fits inside the video; if the
//! video is shorter than the window it starts at the first lattice position
//! and every slot past the end becomes a tail padding slot.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::types::{BinaryMask, ClipSpec, RandomSource, Slot, SparseLabelSet, VideoTensor};

fn check_anchor(video_len: usize, anchor: usize) -> Result<()> {
    if anchor >= video_len {
        return Err(Error::invalid(format!(
            "anchor {anchor} outside video of {video_len} frames"
        )));
    }
    Ok(())
}

/// Range of slots the anchor may occupy while the whole window stays inside
/// the video. `None` when no such slot exists.
fn feasible_slots(video_len: usize, anchor: usize, spec: &ClipSpec) -> Option<(usize, usize)> {
    let f = spec.frames;
    let t = spec.period;
    let hi = (anchor / t).min(f - 1);
    let after = (video_len - 1 - anchor) / t;
    let lo = (f - 1).saturating_sub(after);
    (lo <= hi).then_some((lo, hi))
}

fn window(video_len: usize, anchor: usize, slot: usize, spec: &ClipSpec) -> Vec<Slot> {
    let start = anchor - slot * spec.period;
    (0..spec.frames)
        .map(|i| {
            let idx = start + i * spec.period;
            if idx < video_len {
                Slot::Frame(idx)
            } else {
                Slot::Pad(idx)
            }
        })
        .collect()
}

fn place(video_len: usize, anchor: usize, desired: usize, spec: &ClipSpec) -> Vec<Slot> {
    let slot = match feasible_slots(video_len, anchor, spec) {
        Some((lo, hi)) => desired.clamp(lo, hi),
        None => (anchor / spec.period).min(spec.frames - 1),
    };
    window(video_len, anchor, slot, spec)
}

/// Training window: the anchor is drawn into a uniformly random slot, then
/// the window is shifted to fit.
pub fn sample_train_clip(
    video_len: usize,
    anchor: usize,
    spec: &ClipSpec,
    rng: &mut RandomSource,
) -> Result<Vec<Slot>> {
    check_anchor(video_len, anchor)?;
    let drawn = rng.below(spec.frames);
    Ok(place(video_len, anchor, drawn, spec))
}

/// Slot the evaluation window puts its anchor in.
pub fn eval_anchor_slot(spec: &ClipSpec) -> usize {
    spec.frames / 2
}

/// Evaluation window: anchor at slot `floor(F/2)`, then shifted to fit.
pub fn sample_eval_clip(video_len: usize, anchor: usize, spec: &ClipSpec) -> Result<Vec<Slot>> {
    check_anchor(video_len, anchor)?;
    Ok(place(video_len, anchor, eval_anchor_slot(spec), spec))
}

/// `F` frames spread uniformly over a sequence of length `L`.
///
/// Short sequences are zero-padded at the tail. Otherwise slot `i` takes
/// `round(i * (L-1) / (F-1))`, rounding halves up, so both ends are always
/// included. A single-frame request takes frame 0.
pub fn resample_uniform(video_len: usize, frames: usize) -> Vec<Slot> {
    if video_len < frames {
        return (0..frames)
            .map(|i| if i < video_len { Slot::Frame(i) } else { Slot::Pad(i) })
            .collect();
    }
    if frames == 1 {
        return vec![Slot::Frame(0)];
    }
    let num = video_len - 1;
    let den = frames - 1;
    (0..frames)
        .map(|i| Slot::Frame((2 * i * num + den) / (2 * den)))
        .collect()
}

/// Position of anchor frame `anchor` inside `slots`, if present.
pub fn slot_of(slots: &[Slot], anchor: usize) -> Option<usize> {
    slots.iter().position(|s| *s == Slot::Frame(anchor))
}

/// Gather clip pixels for `slots` and align annotations to slot positions.
///
/// `annotations` maps source frame index to mask. Padding slots get zero
/// pixels and never carry a label.
pub fn extract(
    video: &VideoTensor,
    slots: &[Slot],
    annotations: &BTreeMap<usize, BinaryMask>,
) -> Result<(VideoTensor, SparseLabelSet)> {
    let n = video.frame_len();
    let mut pixels = vec![0.0f32; n * slots.len()];
    let mut labels = SparseLabelSet::new(slots.len(), video.height(), video.width());
    let mut seen = BTreeMap::new();
    for (i, s) in slots.iter().enumerate() {
        let Slot::Frame(src) = *s else { continue };
        if src >= video.frames() {
            return Err(Error::invalid(format!(
                "frame {src} outside video of {} frames",
                video.frames()
            )));
        }
        pixels[i * n..(i + 1) * n].copy_from_slice(video.frame(src));
        if let Some(mask) = annotations.get(&src) {
            if seen.insert(src, i).is_some() {
                return Err(Error::IndexAlignment { frame: src });
            }
            labels.insert(i, mask.clone())?;
        }
    }
    let clip = VideoTensor::new(video.height(), video.width(), pixels, slots.to_vec())?;
    Ok((clip, labels))
}
