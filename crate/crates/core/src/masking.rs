//! Whole-frame temporal masking for reconstruction pre-training.

use crate::error::{Error, Result};
use crate::types::{MaskedClip, RandomSource, VideoTensor};

/// Configuration default for the fraction of frames to hide.
pub const DEFAULT_MASKING_RATIO: f64 = 0.6;

pub fn default_ratio() -> f64 {
    DEFAULT_MASKING_RATIO
}

/// Validate an externally supplied ratio.
pub fn check_ratio(ratio: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(
            "masking_ratio",
            format!("{ratio} outside [0, 1)"),
        ));
    }
    Ok(ratio)
}

/// Number of frames hidden for a clip of `frames` slots: `round(ratio * F)`
/// (halves away from zero), capped at `F - 1` so at least one frame stays
/// visible.
pub fn masked_count(frames: usize, ratio: f64) -> usize {
    let n = (ratio * frames as f64).round() as usize;
    n.min(frames.saturating_sub(1))
}

/// Zero a uniformly drawn subset of slots.
pub fn mask_clip(clip: &VideoTensor, ratio: f64, rng: &mut RandomSource) -> Result<MaskedClip> {
    check_ratio(ratio)?;
    let f = clip.frames();
    let masked_slots = rng.sample_distinct(f, masked_count(f, ratio));
    Ok(apply_mask(clip, masked_slots))
}

/// Zero exactly the given slots.
pub fn apply_mask(clip: &VideoTensor, masked_slots: Vec<usize>) -> MaskedClip {
    let mut out = clip.clone();
    for &s in &masked_slots {
        out.frame_mut(s).iter_mut().for_each(|p| *p = 0.0);
    }
    MaskedClip {
        clip: out,
        masked_slots,
    }
}
