use serde::{Deserialize, Serialize};

use super::{load_video, DatasetIndex, IndexEntry, Split};
use crate::error::{Error, Result};
use crate::parallel;
use crate::types::{BinaryMask, MaskStack, VideoTensor, CHANNELS};

/// Per-channel mean/std applied to clips before they reach a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; CHANNELS],
    pub std: [f32; CHANNELS],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }
}

impl Normalization {
    /// Statistics over every non-padding frame of `videos`.
    pub fn fit<'a>(videos: impl IntoIterator<Item = &'a VideoTensor>) -> Self {
        let mut sum = [0.0f64; CHANNELS];
        let mut sq = [0.0f64; CHANNELS];
        let mut n = 0usize;
        for v in videos {
            let plane = v.height() * v.width();
            for (slot, s) in v.slots().iter().enumerate() {
                if s.is_pad() {
                    continue;
                }
                for c in 0..CHANNELS {
                    for &p in v.channel(slot, c) {
                        sum[c] += p as f64;
                        sq[c] += (p as f64) * (p as f64);
                    }
                }
                n += plane;
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mut out = Self::default();
        for c in 0..CHANNELS {
            let mean = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - mean * mean).max(0.0);
            out.mean[c] = mean as f32;
            out.std[c] = var.sqrt().max(1e-6) as f32;
        }
        out
    }

    /// Normalise in place; padding frames stay exactly zero.
    pub fn apply(&self, clip: &mut VideoTensor) {
        let plane = clip.height() * clip.width();
        let pads = clip.pad_flags();
        for (slot, pad) in pads.into_iter().enumerate() {
            let frame = clip.frame_mut(slot);
            if pad {
                frame.iter_mut().for_each(|p| *p = 0.0);
                continue;
            }
            for c in 0..CHANNELS {
                let (m, s) = (self.mean[c], self.std[c]);
                frame[c * plane..(c + 1) * plane]
                    .iter_mut()
                    .for_each(|p| *p = (*p - m) / s);
            }
        }
    }
}

/// A video held in memory with its annotations.
#[derive(Clone, Debug)]
pub struct LoadedVideo {
    pub entry: IndexEntry,
    /// Raw pixels in `[0, 1]`.
    pub video: VideoTensor,
    pub dense: Option<Vec<BinaryMask>>,
}

/// An index with all videos resident and normalisation fitted on the
/// training split (or on everything when there is no training split).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub videos: Vec<LoadedVideo>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn load(index: &DatasetIndex) -> Result<Self> {
        let loaded = parallel::map_slice(&index.entries, |e| -> Result<LoadedVideo> {
            let video = load_video(&e.path)?;
            let dense = match &e.dense_path {
                Some(p) => {
                    let s = MaskStack::load(p)?;
                    if s.masks.len() != video.frames() {
                        return Err(Error::FrameCountMismatch {
                            video: e.video_id.clone(),
                            frames: video.frames(),
                            masks: s.masks.len(),
                        });
                    }
                    Some(s.masks)
                }
                None => None,
            };
            Ok(LoadedVideo {
                entry: e.clone(),
                video,
                dense,
            })
        });
        let videos = loaded.into_iter().collect::<Result<Vec<_>>>()?;
        let has_train = videos.iter().any(|v| v.entry.split == Split::Train);
        let normalization = Normalization::fit(
            videos
                .iter()
                .filter(|v| !has_train || v.entry.split == Split::Train)
                .map(|v| &v.video),
        );
        Ok(Self {
            videos,
            normalization,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&LoadedVideo> {
        self.videos.iter().filter(|v| v.entry.split == split).collect()
    }

    pub fn find(&self, video_id: &str) -> Option<&LoadedVideo> {
        self.videos.iter().find(|v| v.entry.video_id == video_id)
    }
}
