//! Exact rearrangement between an F-frame clip and a `sqrt(F) x sqrt(F)`
//! grid image. Frame `k` sits at grid row `k / sqrt(F)`, column
//! `k % sqrt(F)`; pixels are copied, never resampled.

use crate::error::{Error, Result};
use crate::types::{perfect_sqrt, Slot, VideoTensor, CHANNELS};

/// A planar `C x H x W` image.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl PlanarImage {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }
}

fn grid_side(frames: usize) -> Result<usize> {
    perfect_sqrt(frames)
        .ok_or_else(|| Error::invalid(format!("F = {frames} is not a perfect square")))
}

/// Generic grid layout over planar `[frame][channel][y][x]` data with any
/// channel count. Returns `[channel][Y][X]`.
pub fn tile<T: Copy + Default>(data: &[T], frames: usize, channels: usize, h: usize, w: usize) -> Result<Vec<T>> {
    let g = grid_side(frames)?;
    let (bh, bw) = (h * g, w * g);
    let mut out = vec![T::default(); channels * bh * bw];
    for k in 0..frames {
        let (gr, gc) = (k / g, k % g);
        for c in 0..channels {
            for y in 0..h {
                let src = ((k * channels + c) * h + y) * w;
                let dst = (c * bh + gr * h + y) * bw + gc * w;
                out[dst..dst + w].copy_from_slice(&data[src..src + w]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`tile`].
pub fn untile<T: Copy + Default>(data: &[T], frames: usize, channels: usize, big_h: usize, big_w: usize) -> Result<Vec<T>> {
    let g = grid_side(frames)?;
    if big_h % g != 0 || big_w % g != 0 {
        return Err(Error::invalid(format!(
            "{big_h}x{big_w} image does not divide into a {g}x{g} grid"
        )));
    }
    let (h, w) = (big_h / g, big_w / g);
    let mut out = vec![T::default(); frames * channels * h * w];
    for k in 0..frames {
        let (gr, gc) = (k / g, k % g);
        for c in 0..channels {
            for y in 0..h {
                let dst = ((k * channels + c) * h + y) * w;
                let src = (c * big_h + gr * h + y) * big_w + gc * w;
                out[dst..dst + w].copy_from_slice(&data[src..src + w]);
            }
        }
    }
    Ok(out)
}

pub fn to_super_image(clip: &VideoTensor) -> Result<PlanarImage> {
    let g = grid_side(clip.frames())?;
    let pixels = tile(clip.pixels(), clip.frames(), CHANNELS, clip.height(), clip.width())?;
    Ok(PlanarImage {
        height: clip.height() * g,
        width: clip.width() * g,
        pixels,
    })
}

/// Split a super image back into `frames` frames. Slot provenance is reset
/// to `0..frames`.
pub fn from_super_image(image: &PlanarImage, frames: usize) -> Result<VideoTensor> {
    let g = grid_side(frames)?;
    let pixels = untile(&image.pixels, frames, CHANNELS, image.height, image.width)?;
    VideoTensor::new(
        image.height / g,
        image.width / g,
        pixels,
        (0..frames).map(Slot::Frame).collect(),
    )
}
