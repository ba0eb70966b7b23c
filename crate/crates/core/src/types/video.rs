use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{ArrayData, Archive};
use crate::error::{Error, Result};

/// Number of colour channels carried by every clip.
pub const CHANNELS: usize = 3;

/// Provenance of one clip slot. Zero-based throughout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    /// Source frame index inside the video.
    Frame(usize),
    /// Synthetic zero frame; carries the position the slot would have had.
    Pad(usize),
}

impl Slot {
    pub fn index(self) -> usize {
        match self {
            Slot::Frame(i) | Slot::Pad(i) => i,
        }
    }

    pub fn is_pad(self) -> bool {
        matches!(self, Slot::Pad(_))
    }

    pub fn frame(self) -> Option<usize> {
        match self {
            Slot::Frame(i) => Some(i),
            Slot::Pad(_) => None,
        }
    }
}

/// Cardiac phase label of an annotated frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "ED")]
    Ed,
    #[serde(rename = "ES")]
    Es,
    #[serde(rename = "middle")]
    Middle,
    #[serde(rename = "other")]
    Other,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Ed => "ED",
            Phase::Es => "ES",
            Phase::Middle => "middle",
            Phase::Other => "other",
        }
    }
}

/// A binary H×W mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::ShapeMismatch {
                dim: "mask pixels",
                expected: height * width,
                actual: bits.len(),
            });
        }
        Ok(Self { height, width, bits })
    }

    /// Build from 0/1 bytes; any other value is rejected.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if let Some(bad) = bytes.iter().find(|&&b| b > 1) {
            return Err(Error::invalid(format!("mask value {bad} is not 0 or 1")));
        }
        Self::from_bits(height, width, bytes.iter().map(|&b| b == 1).collect())
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| b as u8).collect()
    }

    /// Number of positive pixels.
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn intersection(&self, other: &BinaryMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count()
    }
}

/// An F-frame clip with per-frame provenance.
///
/// Pixels are stored frame-major and planar: index
/// `((frame * CHANNELS + channel) * height + y) * width + x`. Values are in
/// `[0, 1]` on disk and mean/std normalised once a clip is prepared for a
/// model; padding frames are exactly zero in either space.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    slots: Vec<Slot>,
}

impl VideoTensor {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, slots: Vec<Slot>) -> Result<Self> {
        let v = Self {
            height,
            width,
            pixels,
            slots,
        };
        v.check()?;
        Ok(v)
    }

    /// All zeros, with consecutive source indices `0..frames`.
    pub fn zeros(height: usize, width: usize, frames: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width * frames * CHANNELS],
            slots: (0..frames).map(Slot::Frame).collect(),
        }
    }

    /// Build a video from grayscale frames replicated to three channels.
    pub fn from_gray_frames(height: usize, width: usize, frames: &[Vec<f32>]) -> Result<Self> {
        let plane = height * width;
        let mut pixels = Vec::with_capacity(plane * CHANNELS * frames.len());
        for (i, f) in frames.iter().enumerate() {
            if f.len() != plane {
                return Err(Error::ShapeMismatch {
                    dim: if i == 0 { "frame pixels" } else { "frame pixels (later frame)" },
                    expected: plane,
                    actual: f.len(),
                });
            }
            for _ in 0..CHANNELS {
                pixels.extend_from_slice(f);
            }
        }
        Self::new(height, width, pixels, (0..frames.len()).map(Slot::Frame).collect())
    }

    fn check(&self) -> Result<()> {
        if self.height == 0 {
            return Err(Error::ShapeMismatch { dim: "H", expected: 1, actual: 0 });
        }
        if self.width == 0 {
            return Err(Error::ShapeMismatch { dim: "W", expected: 1, actual: 0 });
        }
        if self.slots.is_empty() {
            return Err(Error::ShapeMismatch { dim: "F", expected: 1, actual: 0 });
        }
        let expected = self.height * self.width * CHANNELS * self.slots.len();
        if self.pixels.len() != expected {
            return Err(Error::ShapeMismatch {
                dim: "pixel count",
                expected,
                actual: self.pixels.len(),
            });
        }
        for (slot, s) in self.slots.iter().enumerate() {
            if s.is_pad() && self.frame(slot).iter().any(|&p| p != 0.0) {
                return Err(Error::PadInconsistency { slot });
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frames(&self) -> usize {
        self.slots.len()
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.index()).collect()
    }

    pub fn pad_flags(&self) -> Vec<bool> {
        self.slots.iter().map(|s| s.is_pad()).collect()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Mutable pixel access. Callers must keep padding frames zero.
    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn frame(&self, slot: usize) -> &[f32] {
        let n = self.frame_len();
        &self.pixels[slot * n..(slot + 1) * n]
    }

    pub fn frame_mut(&mut self, slot: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.pixels[slot * n..(slot + 1) * n]
    }

    pub fn channel(&self, slot: usize, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.frame(slot)[c * plane..(c + 1) * plane]
    }

    pub fn at(&self, slot: usize, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[((slot * CHANNELS + c) * self.height + y) * self.width + x]
    }

    pub fn into_parts(self) -> (usize, usize, Vec<f32>, Vec<Slot>) {
        (self.height, self.width, self.pixels, self.slots)
    }

    /// Reorder slots: output slot `i` takes input slot `order[i]`.
    pub fn permute_slots(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.frames() {
            return Err(Error::ShapeMismatch {
                dim: "F",
                expected: self.frames(),
                actual: order.len(),
            });
        }
        let mut pixels = Vec::with_capacity(self.pixels.len());
        let mut slots = Vec::with_capacity(order.len());
        for &o in order {
            pixels.extend_from_slice(self.frame(o));
            slots.push(self.slots[o]);
        }
        Self::new(self.height, self.width, pixels, slots)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.push_text("kind", "video");
        a.push(
            "pixels",
            vec![self.frames(), CHANNELS, self.height, self.width],
            ArrayData::F32(self.pixels.clone()),
        )
        .expect("pixel dims match");
        a.push(
            "frame_index",
            vec![self.frames()],
            ArrayData::U64(self.slots.iter().map(|s| s.index() as u64).collect()),
        )
        .expect("slot dims match");
        a.push(
            "pad",
            vec![self.frames()],
            ArrayData::U8(self.slots.iter().map(|s| s.is_pad() as u8).collect()),
        )
        .expect("slot dims match");
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.text("kind")? != "video" {
            return Err(Error::Format("container is not a video".into()));
        }
        let (dims, pixels) = a.f32s("pixels")?;
        if dims.len() != 4 || dims[1] != CHANNELS {
            return Err(Error::Format(format!("bad pixel dims {dims:?}")));
        }
        let (_, idx) = a.u64s("frame_index")?;
        let (_, pad) = a.u8s("pad")?;
        if idx.len() != dims[0] || pad.len() != dims[0] {
            return Err(Error::Format("provenance length disagrees with frame count".into()));
        }
        let slots = idx
            .iter()
            .zip(pad)
            .map(|(&i, &p)| if p == 1 { Slot::Pad(i as usize) } else { Slot::Frame(i as usize) })
            .collect();
        Self::new(dims[2], dims[3], pixels.to_vec(), slots)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}

/// Number of frames and sampling stride of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub frames: usize,
    pub period: usize,
}

impl ClipSpec {
    pub fn new(frames: usize, period: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::config("frames", "must be at least 1"));
        }
        if period == 0 {
            return Err(Error::config("period", "must be at least 1"));
        }
        Ok(Self { frames, period })
    }

    /// Source frames spanned by a full window.
    pub fn span(&self) -> usize {
        (self.frames - 1) * self.period + 1
    }

    /// `sqrt(F)` when F is a perfect square.
    pub fn grid_side(&self) -> Option<usize> {
        perfect_sqrt(self.frames)
    }
}

pub fn perfect_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Check a clip against the VideoTensor invariants and a clip spec.
pub fn validate_clip(clip: VideoTensor, spec: &ClipSpec) -> Result<VideoTensor> {
    clip.check()?;
    if clip.frames() != spec.frames {
        return Err(Error::ShapeMismatch {
            dim: "F",
            expected: spec.frames,
            actual: clip.frames(),
        });
    }
    Ok(clip)
}

/// Per-clip sparse labels: a mask for each labeled slot, nothing elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseLabelSet {
    frames: usize,
    height: usize,
    width: usize,
    masks: BTreeMap<usize, BinaryMask>,
}

impl SparseLabelSet {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            masks: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, slot: usize, mask: BinaryMask) -> Result<()> {
        if slot >= self.frames {
            return Err(Error::invalid(format!(
                "label slot {slot} outside clip of {} frames",
                self.frames
            )));
        }
        if mask.height() != self.height {
            return Err(Error::ShapeMismatch {
                dim: "mask H",
                expected: self.height,
                actual: mask.height(),
            });
        }
        if mask.width() != self.width {
            return Err(Error::ShapeMismatch {
                dim: "mask W",
                expected: self.width,
                actual: mask.width(),
            });
        }
        self.masks.insert(slot, mask);
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Labeled slots in increasing order.
    pub fn labeled_slots(&self) -> Vec<usize> {
        self.masks.keys().copied().collect()
    }

    pub fn get(&self, slot: usize) -> Option<&BinaryMask> {
        self.masks.get(&slot)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &BinaryMask)> {
        self.masks.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn map_masks(&self, height: usize, width: usize, f: impl Fn(&BinaryMask) -> BinaryMask) -> Result<Self> {
        let mut out = Self::new(self.frames, height, width);
        for (slot, m) in self.iter() {
            out.insert(slot, f(m))?;
        }
        Ok(out)
    }
}

/// A clip with a subset of slots zeroed for reconstruction pre-training.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedClip {
    pub clip: VideoTensor,
    pub masked_slots: Vec<usize>,
}
