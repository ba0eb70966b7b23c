//! Shared domain types, the binary container, and the seeded random source.

pub mod container;
mod rng;
mod video;

use std::path::Path;

pub use container::{Archive, ArrayData};
pub use rng::RandomSource;
pub use video::{
    perfect_sqrt, validate_clip, BinaryMask, ClipSpec, MaskedClip, Phase, Slot, SparseLabelSet,
    VideoTensor, CHANNELS,
};

use crate::error::{Error, Result};

/// Masks for a set of source frames of one video, stored in the same
/// container as videos (`kind = "masks"`).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskStack {
    pub frame_indices: Vec<usize>,
    pub masks: Vec<BinaryMask>,
}

impl MaskStack {
    pub fn to_archive(&self) -> Result<Archive> {
        let (h, w) = self
            .masks
            .first()
            .map(|m| (m.height(), m.width()))
            .unwrap_or((0, 0));
        let mut bytes = Vec::with_capacity(self.masks.len() * h * w);
        for m in &self.masks {
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::invalid("mask stack with mixed shapes"));
            }
            bytes.extend(m.to_bytes());
        }
        let mut a = Archive::new();
        a.push_text("kind", "masks");
        a.push("masks", vec![self.masks.len(), h, w], ArrayData::U8(bytes))?;
        a.push(
            "frame_index",
            vec![self.frame_indices.len()],
            ArrayData::U64(self.frame_indices.iter().map(|&i| i as u64).collect()),
        )?;
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.text("kind")? != "masks" {
            return Err(Error::Format("container is not a mask stack".into()));
        }
        let (dims, bytes) = a.u8s("masks")?;
        if dims.len() != 3 {
            return Err(Error::Format(format!("bad mask dims {dims:?}")));
        }
        let (n, h, w) = (dims[0], dims[1], dims[2]);
        let (_, idx) = a.u64s("frame_index")?;
        if idx.len() != n {
            return Err(Error::Format("frame_index length disagrees with mask count".into()));
        }
        let masks = (0..n)
            .map(|i| BinaryMask::from_bytes(h, w, &bytes[i * h * w..(i + 1) * h * w]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            frame_indices: idx.iter().map(|&i| i as usize).collect(),
            masks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn video_round_trips_bit_exactly(
            h in 1usize..6, w in 1usize..6, f in 1usize..5,
            seed in any::<u64>(), pad_last in any::<bool>(),
        ) {
            let mut rng = RandomSource::new(seed);
            let n = h * w * f * CHANNELS;
            let mut pixels: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.next_u32_finite())).collect();
            let mut slots: Vec<Slot> = (0..f).map(|i| Slot::Frame(i * 3)).collect();
            if pad_last {
                let plane = h * w * CHANNELS;
                pixels[(f - 1) * plane..].iter_mut().for_each(|p| *p = 0.0);
                slots[f - 1] = Slot::Pad(99);
            }
            let v = VideoTensor::new(h, w, pixels, slots).unwrap();
            let bytes = v.to_archive().to_bytes();
            let back = VideoTensor::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
            prop_assert_eq!(v.slots(), back.slots());
            let a: Vec<u32> = v.pixels().iter().map(|p| p.to_bits()).collect();
            let b: Vec<u32> = back.pixels().iter().map(|p| p.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    trait FiniteBits {
        fn next_u32_finite(&mut self) -> u32;
    }

    impl FiniteBits for RandomSource {
        fn next_u32_finite(&mut self) -> u32 {
            use rand::RngCore;
            loop {
                let b = self.next_u32();
                if f32::from_bits(b).is_finite() {
                    return b;
                }
            }
        }
    }

    #[test]
    fn mask_stack_round_trip() {
        let m = BinaryMask::from_fn(5, 7, |y, x| (x + y) % 3 == 0);
        let s = MaskStack {
            frame_indices: vec![4, 9],
            masks: vec![m.clone(), BinaryMask::empty(5, 7)],
        };
        let back = MaskStack::from_archive(&s.to_archive().unwrap()).unwrap();
        assert_eq!(s, back);
    }
}
