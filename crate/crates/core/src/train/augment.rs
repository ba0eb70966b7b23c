//! Clip-consistent augmentation: one parameter draw per clip, applied to
//! every frame and every labeled mask.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::types::{BinaryMask, RandomSource, SparseLabelSet, VideoTensor, CHANNELS};

const HIST_BINS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Brightness factor drawn from `1 +- brightness`.
    pub brightness: f64,
    /// Contrast factor drawn from `1 +- contrast`.
    pub contrast: f64,
    pub clahe: bool,
    pub clahe_clip_limit: f64,
    pub clahe_tiles: usize,
    /// Rotation angle drawn from `+- rotation_degrees`.
    pub rotation_degrees: f64,
    pub pad_crop: bool,
    /// Per-side padding at `base_size`; scaled to the actual frame size.
    pub pad: usize,
    pub base_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            brightness: 0.2,
            contrast: 0.2,
            clahe: true,
            clahe_clip_limit: 2.0,
            clahe_tiles: 8,
            rotation_degrees: 15.0,
            pad_crop: true,
            pad: 6,
            base_size: 112,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    /// Padding per side for a frame of height `h`.
    pub fn pad_for(&self, h: usize) -> usize {
        if !self.pad_crop || self.base_size == 0 {
            return 0;
        }
        ((self.pad * h) as f64 / self.base_size as f64).round() as usize
    }
}

/// Contrast-limited adaptive histogram equalisation of one `[0, 1]` plane,
/// with bilinear blending between tile mappings.
pub fn clahe(img: &[f32], h: usize, w: usize, clip_limit: f64, tiles: usize) -> Vec<f32> {
    let ty = tiles.clamp(1, h);
    let tx = tiles.clamp(1, w);
    let bin = |v: f32| ((v.clamp(0.0, 1.0) * HIST_BINS as f32) as usize).min(HIST_BINS - 1);
    let bounds = |i: usize, n: usize, t: usize| (i * n / t, (i + 1) * n / t);

    let mut luts = vec![[0f32; HIST_BINS]; ty * tx];
    for i in 0..ty {
        let (y0, y1) = bounds(i, h, ty);
        for j in 0..tx {
            let (x0, x1) = bounds(j, w, tx);
            let mut hist = [0f64; HIST_BINS];
            for y in y0..y1 {
                for &v in &img[y * w + x0..y * w + x1] {
                    hist[bin(v)] += 1.0;
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let limit = (clip_limit * n / HIST_BINS as f64).max(1.0);
            let mut excess = 0.0;
            for b in hist.iter_mut() {
                if *b > limit {
                    excess += *b - limit;
                    *b = limit;
                }
            }
            let share = excess / HIST_BINS as f64;
            let mut cdf = 0.0;
            let lut = &mut luts[i * tx + j];
            for (b, &c) in hist.iter().enumerate() {
                cdf += c + share;
                lut[b] = (cdf / n) as f32;
            }
        }
    }

    // tile centres and the pair of tiles (with weight) around each coordinate
    let centres = |n: usize, t: usize| -> Vec<f64> {
        (0..t)
            .map(|i| {
                let (a, b) = bounds(i, n, t);
                (a + b) as f64 / 2.0 - 0.5
            })
            .collect()
    };
    let blend = |c: &[f64], p: usize| -> (usize, usize, f32) {
        let p = p as f64;
        if p <= c[0] {
            return (0, 0, 0.0);
        }
        let last = c.len() - 1;
        if p >= c[last] {
            return (last, last, 0.0);
        }
        let k = c.iter().rposition(|&v| v <= p).unwrap();
        (k, k + 1, ((p - c[k]) / (c[k + 1] - c[k])) as f32)
    };
    let cy = centres(h, ty);
    let cx = centres(w, tx);
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        let (i0, i1, fy) = blend(&cy, y);
        for x in 0..w {
            let (j0, j1, fx) = blend(&cx, x);
            let b = bin(img[y * w + x]);
            let top = luts[i0 * tx + j0][b] * (1.0 - fx) + luts[i0 * tx + j1][b] * fx;
            let bot = luts[i1 * tx + j0][b] * (1.0 - fx) + luts[i1 * tx + j1][b] * fx;
            out[y * w + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// One draw of augmentation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub brightness: f64,
    pub contrast: f64,
    /// `(clip limit, tiles)`.
    pub clahe: Option<(f64, usize)>,
    pub angle_degrees: f64,
    pub pad: usize,
    /// Crop origin inside the padded frame, `(y, x)` in `0..=2 * pad`.
    pub crop: (usize, usize),
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            clahe: None,
            angle_degrees: 0.0,
            pad: 0,
            crop: (0, 0),
        }
    }

    pub fn draw(cfg: &AugmentConfig, height: usize, rng: &mut RandomSource) -> Self {
        if !cfg.enabled {
            return Self::identity();
        }
        let pad = cfg.pad_for(height);
        Self {
            brightness: rng.uniform_range(1.0 - cfg.brightness, 1.0 + cfg.brightness),
            contrast: rng.uniform_range(1.0 - cfg.contrast, 1.0 + cfg.contrast),
            clahe: cfg.clahe.then_some((cfg.clahe_clip_limit, cfg.clahe_tiles)),
            angle_degrees: rng.uniform_range(-cfg.rotation_degrees, cfg.rotation_degrees),
            pad,
            crop: (rng.below(2 * pad + 1), rng.below(2 * pad + 1)),
        }
    }

    fn trig(&self) -> (f64, f64) {
        let a = self.angle_degrees;
        if a % 90.0 == 0.0 {
            let q = ((a / 90.0) as i64).rem_euclid(4);
            return [(0.0, 1.0), (1.0, 0.0), (0.0, -1.0), (-1.0, 0.0)][q as usize];
        }
        a.to_radians().sin_cos()
    }

    /// Source coordinate `(y, x)` sampled for output pixel `(y, x)`.
    fn source(&self, h: usize, w: usize, y: usize, x: usize, (s, c): (f64, f64)) -> (f64, f64) {
        let yp = (y + self.crop.0) as f64 - self.pad as f64;
        let xp = (x + self.crop.1) as f64 - self.pad as f64;
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (dy, dx) = (yp - cy, xp - cx);
        (cy - s * dx + c * dy, cx + c * dx + s * dy)
    }

    fn geometric_identity(&self) -> bool {
        self.angle_degrees == 0.0 && self.crop == (self.pad, self.pad)
    }

    pub fn apply_mask(&self, m: &BinaryMask) -> BinaryMask {
        if self.geometric_identity() {
            return m.clone();
        }
        let (h, w) = (m.height(), m.width());
        let t = self.trig();
        BinaryMask::from_fn(h, w, |y, x| {
            let (sy, sx) = self.source(h, w, y, x, t);
            let (ry, rx) = (sy.round(), sx.round());
            ry >= 0.0 && rx >= 0.0 && (ry as usize) < h && (rx as usize) < w && m.get(ry as usize, rx as usize)
        })
    }

    fn warp_plane(&self, src: &[f32], h: usize, w: usize, t: (f64, f64)) -> Vec<f32> {
        let at = |y: isize, x: isize| -> f32 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                src[y as usize * w + x as usize]
            }
        };
        let mut out = vec![0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(h, w, y, x, t);
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
                let (y0, x0) = (y0 as isize, x0 as isize);
                let v = if fy == 0.0 && fx == 0.0 {
                    at(y0, x0)
                } else {
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                    let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                    top * (1.0 - fy) + bot * fy
                };
                out[y * w + x] = v;
            }
        }
        out
    }

    /// Transform the pixels of every non-padding frame.
    pub fn apply_clip(&self, clip: &VideoTensor) -> VideoTensor {
        let mut out = clip.clone();
        let (h, w) = (clip.height(), clip.width());
        let plane = h * w;
        let pads = clip.pad_flags();
        let real = || pads.iter().enumerate().filter(|(_, p)| !**p).map(|(i, _)| i);

        if self.brightness != 1.0 || self.contrast != 1.0 {
            let b = self.brightness as f32;
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for k in real() {
                sum += out.frame(k).iter().map(|&v| (v * b) as f64).sum::<f64>();
                n += out.frame_len();
            }
            let mu = if n > 0 { (sum / n as f64) as f32 } else { 0.0 };
            let c = self.contrast as f32;
            for k in real() {
                out.frame_mut(k)
                    .iter_mut()
                    .for_each(|v| *v = ((*v * b - mu) * c + mu).clamp(0.0, 1.0));
            }
        }

        if let Some((limit, tiles)) = self.clahe {
            for k in real() {
                let f = out.frame_mut(k);
                let mut intensity = vec![0f32; plane];
                for c in 0..CHANNELS {
                    for (i, v) in f[c * plane..(c + 1) * plane].iter().enumerate() {
                        intensity[i] += v / CHANNELS as f32;
                    }
                }
                let eq = clahe(&intensity, h, w, limit, tiles);
                for c in 0..CHANNELS {
                    for (i, v) in f[c * plane..(c + 1) * plane].iter_mut().enumerate() {
                        *v = (*v + eq[i] - intensity[i]).clamp(0.0, 1.0);
                    }
                }
            }
        }

        if !self.geometric_identity() {
            let t = self.trig();
            for k in real() {
                let f = out.frame_mut(k);
                for c in 0..CHANNELS {
                    let warped = self.warp_plane(&f[c * plane..(c + 1) * plane], h, w, t);
                    f[c * plane..(c + 1) * plane].copy_from_slice(&warped);
                }
            }
        }
        out
    }
}

/// Draw once and apply to the clip and its labels.
pub fn augment(
    clip: &VideoTensor,
    labels: &SparseLabelSet,
    cfg: &AugmentConfig,
    rng: &mut RandomSource,
) -> Result<(VideoTensor, SparseLabelSet, AugmentParams)> {
    let params = AugmentParams::draw(cfg, clip.height(), rng);
    let out = params.apply_clip(clip);
    let lab = labels.map_masks(labels.height(), labels.width(), |m| params.apply_mask(m))?;
    Ok((out, lab, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Slot;

    fn disk(n: usize, r: f64) -> BinaryMask {
        let c = (n as f64 - 1.0) / 2.0;
        BinaryMask::from_fn(n, n, |y, x| (y as f64 - c).powi(2) + (x as f64 - c).powi(2) <= r * r)
    }

    fn textured(h: usize, w: usize, f: usize, seed: u64) -> VideoTensor {
        let mut g = RandomSource::new(seed);
        let frames: Vec<Vec<f32>> = (0..f).map(|_| (0..h * w).map(|_| g.uniform() as f32).collect()).collect();
        VideoTensor::from_gray_frames(h, w, &frames).unwrap()
    }

    fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
        let i = a.intersection(b) as f64;
        i / ((a.area() + b.area()) as f64 - i)
    }

    #[test]
    fn disabled_is_identity() {
        let clip = textured(16, 16, 3, 1);
        let mut labels = SparseLabelSet::new(3, 16, 16);
        labels.insert(1, disk(16, 5.0)).unwrap();
        let mut g = RandomSource::new(2);
        let (c, l, _) = augment(&clip, &labels, &AugmentConfig::disabled(), &mut g).unwrap();
        assert_eq!(c, clip);
        assert_eq!(l, labels);
    }

    #[test]
    fn zero_rotation_with_centre_crop_is_identity() {
        let clip = textured(112, 112, 2, 3);
        let cfg = AugmentConfig::default();
        assert_eq!(cfg.pad_for(112), 6);
        let p = AugmentParams {
            pad: 6,
            crop: (6, 6),
            ..AugmentParams::identity()
        };
        assert_eq!(p.apply_clip(&clip), clip);
        let m = disk(112, 30.0);
        assert_eq!(p.apply_mask(&m), m);
        // off-centre crop is a pure shift
        let s = AugmentParams {
            pad: 6,
            crop: (8, 6),
            ..AugmentParams::identity()
        };
        let shifted = s.apply_clip(&clip);
        assert_eq!(shifted.at(0, 0, 10, 20), clip.at(0, 0, 12, 20));
        assert_eq!(shifted.at(0, 0, 111, 20), 0.0);
    }

    #[test]
    fn rotated_disk_keeps_its_area() {
        let m = disk(112, 20.0);
        for a in [-15.0, -7.3, 4.0, 15.0] {
            let p = AugmentParams {
                angle_degrees: a,
                ..AugmentParams::identity()
            };
            let r = p.apply_mask(&m);
            let change = (r.area() as f64 - m.area() as f64).abs() / m.area() as f64;
            assert!(change <= 0.10, "{a}: {change}");
        }
    }

    #[test]
    fn right_angle_rotation_is_exact() {
        let m = BinaryMask::from_fn(9, 9, |y, x| y < 3 && x < 5);
        let p = AugmentParams {
            angle_degrees: 90.0,
            ..AugmentParams::identity()
        };
        let r = p.apply_mask(&m);
        assert_eq!(r.area(), m.area());
        let back = AugmentParams {
            angle_degrees: -90.0,
            ..AugmentParams::identity()
        };
        assert_eq!(back.apply_mask(&r), m);
        let four = (0..4).fold(m.clone(), |acc, _| p.apply_mask(&acc));
        assert_eq!(four, m);
    }

    #[test]
    fn emitted_labels_match_transform_of_untouched_copy() {
        let clip = textured(64, 64, 4, 4);
        let mut labels = SparseLabelSet::new(4, 64, 64);
        let m = disk(64, 14.0);
        labels.insert(0, m.clone()).unwrap();
        labels.insert(3, disk(64, 9.0)).unwrap();
        for seed in 0..10 {
            let mut g = RandomSource::new(seed);
            let (_, l, params) = augment(&clip, &labels, &AugmentConfig::default(), &mut g).unwrap();
            let again = params.apply_mask(&m);
            assert_eq!(l.get(0).unwrap(), &again);
            assert!(iou(l.get(0).unwrap(), &again) >= 0.99);
            // the reference mask survives the transform largely intact
            assert!(dice_like(&m, l.get(0).unwrap()) > 0.8);
        }
    }

    fn dice_like(a: &BinaryMask, b: &BinaryMask) -> f64 {
        2.0 * a.intersection(b) as f64 / (a.area() + b.area()) as f64
    }

    #[test]
    fn one_draw_is_shared_by_all_frames() {
        // identical frames stay identical after augmentation
        let f: Vec<f32> = {
            let mut g = RandomSource::new(5);
            (0..32 * 32).map(|_| g.uniform() as f32).collect()
        };
        let clip = VideoTensor::from_gray_frames(32, 32, &[f.clone(), f.clone(), f]).unwrap();
        let mut g = RandomSource::new(6);
        let p = AugmentParams::draw(&AugmentConfig::default(), 32, &mut g);
        let out = p.apply_clip(&clip);
        assert_eq!(out.frame(0), out.frame(1));
        assert_eq!(out.frame(1), out.frame(2));
        assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pad_frames_are_untouched() {
        let mut pixels = textured(16, 16, 2, 7).pixels().to_vec();
        let n = 16 * 16 * CHANNELS;
        pixels[n..].iter_mut().for_each(|p| *p = 0.0);
        let clip = VideoTensor::new(16, 16, pixels, vec![Slot::Frame(0), Slot::Pad(1)]).unwrap();
        let mut g = RandomSource::new(8);
        let (out, _, _) = augment(&clip, &SparseLabelSet::new(2, 16, 16), &AugmentConfig::default(), &mut g).unwrap();
        assert!(out.frame(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clahe_spreads_a_low_contrast_ramp() {
        let (h, w) = (32, 32);
        let img: Vec<f32> = (0..h * w).map(|i| 0.4 + 0.1 * (i % w) as f32 / w as f32).collect();
        let out = clahe(&img, h, w, 2.0, 4);
        let range = |v: &[f32]| v.iter().cloned().fold(f32::MIN, f32::max) - v.iter().cloned().fold(f32::MAX, f32::min);
        assert!(range(&out) > range(&img));
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        // a single tile is one global mapping, hence monotone
        let global = clahe(&img, h, w, 2.0, 1);
        assert!(global[..w].windows(2).all(|p| p[1] >= p[0]));
    }
}
