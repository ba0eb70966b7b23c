//! Synthetic beating-ventricle videos with exact dense masks.
//!
//! A dark elliptical cavity sits inside a bright wall on mid-grey tissue.
//! Its area follows a raised cosine between the ED area and
//! `area_ratio * ED area` with the requested period; multiplicative
//! log-normal speckle is applied to the intensity image only.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{DENSE_DIR, FILE_LIST, SPARSE_DIR, Split, VIDEO_DIR, VIDEO_EXT};
use crate::types::{BinaryMask, MaskStack, RandomSource, VideoTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub length: usize,
    /// Frames per beat.
    pub period: f64,
    /// ES area divided by ED area.
    pub area_ratio: f64,
    pub speckle_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            length: 100,
            period: 20.0,
            area_ratio: 0.5,
            speckle_sigma: 0.3,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("height/width", "must be at least 8 pixels"));
        }
        if !(self.period >= 4.0) {
            return Err(Error::config("period", "must be at least 4 frames"));
        }
        if (self.length as f64) < 2.0 * self.period {
            return Err(Error::config("length", "must cover at least two periods"));
        }
        if !(self.area_ratio > 0.0 && self.area_ratio < 1.0) {
            return Err(Error::config("area_ratio", "must lie in (0, 1)"));
        }
        if !(self.speckle_sigma >= 0.0 && self.speckle_sigma.is_finite()) {
            return Err(Error::config("speckle_sigma", "must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub video: VideoTensor,
    pub masks: Vec<BinaryMask>,
    pub ed_indices: Vec<usize>,
    pub es_indices: Vec<usize>,
}

struct Geometry {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    phase: f64,
}

impl Geometry {
    fn draw(spec: &PhantomSpec, rng: &mut RandomSource) -> Self {
        let (w, h) = (spec.width as f64, spec.height as f64);
        Self {
            cx: w / 2.0 + rng.uniform_range(-0.05, 0.05) * w,
            cy: h / 2.0 + rng.uniform_range(-0.05, 0.05) * h,
            ax: rng.uniform_range(0.20, 0.24) * w,
            ay: rng.uniform_range(0.27, 0.31) * h,
            phase: rng.uniform_range(0.0, spec.period),
        }
    }

    /// Area scale at time `t`, in `[area_ratio, 1]`, maximal at `phase`.
    fn scale(&self, spec: &PhantomSpec, t: f64) -> f64 {
        let c = (2.0 * PI * (t - self.phase) / spec.period).cos();
        spec.area_ratio + (1.0 - spec.area_ratio) * 0.5 * (1.0 + c)
    }
}

fn extrema(spec: &PhantomSpec, start: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut t = start;
    while t - spec.period >= -0.5 {
        t -= spec.period;
    }
    while t < -0.5 {
        t += spec.period;
    }
    while t.round() < spec.length as f64 {
        let i = t.round() as usize;
        if out.last() != Some(&i) {
            out.push(i);
        }
        t += spec.period;
    }
    out
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = RandomSource::new(spec.seed);
    let g = Geometry::draw(spec, &mut rng);
    let mut noise = rng.fork(1);
    let (h, w) = (spec.height, spec.width);
    let sigma = spec.speckle_sigma;

    let mut masks = Vec::with_capacity(spec.length);
    let mut frames = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        let s = g.scale(spec, t as f64).sqrt();
        let (ax, ay) = (g.ax * s, g.ay * s);
        let rho = |y: usize, x: usize| {
            let dx = (x as f64 - g.cx) / ax;
            let dy = (y as f64 - g.cy) / ay;
            (dx * dx + dy * dy).sqrt()
        };
        masks.push(BinaryMask::from_fn(h, w, |y, x| rho(y, x) <= 1.0));
        let mut plane = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let r = rho(y, x);
                let base = if r <= 1.0 {
                    0.08
                } else if r <= 1.35 {
                    0.75
                } else {
                    0.35 + 0.1 * (-(r - 1.35)).exp()
                };
                let speckle = (sigma * noise.normal() - 0.5 * sigma * sigma).exp();
                plane.push((base * speckle).clamp(0.0, 1.0) as f32);
            }
        }
        frames.push(plane);
    }
    let video = VideoTensor::from_gray_frames(h, w, &frames)?;
    Ok(Phantom {
        ed_indices: extrema(spec, g.phase),
        es_indices: extrema(spec, g.phase + 0.5 * spec.period),
        spec: spec.clone(),
        video,
        masks,
    })
}

impl Phantom {
    /// ED frame and the first ES frame after it.
    pub fn annotated_pair(&self) -> Option<(usize, usize)> {
        self.ed_indices.iter().find_map(|&ed| {
            self.es_indices
                .iter()
                .find(|&&es| es > ed)
                .map(|&es| (ed, es))
        })
    }
}

/// Split fractions for export. Val and test counts are floored; the
/// remainder goes to train.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn assign(&self, n: usize) -> Vec<Split> {
        let val = ((n as f64 * self.val).floor() as usize).min(n);
        let test = ((n as f64 * self.test).floor() as usize).min(n - val);
        let train = n - val - test;
        let mut out = vec![Split::Train; train];
        out.extend(std::iter::repeat(Split::Val).take(val));
        out.extend(std::iter::repeat(Split::Test).take(n - out.len()));
        out
    }
}

#[derive(Serialize)]
struct ExportManifest<'a> {
    kind: &'static str,
    ratios: SplitRatios,
    videos: Vec<ManifestVideo<'a>>,
}

#[derive(Serialize)]
struct ManifestVideo<'a> {
    video_id: &'a str,
    split: Split,
    spec: &'a PhantomSpec,
    ed_indices: &'a [usize],
    es_indices: &'a [usize],
    annotated: (usize, usize),
}

pub fn phantom_id(i: usize) -> String {
    format!("phantom_{i:04}")
}

/// Write phantoms in the sparse-mask layout: videos, one ED and one ES mask
/// per video, dense ground truth, a file list and `manifest.json`.
pub fn export_sparse(phantoms: &[Phantom], dir: &Path, ratios: SplitRatios) -> Result<()> {
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    let (videos, sparse, dense) = (dir.join(VIDEO_DIR), dir.join(SPARSE_DIR), dir.join(DENSE_DIR));
    for d in [dir, &videos, &sparse, &dense] {
        mkdir(d)?;
    }
    let splits = ratios.assign(phantoms.len());
    let mut list = String::from("FileName,Split,NumberOfFrames,FrameHeight,FrameWidth\n");
    let ids: Vec<String> = (0..phantoms.len()).map(phantom_id).collect();
    let mut manifest = ExportManifest {
        kind: "phantom",
        ratios,
        videos: Vec::new(),
    };
    for ((p, id), split) in phantoms.iter().zip(&ids).zip(&splits) {
        let (ed, es) = p
            .annotated_pair()
            .ok_or_else(|| Error::invalid(format!("{id}: no complete ED/ES pair")))?;
        p.video.save(&videos.join(format!("{id}.{VIDEO_EXT}")))?;
        MaskStack {
            frame_indices: vec![ed, es],
            masks: vec![p.masks[ed].clone(), p.masks[es].clone()],
        }
        .save(&sparse.join(format!("{id}.{VIDEO_EXT}")))?;
        MaskStack {
            frame_indices: (0..p.masks.len()).collect(),
            masks: p.masks.clone(),
        }
        .save(&dense.join(format!("{id}.{VIDEO_EXT}")))?;
        list += &format!(
            "{id},{},{},{},{}\n",
            split.as_str(),
            p.video.frames(),
            p.video.height(),
            p.video.width()
        );
        manifest.videos.push(ManifestVideo {
            video_id: id,
            split: *split,
            spec: &p.spec,
            ed_indices: &p.ed_indices,
            es_indices: &p.es_indices,
            annotated: (ed, es),
        });
    }
    let list_path = dir.join(FILE_LIST);
    fs::write(&list_path, list).map_err(|e| Error::io(&list_path, e))?;
    let man_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&man_path, json + "\n").map_err(|e| Error::io(&man_path, e))
}

/// Per-video specs derived from one template: video `i` gets an independent
/// seed forked from the template seed.
pub fn derive_specs(template: &PhantomSpec, count: usize) -> Vec<PhantomSpec> {
    let root = RandomSource::new(template.seed);
    (0..count)
        .map(|i| PhantomSpec {
            seed: root.fork(i as u64).seed(),
            ..template.clone()
        })
        .collect()
}
