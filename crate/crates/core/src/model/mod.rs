//! Encoder/decoder video segmentation networks.
//!
//! Two families share one residual backbone:
//! * `volumetric` runs 3-D convolutions over the `C x F x H x W` clip;
//! * `super_image` tiles the clip into a `sqrt(F) x sqrt(F)` grid and runs
//!   the same network with a depth-1 kernel on the resulting 2-D image.
//!
//! The encoder is reached through the [`Backbone`] trait so other 2-D
//! trunks can be dropped in as long as they expose per-stage outputs.

mod checkpoint;

pub use checkpoint::{Checkpoint, EpochSummary, StageTag};

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::ConvGeom;
use crate::nn::{Grads, NodeId, ParamId, ParamStore, Tape, Volume};
use crate::parallel;
use crate::super_image;
use crate::types::{perfect_sqrt, RandomSource, Slot, VideoTensor, CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Volumetric,
    SuperImage,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Volumetric => "volumetric",
            Family::SuperImage => "super_image",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Segmentation,
    Reconstruction,
}

impl HeadKind {
    pub fn out_channels(self) -> usize {
        match self {
            HeadKind::Segmentation => 1,
            HeadKind::Reconstruction => CHANNELS,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Segmentation => "segmentation",
            HeadKind::Reconstruction => "reconstruction",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub encoder_channels: Vec<usize>,
    pub residual_units_per_stage: usize,
    pub head: HeadKind,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Seed for parameter initialisation.
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn volumetric(height: usize, width: usize, frames: usize) -> Self {
        Self {
            family: Family::Volumetric,
            encoder_channels: vec![32, 64, 128, 256, 512],
            residual_units_per_stage: 2,
            head: HeadKind::Segmentation,
            height,
            width,
            frames,
            init_seed: 0,
        }
    }

    pub fn super_image(height: usize, width: usize, frames: usize) -> Self {
        Self {
            family: Family::SuperImage,
            encoder_channels: vec![32, 64, 128, 256],
            residual_units_per_stage: 2,
            ..Self::volumetric(height, width, frames)
        }
    }

    /// A narrow variant for tests and desk-scale runs.
    pub fn tiny(family: Family, height: usize, width: usize, frames: usize) -> Self {
        let base = match family {
            Family::Volumetric => Self::volumetric(height, width, frames),
            Family::SuperImage => Self::super_image(height, width, frames),
        };
        let stages = base.encoder_channels.len();
        Self {
            encoder_channels: (0..stages).map(|s| 4 << s).collect(),
            residual_units_per_stage: 1,
            ..base
        }
    }

    pub fn with_head(mut self, head: HeadKind) -> Self {
        self.head = head;
        self
    }

    pub fn stages(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Spatial size of the image the network actually sees.
    pub fn network_input(&self) -> Result<[usize; 3]> {
        match self.family {
            Family::Volumetric => Ok([self.frames, self.height, self.width]),
            Family::SuperImage => {
                let g = perfect_sqrt(self.frames).ok_or_else(|| {
                    Error::config("frames", format!("{} is not a perfect square", self.frames))
                })?;
                Ok([1, self.height * g, self.width * g])
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() {
            return Err(Error::config("encoder_channels", "at least one stage is required"));
        }
        if self.encoder_channels[0] == 0 {
            return Err(Error::config("encoder_channels", "channel counts must be positive"));
        }
        if self.encoder_channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("encoder_channels", "channels must strictly increase across stages"));
        }
        if self.residual_units_per_stage == 0 {
            return Err(Error::config("residual_units_per_stage", "must be at least 1"));
        }
        for (field, v) in [("height", self.height), ("width", self.width), ("frames", self.frames)] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        let [_, h, w] = self.network_input()?;
        let factor = 1usize << (self.stages() - 1);
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::config(
                "height",
                format!("network input {h}x{w} must be divisible by {factor}"),
            ));
        }
        Ok(())
    }

    /// Per-stage `[depth, height, width]` strides. Depth halves only while
    /// it is even and above one.
    pub fn stage_strides(&self) -> Vec<[usize; 3]> {
        let mut depth = match self.family {
            Family::Volumetric => self.frames,
            Family::SuperImage => 1,
        };
        (0..self.stages())
            .map(|s| {
                if s == 0 {
                    return [1, 1, 1];
                }
                let t = if depth > 1 && depth % 2 == 0 { 2 } else { 1 };
                depth /= t;
                [t, 2, 2]
            })
            .collect()
    }

    fn depth_kernel(&self) -> usize {
        if self.family == Family::Volumetric && self.frames > 1 {
            3
        } else {
            1
        }
    }

    /// Fields that must agree for parameters to be transferable.
    pub fn check_compatible(&self, other: &ModelConfig) -> Result<()> {
        let mismatch = |field: &str, a: String, b: String| {
            Err(Error::config(field, format!("checkpoint has {a}, configuration has {b}")))
        };
        if self.family != other.family {
            return mismatch("family", other.family.as_str().into(), self.family.as_str().into());
        }
        if self.encoder_channels != other.encoder_channels {
            return mismatch(
                "encoder_channels",
                format!("{:?}", other.encoder_channels),
                format!("{:?}", self.encoder_channels),
            );
        }
        if self.residual_units_per_stage != other.residual_units_per_stage {
            return mismatch(
                "residual_units_per_stage",
                other.residual_units_per_stage.to_string(),
                self.residual_units_per_stage.to_string(),
            );
        }
        for (field, a, b) in [
            ("height", self.height, other.height),
            ("width", self.width, other.width),
            ("frames", self.frames, other.frames),
        ] {
            if a != b {
                return mismatch(field, b.to_string(), a.to_string());
            }
        }
        Ok(())
    }
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut RandomSource,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: Vec<usize>, std: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.normal() * std).collect();
        self.store.add(name, shape, data)
    }

    /// He-normal convolution weight `[cout, cin, kd, kh, kw]`.
    fn conv(&mut self, name: String, cout: usize, cin: usize, k: [usize; 3]) -> ParamId {
        let fan_in = cin * k.iter().product::<usize>();
        self.normal(name, vec![cout, cin, k[0], k[1], k[2]], (2.0 / fan_in as f64).sqrt())
    }

    fn zeros(&mut self, name: String, n: usize) -> ParamId {
        self.store.add(name, vec![n], vec![0.0; n])
    }

    fn alpha(&mut self, name: String) -> ParamId {
        self.store.add(name, vec![1], vec![0.25])
    }
}

/// conv -> norm -> PReLU -> conv -> norm -> PReLU, plus a skip path.
#[derive(Clone, Debug)]
struct ResidualUnit {
    conv1: ParamId,
    prelu1: ParamId,
    conv2: ParamId,
    prelu2: ParamId,
    skip: Option<(ParamId, ParamId)>,
    first: ConvGeom,
    second: ConvGeom,
    skip_geom: ConvGeom,
}

impl ResidualUnit {
    fn build(init: &mut Init, prefix: &str, cin: usize, cout: usize, stride: [usize; 3], kd: usize) -> Self {
        let k = [kd, 3, 3];
        let conv1 = init.conv(format!("{prefix}.conv1.weight"), cout, cin, k);
        let prelu1 = init.alpha(format!("{prefix}.prelu1.alpha"));
        let conv2 = init.conv(format!("{prefix}.conv2.weight"), cout, cout, k);
        let prelu2 = init.alpha(format!("{prefix}.prelu2.alpha"));
        let skip = (cin != cout || stride != [1, 1, 1]).then(|| {
            (
                init.conv(format!("{prefix}.skip.weight"), cout, cin, [1, 1, 1]),
                init.zeros(format!("{prefix}.skip.bias"), cout),
            )
        });
        Self {
            conv1,
            prelu1,
            conv2,
            prelu2,
            skip,
            first: ConvGeom::same(k, stride),
            second: ConvGeom::same(k, [1, 1, 1]),
            skip_geom: ConvGeom::pointwise(stride),
        }
    }

    fn forward(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let h = t.conv(x, self.conv1, None, self.first);
        let h = t.instance_norm(h);
        let h = t.prelu(h, self.prelu1);
        let h = t.conv(h, self.conv2, None, self.second);
        let h = t.instance_norm(h);
        let h = t.prelu(h, self.prelu2);
        let s = match self.skip {
            Some((w, b)) => t.conv(x, w, Some(b), self.skip_geom),
            None => x,
        };
        t.add(h, s)
    }
}

/// A multi-stage encoder exposing every stage output to the decoder.
pub trait Backbone: fmt::Debug + Send + Sync {
    fn stage_channels(&self) -> &[usize];
    /// Downsampling factor of each stage relative to the previous one.
    fn stage_strides(&self) -> &[[usize; 3]];
    fn forward(&self, tape: &mut Tape, input: NodeId) -> Vec<NodeId>;
}

/// Stacks of residual units; the first unit of each stage after the first
/// downsamples.
#[derive(Clone, Debug)]
pub struct ResidualEncoder {
    channels: Vec<usize>,
    strides: Vec<[usize; 3]>,
    stages: Vec<Vec<ResidualUnit>>,
}

impl ResidualEncoder {
    fn build(init: &mut Init, config: &ModelConfig) -> Self {
        let strides = config.stage_strides();
        let kd = config.depth_kernel();
        let mut cin = CHANNELS;
        let mut stages = Vec::new();
        for (s, (&c, &stride)) in config.encoder_channels.iter().zip(&strides).enumerate() {
            let units = (0..config.residual_units_per_stage)
                .map(|u| {
                    let (i, st) = if u == 0 { (cin, stride) } else { (c, [1, 1, 1]) };
                    ResidualUnit::build(init, &format!("encoder.stage{s}.unit{u}"), i, c, st, kd)
                })
                .collect();
            stages.push(units);
            cin = c;
        }
        Self {
            channels: config.encoder_channels.clone(),
            strides,
            stages,
        }
    }
}

impl Backbone for ResidualEncoder {
    fn stage_channels(&self) -> &[usize] {
        &self.channels
    }

    fn stage_strides(&self) -> &[[usize; 3]] {
        &self.strides
    }

    fn forward(&self, tape: &mut Tape, input: NodeId) -> Vec<NodeId> {
        let mut x = input;
        self.stages
            .iter()
            .map(|units| {
                for u in units {
                    x = u.forward(tape, x);
                }
                x
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    stage: usize,
    up: ParamId,
    up_bias: ParamId,
    up_prelu: ParamId,
    unit: ResidualUnit,
}

#[derive(Clone, Debug)]
struct Decoder {
    levels: Vec<DecoderLevel>,
}

impl Decoder {
    fn build(init: &mut Init, backbone: &dyn Backbone, kd: usize) -> Self {
        let ch = backbone.stage_channels();
        let strides = backbone.stage_strides();
        let levels = (0..ch.len().saturating_sub(1))
            .rev()
            .map(|s| {
                let k = strides[s + 1];
                let fan_in = ch[s + 1];
                let up = init.normal(
                    format!("decoder.level{s}.up.weight"),
                    vec![ch[s + 1], ch[s], k[0], k[1], k[2]],
                    (1.0 / fan_in as f64).sqrt(),
                );
                let up_bias = init.zeros(format!("decoder.level{s}.up.bias"), ch[s]);
                let up_prelu = init.alpha(format!("decoder.level{s}.up.prelu.alpha"));
                let unit = ResidualUnit::build(init, &format!("decoder.level{s}.unit"), 2 * ch[s], ch[s], [1, 1, 1], kd);
                DecoderLevel {
                    stage: s,
                    up,
                    up_bias,
                    up_prelu,
                    unit,
                }
            })
            .collect();
        Self { levels }
    }

    fn forward(&self, t: &mut Tape, stages: &[NodeId]) -> NodeId {
        let mut x = *stages.last().expect("at least one stage");
        for level in &self.levels {
            let u = t.conv_transpose(x, level.up, Some(level.up_bias));
            let u = t.instance_norm(u);
            let u = t.prelu(u, level.up_prelu);
            let cat = t.concat(u, stages[level.stage]);
            x = level.unit.forward(t, cat);
        }
        x
    }
}

/// Clip pixels as a `[3, F, H, W]` volume.
pub fn clip_volume(clip: &VideoTensor) -> Volume {
    let (f, h, w) = (clip.frames(), clip.height(), clip.width());
    let mut v = Volume::zeros([CHANNELS, f, h, w]);
    let hw = h * w;
    for k in 0..f {
        for c in 0..CHANNELS {
            let src = clip.channel(k, c);
            let dst = &mut v.data[(c * f + k) * hw..(c * f + k + 1) * hw];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d = *s as f64);
        }
    }
    v
}

pub const HEAD_PREFIX: &str = "head.";
const HEAD_INIT_STD: f64 = 0.01;

/// Where a clip sits in the dataset; lets evaluation predictors that are
/// not networks (such as a ground-truth oracle) answer.
#[derive(Clone, Copy, Debug)]
pub struct ClipContext<'a> {
    pub video_id: &'a str,
    pub slots: &'a [Slot],
}

/// Anything that maps a clip to per-slot logits `[channels, F, H, W]`.
pub trait ClipPredictor: Sync {
    fn predict(&self, clip: &VideoTensor, ctx: &ClipContext) -> Result<Volume>;
}

#[derive(Clone, Debug)]
pub struct SegmentationModel {
    config: ModelConfig,
    params: ParamStore,
    backbone: Arc<dyn Backbone>,
    decoder: Decoder,
    head_weight: ParamId,
    head_bias: ParamId,
}

pub fn build_model(config: ModelConfig) -> Result<SegmentationModel> {
    config.validate()?;
    let mut params = ParamStore::new();
    let mut rng = RandomSource::new(config.init_seed);
    let mut init = Init {
        store: &mut params,
        rng: &mut rng,
    };
    let encoder = ResidualEncoder::build(&mut init, &config);
    let decoder = Decoder::build(&mut init, &encoder, config.depth_kernel());
    let c0 = config.encoder_channels[0];
    let out = config.head.out_channels();
    let head_weight = init.normal(format!("{HEAD_PREFIX}weight"), vec![out, c0, 1, 1, 1], HEAD_INIT_STD);
    let head_bias = init.zeros(format!("{HEAD_PREFIX}bias"), out);
    Ok(SegmentationModel {
        config,
        params,
        backbone: Arc::new(encoder),
        decoder,
        head_weight,
        head_bias,
    })
}

impl SegmentationModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> HeadKind {
        self.config.head
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    pub fn is_head_param(name: &str) -> bool {
        name.starts_with(HEAD_PREFIX)
    }

    /// Replace the output head with a freshly initialised one; the trunk is
    /// left untouched.
    pub fn swap_head(mut self, head: HeadKind, seed: u64) -> Self {
        let c0 = self.config.encoder_channels[0];
        let out = head.out_channels();
        let mut rng = RandomSource::new(seed);
        let w = self.params.get_mut(self.head_weight);
        w.shape = vec![out, c0, 1, 1, 1];
        w.data = (0..out * c0).map(|_| rng.normal() * HEAD_INIT_STD).collect();
        let b = self.params.get_mut(self.head_bias);
        b.shape = vec![out];
        b.data = vec![0.0; out];
        self.config.head = head;
        self
    }

    fn check_clip(&self, clip: &VideoTensor) -> Result<()> {
        for (dim, expected, actual) in [
            ("clip frames", self.config.frames, clip.frames()),
            ("clip height", self.config.height, clip.height()),
            ("clip width", self.config.width, clip.width()),
        ] {
            if expected != actual {
                return Err(Error::ShapeMismatch { dim, expected, actual });
            }
        }
        Ok(())
    }

    fn input_volume(&self, clip: &VideoTensor) -> Result<Volume> {
        let (f, h, w) = (clip.frames(), clip.height(), clip.width());
        match self.config.family {
            Family::Volumetric => Ok(clip_volume(clip)),
            Family::SuperImage => {
                let g = perfect_sqrt(f).ok_or_else(|| Error::invalid("super-image clip needs square F"))?;
                let tiled = super_image::tile(clip.pixels(), f, CHANNELS, h, w)?;
                Volume::from_vec([CHANNELS, 1, h * g, w * g], tiled.into_iter().map(f64::from).collect())
            }
        }
    }

    /// Index map from `[C, F, H, W]` to the tiled `[C, 1, H g, W g]` layout.
    fn untile_index(&self, channels: usize) -> Vec<usize> {
        let (f, h, w) = (self.config.frames, self.config.height, self.config.width);
        let g = perfect_sqrt(f).expect("validated");
        let (bh, bw) = (h * g, w * g);
        let mut index = Vec::with_capacity(channels * f * h * w);
        for c in 0..channels {
            for k in 0..f {
                let (gr, gc) = (k / g, k % g);
                for y in 0..h {
                    let row = (c * bh + gr * h + y) * bw + gc * w;
                    index.extend(row..row + w);
                }
            }
        }
        index
    }

    /// Record a forward pass for later backpropagation.
    pub fn forward(&self, clip: &VideoTensor) -> Result<ForwardPass<'_>> {
        self.check_clip(clip)?;
        let input = self.input_volume(clip)?;
        let mut tape = Tape::new(&self.params);
        let x = tape.input(input);
        let stages = self.backbone.forward(&mut tape, x);
        let top = self.decoder.forward(&mut tape, &stages);
        let mut out = tape.conv(top, self.head_weight, Some(self.head_bias), ConvGeom::pointwise([1, 1, 1]));
        if self.config.family == Family::SuperImage {
            let c = self.config.head.out_channels();
            let shape = [c, self.config.frames, self.config.height, self.config.width];
            out = tape.gather(out, shape, self.untile_index(c));
        }
        Ok(ForwardPass {
            tape,
            out,
            stages,
        })
    }

    /// Output without keeping the tape.
    pub fn predict_logits(&self, clip: &VideoTensor) -> Result<Volume> {
        let pass = self.forward(clip)?;
        let out = pass.output().clone();
        if !out.is_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        Ok(out)
    }
}

impl ClipPredictor for SegmentationModel {
    fn predict(&self, clip: &VideoTensor, _ctx: &ClipContext) -> Result<Volume> {
        self.predict_logits(clip)
    }
}

/// A recorded forward computation.
pub struct ForwardPass<'m> {
    tape: Tape<'m>,
    out: NodeId,
    stages: Vec<NodeId>,
}

impl ForwardPass<'_> {
    /// `[channels, F, H, W]`.
    pub fn output(&self) -> &Volume {
        self.tape.value(self.out)
    }

    /// Encoder stage activations, shallowest first.
    pub fn stage_outputs(&self) -> Vec<&Volume> {
        self.stages.iter().map(|&s| self.tape.value(s)).collect()
    }

    pub fn backward(&self, grad: Volume) -> Grads {
        self.tape.backward(self.out, grad)
    }

    /// Backpropagate through a graph that keeps only the listed output
    /// frames; `grad` is `[channels, frames.len(), H, W]`.
    pub fn backward_selected(&mut self, frames: &[usize], grad: Volume) -> Grads {
        let sel = self.tape.select_frames(self.out, frames);
        self.tape.backward(sel, grad)
    }
}

/// Runs a single-frame model independently on every slot of a clip.
#[derive(Clone, Debug)]
pub struct Framewise {
    inner: SegmentationModel,
}

impl Framewise {
    pub fn new(inner: SegmentationModel) -> Result<Self> {
        if inner.config.frames != 1 {
            return Err(Error::config("frames", "frame-wise wrapper needs an F = 1 model"));
        }
        Ok(Self { inner })
    }

    pub fn inner(&self) -> &SegmentationModel {
        &self.inner
    }

    pub fn predict_logits(&self, clip: &VideoTensor) -> Result<Volume> {
        let (h, w) = (clip.height(), clip.width());
        let per_frame = parallel::map_indexed(clip.frames(), |k| {
            let frame = VideoTensor::new(h, w, clip.frame(k).to_vec(), vec![Slot::Frame(0)])?;
            self.inner.predict_logits(&frame)
        });
        let c = self.inner.head().out_channels();
        let f = clip.frames();
        let mut out = Volume::zeros([c, f, h, w]);
        let hw = h * w;
        for (k, v) in per_frame.into_iter().enumerate() {
            let v = v?;
            for ch in 0..c {
                out.data[(ch * f + k) * hw..(ch * f + k + 1) * hw].copy_from_slice(v.plane(ch, 0));
            }
        }
        Ok(out)
    }
}

impl ClipPredictor for Framewise {
    fn predict(&self, clip: &VideoTensor, _ctx: &ClipContext) -> Result<Volume> {
        self.predict_logits(clip)
    }
}
