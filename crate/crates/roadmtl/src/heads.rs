//! Task heads: the five steering-angle heads (one per steering-feature
//! scale), the steering-feature segmentation head, and the auxiliary
//! segmentation head.
//!
//! The steering heads for the 320×1216 target resolution are fixed layer
//! stacks (unpadded convolutions and pools, floor-division output sizes);
//! other resolutions get an analogous stack from a generator that follows
//! the same shrink-height-to-one pattern.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Binding, Conv2d, ConvBnRelu, Linear, ParamStore};
use crate::tensor::Tensor;

/// The five steering-feature scales a head can attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleTag {
    /// Full input resolution (the aggregated output steering feature).
    Full,
    /// 1/4 scale (finest pyramid level).
    S4,
    S8,
    S16,
    S32,
}

impl ScaleTag {
    pub const ALL: [ScaleTag; 5] = [ScaleTag::Full, ScaleTag::S4, ScaleTag::S8, ScaleTag::S16, ScaleTag::S32];

    pub fn name(self) -> &'static str {
        match self {
            ScaleTag::Full => "full",
            ScaleTag::S4 => "s4",
            ScaleTag::S8 => "s8",
            ScaleTag::S16 => "s16",
            ScaleTag::S32 => "s32",
        }
    }

    /// Steering-feature spatial size at this scale for input `(h, w)`.
    pub fn feature_size(self, input: (usize, usize)) -> (usize, usize) {
        let (h, w) = input;
        match self {
            ScaleTag::Full => (h, w),
            ScaleTag::S4 => (h / 4, w / 4),
            ScaleTag::S8 => (h / 8, w / 8),
            ScaleTag::S16 => (h / 16, w / 16),
            ScaleTag::S32 => (h / 32, w / 32),
        }
    }
}

/// One stage of a steering head's convolutional part.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadLayer {
    /// Unpadded convolution (BatchNorm + ReLU follow), 64-ish output width.
    Conv { kernel: (usize, usize), stride: (usize, usize) },
    /// Unpadded max pool.
    Pool { kernel: (usize, usize), stride: (usize, usize) },
}

impl HeadLayer {
    fn out_size(self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (k, s) = match self {
            HeadLayer::Conv { kernel, stride } | HeadLayer::Pool { kernel, stride } => (kernel, stride),
        };
        if h < k.0 || w < k.1 {
            return None;
        }
        Some(((h - k.0) / s.0 + 1, (w - k.1) / s.1 + 1))
    }
}

/// One row of a head's shape trace (used to pin the architecture in tests).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub layer: &'static str,
    pub out: Vec<usize>,
}

/// The architecture of one steering head: expected input and stage list.
/// The convolutional stages shrink the feature to height 1; a two-layer
/// perceptron (hidden width 25) maps the flattened row to one scalar.
#[derive(Debug, Clone)]
pub struct SteeringHeadSpec {
    pub scale_tag: ScaleTag,
    /// `(channels, h, w)`; channels is always the steering-feature width 4.
    pub expected_input: (usize, usize, usize),
    pub layers: Vec<HeadLayer>,
}

pub const STEER_FEATURE_CHANNELS: usize = 4;
pub const HEAD_HIDDEN: usize = 25;

/// The target resolution whose heads are pinned layer-for-layer.
pub const PINNED_INPUT: (usize, usize) = (320, 1216);

fn conv(kernel: (usize, usize), stride: (usize, usize)) -> HeadLayer {
    HeadLayer::Conv { kernel, stride }
}

fn pool(kernel: (usize, usize), stride: (usize, usize)) -> HeadLayer {
    HeadLayer::Pool { kernel, stride }
}

impl SteeringHeadSpec {
    /// The fixed stack for `tag` at the pinned 320×1216 input resolution.
    pub fn pinned(tag: ScaleTag) -> Self {
        let layers = match tag {
            ScaleTag::Full => vec![
                conv((5, 5), (2, 2)),
                pool((3, 3), (3, 3)),
                conv((5, 5), (2, 2)),
                pool((2, 2), (2, 2)),
                conv((3, 3), (1, 1)),
                pool((2, 2), (2, 2)),
                conv((3, 3), (1, 1)),
                conv((3, 3), (1, 1)),
            ],
            ScaleTag::S4 => vec![
                conv((5, 5), (2, 2)),
                pool((2, 2), (2, 2)),
                conv((5, 5), (2, 2)),
                pool((2, 2), (2, 2)),
                conv((3, 3), (1, 1)),
                conv((2, 3), (1, 1)),
            ],
            ScaleTag::S8 => vec![
                conv((5, 5), (2, 2)),
                pool((2, 3), (2, 3)),
                conv((3, 3), (1, 1)),
                conv((3, 3), (1, 1)),
                conv((3, 3), (1, 1)),
                conv((3, 3), (1, 1)),
            ],
            ScaleTag::S16 => vec![
                conv((5, 5), (2, 2)),
                conv((3, 3), (1, 1)),
                conv((3, 3), (1, 1)),
                conv((3, 3), (1, 1)),
                conv((2, 3), (1, 1)),
            ],
            ScaleTag::S32 => vec![
                conv((3, 3), (1, 1)),
                conv((3, 3), (1, 1)),
                conv((3, 3), (1, 1)),
                conv((3, 3), (1, 1)),
                conv((2, 3), (1, 1)),
            ],
        };
        let (h, w) = tag.feature_size(PINNED_INPUT);
        Self { scale_tag: tag, expected_input: (STEER_FEATURE_CHANNELS, h, w), layers }
    }

    /// Stack for an arbitrary feature size, following the pinned pattern:
    /// large heights start with a stride-2 5×5 convolution (plus a 2×2 pool
    /// while still large), then unpadded 3×3 convolutions walk the height
    /// down to 1, with kernels clamped near the boundary.
    pub fn generic(tag: ScaleTag, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::shape(
                "steering_head_spec",
                format!("feature size {h}x{w} is degenerate"),
            ));
        }
        let mut layers = Vec::new();
        let (mut ch, mut cw) = (h, w);
        while ch > 1 {
            let layer = if ch >= 20 && cw >= 5 {
                conv((5, 5), (2, 2))
            } else {
                conv((ch.min(3), cw.min(3)), (1, 1))
            };
            let (nh, nw) = layer.out_size(ch, cw).ok_or_else(|| {
                Error::shape("steering_head_spec", format!("cannot shrink {ch}x{cw}"))
            })?;
            layers.push(layer);
            ch = nh;
            cw = nw;
            if ch >= 10 && cw >= 2 {
                let p = pool((2, 2), (2, 2));
                let (nh, nw) = p.out_size(ch, cw).expect("pool fits");
                layers.push(p);
                ch = nh;
                cw = nw;
            }
        }
        Ok(Self { scale_tag: tag, expected_input: (STEER_FEATURE_CHANNELS, h, w), layers })
    }

    /// Pinned stack when the feature size matches it, generic otherwise.
    pub fn for_feature(tag: ScaleTag, h: usize, w: usize) -> Result<Self> {
        let pinned = Self::pinned(tag);
        if pinned.expected_input == (STEER_FEATURE_CHANNELS, h, w) {
            Ok(pinned)
        } else {
            Self::generic(tag, h, w)
        }
    }

    /// Spatial size after the convolutional stages.
    pub fn final_conv_size(&self) -> Result<(usize, usize)> {
        let (_, mut h, mut w) = self.expected_input;
        for layer in &self.layers {
            let (nh, nw) = layer.out_size(h, w).ok_or_else(|| {
                Error::shape(
                    "steering_head_spec",
                    format!("layer {layer:?} does not fit {h}x{w}"),
                )
            })?;
            h = nh;
            w = nw;
        }
        Ok((h, w))
    }

    fn final_channels(&self, conv_width: usize) -> usize {
        if self.layers.iter().any(|l| matches!(l, HeadLayer::Conv { .. })) {
            conv_width
        } else {
            self.expected_input.0
        }
    }

    /// Flattened feature length entering the perceptron.
    pub fn flatten_len(&self, conv_width: usize) -> Result<usize> {
        let (h, w) = self.final_conv_size()?;
        Ok(self.final_channels(conv_width) * h * w)
    }

    /// Full analytic shape trace: every stage including the batch norm,
    /// activation, flatten and linear rows.
    pub fn layer_trace(&self, conv_width: usize) -> Result<Vec<TraceEntry>> {
        let (mut ch, mut h, mut w) = self.expected_input;
        let mut rows = vec![TraceEntry { layer: "input", out: vec![ch, h, w] }];
        for layer in &self.layers {
            let (nh, nw) = layer.out_size(h, w).ok_or_else(|| {
                Error::shape("steering_head_spec", format!("layer {layer:?} does not fit {h}x{w}"))
            })?;
            h = nh;
            w = nw;
            match layer {
                HeadLayer::Conv { .. } => {
                    ch = conv_width;
                    rows.push(TraceEntry { layer: "conv", out: vec![ch, h, w] });
                    rows.push(TraceEntry { layer: "batch_norm", out: vec![ch, h, w] });
                    rows.push(TraceEntry { layer: "relu", out: vec![ch, h, w] });
                }
                HeadLayer::Pool { .. } => {
                    rows.push(TraceEntry { layer: "max_pool", out: vec![ch, h, w] });
                }
            }
        }
        rows.push(TraceEntry { layer: "flatten", out: vec![ch * h * w] });
        rows.push(TraceEntry { layer: "linear", out: vec![HEAD_HIDDEN] });
        rows.push(TraceEntry { layer: "relu", out: vec![HEAD_HIDDEN] });
        rows.push(TraceEntry { layer: "linear", out: vec![1] });
        Ok(rows)
    }
}

enum Stage {
    Conv(ConvBnRelu),
    Pool { kernel: (usize, usize), stride: (usize, usize) },
}

/// A steering head instance: the convolutional stages of its spec plus the
/// flatten → hidden → scalar perceptron.
pub struct SteeringHead {
    spec: SteeringHeadSpec,
    stages: Vec<Stage>,
    fc1: Linear,
    fc2: Linear,
}

impl SteeringHead {
    pub const DEFAULT_CONV_WIDTH: usize = 64;

    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        spec: SteeringHeadSpec,
        conv_width: usize,
    ) -> Result<Self> {
        let mut stages = Vec::new();
        let mut in_ch = spec.expected_input.0;
        for (i, layer) in spec.layers.iter().enumerate() {
            match *layer {
                HeadLayer::Conv { kernel, stride } => {
                    let block = ConvBnRelu::new(
                        store,
                        rng,
                        &format!("{name}.conv{i}"),
                        in_ch,
                        conv_width,
                        kernel,
                        stride,
                        (0, 0),
                    )?;
                    stages.push(Stage::Conv(block));
                    in_ch = conv_width;
                }
                HeadLayer::Pool { kernel, stride } => {
                    stages.push(Stage::Pool { kernel, stride });
                }
            }
        }
        let flat = spec.flatten_len(conv_width)?;
        let fc1 = Linear::new(store, rng, &format!("{name}.fc1"), flat, HEAD_HIDDEN, true)?;
        let fc2 = Linear::new(store, rng, &format!("{name}.fc2"), HEAD_HIDDEN, 1, true)?;
        Ok(Self { spec, stages, fc1, fc2 })
    }

    pub fn spec(&self) -> &SteeringHeadSpec {
        &self.spec
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let e = self.spec.expected_input;
        if s.len() != 4 || (s[1], s[2], s[3]) != e {
            return Err(Error::shape(
                "steering_head",
                format!(
                    "{} head expects [N,{},{},{}], got {s:?}",
                    self.spec.scale_tag.name(),
                    e.0,
                    e.1,
                    e.2
                ),
            ));
        }
        Ok(())
    }

    /// `x`: `[N,4,h,w]` steering feature → `[N]` normalized angles.
    pub fn forward(&self, b: &Binding<'_>, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_inner(b, x, None)?.0)
    }

    /// Forward pass that also records the shape of every intermediate
    /// activation, mirroring [`SteeringHeadSpec::layer_trace`].
    pub fn forward_with_trace(&self, b: &Binding<'_>, x: &Tensor) -> Result<(Tensor, Vec<TraceEntry>)> {
        let mut trace = Vec::new();
        let (out, _) = self.forward_inner(b, x, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn forward_inner(
        &self,
        b: &Binding<'_>,
        x: &Tensor,
        mut trace: Option<&mut Vec<TraceEntry>>,
    ) -> Result<(Tensor, ())> {
        self.check_input(x)?;
        let mut record = |layer: &'static str, t: &Tensor| {
            if let Some(rows) = trace.as_deref_mut() {
                rows.push(TraceEntry { layer, out: t.shape()[1..].to_vec() });
            }
        };
        record("input", x);
        let mut cur = x.clone();
        for stage in &self.stages {
            match stage {
                Stage::Conv(block) => {
                    // expand the composite so the trace shows each row
                    cur = block.conv().forward(b, &cur)?;
                    record("conv", &cur);
                    cur = block.bn().forward(b, &cur)?;
                    record("batch_norm", &cur);
                    cur = cur.relu();
                    record("relu", &cur);
                }
                Stage::Pool { kernel, stride } => {
                    cur = cur.max_pool2d(*kernel, *stride)?;
                    record("max_pool", &cur);
                }
            }
        }
        let n = cur.shape()[0];
        let flat_len: usize = cur.shape()[1..].iter().product();
        let flat = cur.reshape(&[n, flat_len])?;
        record("flatten", &flat);
        let hidden = self.fc1.forward(b, &flat)?;
        record("linear", &hidden);
        let hidden = hidden.relu();
        record("relu", &hidden);
        let out = self.fc2.forward(b, &hidden)?;
        record("linear", &out);
        Ok((out.reshape(&[n])?, ()))
    }
}

/// Per-scale segmentation head applied to a 4-channel steering feature:
/// size-preserving 3×3 convolution stack ending in a 1-channel logit map.
pub struct SteeringFeatureSegHead {
    conv1: Conv2d,
    bn: BatchNorm2d,
    conv2: Conv2d,
}

impl SteeringFeatureSegHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str) -> Result<Self> {
        let c = STEER_FEATURE_CHANNELS;
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), c, c, (3, 3), (1, 1), (1, 1), false)?;
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), c)?;
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), c, 1, (3, 3), (1, 1), (1, 1), true)?;
        Ok(Self { conv1, bn, conv2 })
    }

    /// `[N,4,h,w]` steering feature → `[N,1,h,w]` road logits.
    pub fn forward(&self, b: &Binding<'_>, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[1] != STEER_FEATURE_CHANNELS {
            return Err(Error::shape(
                "steering_feature_seg_head",
                format!("want [N,{STEER_FEATURE_CHANNELS},h,w], got {s:?}"),
            ));
        }
        let y = self.conv1.forward(b, x)?;
        let y = self.bn.forward(b, &y)?;
        self.conv2.forward(b, &y.relu())
    }
}

/// Auxiliary segmentation head over the three finest pyramid levels:
/// upsample levels 1 and 2 to level-0 size, concatenate, fuse, project to a
/// 1-channel logit map, and upsample to the input resolution.
pub struct AuxSegHead {
    fuse: ConvBnRelu,
    project: Conv2d,
}

impl AuxSegHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        level_channels: &[usize],
        width: usize,
    ) -> Result<Self> {
        if level_channels.len() < 3 {
            return Err(Error::contract(
                "aux_seg_head",
                format!("need 3 pyramid levels, got {}", level_channels.len()),
            ));
        }
        let in_ch: usize = level_channels[..3].iter().sum();
        let fuse = ConvBnRelu::new(store, rng, &format!("{name}.fuse"), in_ch, width, (3, 3), (1, 1), (1, 1))?;
        let project = Conv2d::new(store, rng, &format!("{name}.project"), width, 1, (1, 1), (1, 1), (0, 0), true)?;
        Ok(Self { fuse, project })
    }

    /// `levels`: pyramid levels (at least 3), `out_size`: input resolution.
    pub fn forward(&self, b: &Binding<'_>, levels: &[Tensor], out_size: (usize, usize)) -> Result<Tensor> {
        if levels.len() < 3 {
            return Err(Error::contract(
                "aux_seg_head",
                format!("need 3 pyramid levels, got {}", levels.len()),
            ));
        }
        let (h0, w0) = (levels[0].shape()[2], levels[0].shape()[3]);
        let l1 = levels[1].bilinear_resize(h0, w0)?;
        let l2 = levels[2].bilinear_resize(h0, w0)?;
        let cat = Tensor::concat_channels(&[&levels[0], &l1, &l2])?;
        let fused = self.fuse.forward(b, &cat)?;
        let logits = self.project.forward(b, &fused)?;
        logits.bilinear_resize(out_size.0, out_size.1)
    }
}
