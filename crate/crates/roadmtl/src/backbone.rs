//! Multi-scale feature extractor.
//!
//! Downstream modules only depend on the [`FeaturePyramid`] contract: four
//! feature maps at 1/4, 1/8, 1/16 and 1/32 of the input resolution. The
//! shipped extractor is a small stack of stride-2 convolution blocks with
//! configurable widths; heavyweight pretrained backbones can slot in behind
//! the same interface.

use std::path::PathBuf;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Binding, ConvBnRelu, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    ReferenceTiny,
    Pyramid128,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub channels: [usize; 4],
    pub weights_path: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::pyramid_128()
    }
}

impl BackboneConfig {
    pub fn reference_tiny(width: usize) -> Self {
        Self { kind: BackboneKind::ReferenceTiny, channels: [width; 4], weights_path: None }
    }

    /// Uniform 128-channel pyramid.
    pub fn pyramid_128() -> Self {
        Self { kind: BackboneKind::Pyramid128, channels: [128; 4], weights_path: None }
    }

    pub fn custom(channels: [usize; 4]) -> Self {
        Self { kind: BackboneKind::Custom, channels, weights_path: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!(
                "backbone channels must be positive, got {:?}",
                self.channels
            )));
        }
        if self.kind == BackboneKind::Pyramid128 && self.channels != [128; 4] {
            return Err(Error::Config(format!(
                "pyramid_128 fixes channels to [128,128,128,128], got {:?}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Four feature maps; `levels[i]` has spatial size `(H/4 / 2^i, W/4 / 2^i)`.
#[derive(Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub input_size: (usize, usize),
}

impl FeaturePyramid {
    /// Expected spatial size of each level for an input of `(h, w)`.
    pub fn expected_sizes(h: usize, w: usize) -> [(usize, usize); 4] {
        let (h4, w4) = (h / 4, w / 4);
        [
            (h4, w4),
            (h4 / 2, w4 / 2),
            (h4 / 4, w4 / 4),
            (h4 / 8, w4 / 8),
        ]
    }

    fn check(&self, channels: &[usize; 4]) -> Result<()> {
        if self.levels.len() != 4 {
            return Err(Error::contract(
                "feature_pyramid",
                format!("expected 4 levels, got {}", self.levels.len()),
            ));
        }
        let expect = Self::expected_sizes(self.input_size.0, self.input_size.1);
        for (i, level) in self.levels.iter().enumerate() {
            let s = level.shape();
            if s.len() != 4 || s[1] != channels[i] || (s[2], s[3]) != expect[i] {
                return Err(Error::shape(
                    "feature_pyramid",
                    format!(
                        "level {i}: got {s:?}, want channels {} at {:?}",
                        channels[i], expect[i]
                    ),
                ));
            }
        }
        Ok(())
    }
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h % 32 != 0 {
        return Err(Error::shape("extract_pyramid", format!("height {h} not divisible by 32")));
    }
    if w % 32 != 0 {
        return Err(Error::shape("extract_pyramid", format!("width {w} not divisible by 32")));
    }
    Ok(())
}

/// Stride-2 convolution stack: two stem blocks to 1/4 resolution, then one
/// block per coarser level.
pub struct Backbone {
    config: BackboneConfig,
    stem1: ConvBnRelu,
    stem2: ConvBnRelu,
    stages: Vec<ConvBnRelu>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let ch = config.channels;
        let stem1 =
            ConvBnRelu::new(store, rng, "backbone.stem1", 3, ch[0], (3, 3), (2, 2), (1, 1))?;
        let stem2 =
            ConvBnRelu::new(store, rng, "backbone.stem2", ch[0], ch[0], (3, 3), (2, 2), (1, 1))?;
        let mut stages = Vec::new();
        for i in 1..4 {
            stages.push(ConvBnRelu::new(
                store,
                rng,
                &format!("backbone.stage{i}"),
                ch[i - 1],
                ch[i],
                (3, 3),
                (2, 2),
                (1, 1),
            )?);
        }
        Ok(Self { config, stem1, stem2, stages })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `image`: normalized `[N,3,H,W]`, H and W divisible by 32.
    pub fn extract_pyramid(&self, b: &Binding<'_>, image: &Tensor) -> Result<FeaturePyramid> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape(
                "extract_pyramid",
                format!("want [N,3,H,W] input, got {s:?}"),
            ));
        }
        let (h, w) = (s[2], s[3]);
        check_divisible(h, w)?;

        let x = self.stem1.forward(b, image)?;
        let level0 = self.stem2.forward(b, &x)?;
        let mut levels = vec![level0];
        for stage in &self.stages {
            let next = stage.forward(b, levels.last().expect("non-empty"))?;
            levels.push(next);
        }
        let pyramid = FeaturePyramid { levels, input_size: (h, w) };
        pyramid.check(&self.config.channels)?;
        Ok(pyramid)
    }
}
