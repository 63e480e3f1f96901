//! The multi-scale two-task model.
//!
//! Per pyramid scale the model makes an initial prediction for both tasks
//! (road segmentation logits, a 4-channel steering feature). Predictions
//! propagate from coarse to fine scales as extra input features; a
//! cross-task distillation block at every scale mixes the two tasks with
//! spatial attention; per-task aggregation heads fuse all scales into the
//! final full-resolution outputs. Steering-angle heads read the steering
//! features, and auxiliary segmentation heads read the steering features
//! and the raw pyramid.

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::heads::{
    AuxSegHead, ScaleTag, SteeringFeatureSegHead, SteeringHead, SteeringHeadSpec,
    STEER_FEATURE_CHANNELS,
};
use crate::nn::{Binding, Conv2d, ConvBnRelu, ParamStore};
use crate::tensor::{ArrayDyn, Tensor};

pub const SEG_CHANNELS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channel width of the task-interaction blocks.
    pub width: usize,
    /// Channel width of the steering heads' convolutions.
    pub steer_conv_width: usize,
    /// Input size at which the steering heads apply (the target dataset's
    /// image size).
    pub target_resolution: (usize, usize),
    /// Per-channel input normalization.
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            steer_conv_width: 64,
            target_resolution: (320, 1216),
            norm_mean: [0.5; 3],
            norm_std: [0.5; 3],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.steer_conv_width == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        let (h, w) = self.target_resolution;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "target resolution {h}x{w} must be divisible by 32"
            )));
        }
        if self.norm_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("norm_std entries must be positive".into()));
        }
        Ok(())
    }
}

/// Both tasks' initial outputs at one scale.
#[derive(Debug)]
pub struct InitialPrediction {
    pub scale_index: usize,
    /// `[N,1,h,w]` road logits.
    pub seg_logits: Tensor,
    /// `[N,4,h,w]` steering feature.
    pub steer_feature: Tensor,
}

/// Steering-angle outputs; present only for target-kind forward passes.
#[derive(Debug)]
pub struct SteerOutputs {
    /// `[N]`, from the full-resolution steering feature.
    pub final_angle: Tensor,
    /// One `[N]` per pyramid scale (fine to coarse).
    pub deep_angles: Vec<Tensor>,
}

#[derive(Debug)]
pub struct ModelOutputs {
    /// `[N,1,H,W]` primary road logits.
    pub primary_seg_logits: Tensor,
    /// `[N,1,H,W]` auxiliary road logits (from the raw pyramid).
    pub aux_seg_logits: Tensor,
    /// `[N,4,H,W]` aggregated steering feature.
    pub final_steer_feature: Tensor,
    /// Initial predictions, scales 0..3 (fine to coarse).
    pub initial: Vec<InitialPrediction>,
    /// Road logits decoded from each scale's steering feature.
    pub sfseg_logits: Vec<Tensor>,
    /// Road logits decoded from the final steering feature, `[N,1,H,W]`.
    pub final_sfseg_logits: Tensor,
    /// Steering angles; `None` for source-kind inputs.
    pub steer: Option<SteerOutputs>,
}

/// Initial two-task prediction at one scale. Input is the backbone feature,
/// concatenated with both tasks' propagated features when present.
struct InitialBlock {
    scale_index: usize,
    expects_propagated: bool,
    seg_trunk: ConvBnRelu,
    seg_out: Conv2d,
    steer_trunk: ConvBnRelu,
    steer_out: Conv2d,
}

impl InitialBlock {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        scale_index: usize,
        backbone_ch: usize,
        width: usize,
    ) -> Result<Self> {
        let expects_propagated = scale_index < 3;
        let in_ch = backbone_ch + if expects_propagated { 2 * width } else { 0 };
        let seg_trunk =
            ConvBnRelu::new(store, rng, &format!("{name}.seg_trunk"), in_ch, width, (3, 3), (1, 1), (1, 1))?;
        let seg_out =
            Conv2d::new(store, rng, &format!("{name}.seg_out"), width, SEG_CHANNELS, (1, 1), (1, 1), (0, 0), true)?;
        let steer_trunk =
            ConvBnRelu::new(store, rng, &format!("{name}.steer_trunk"), in_ch, width, (3, 3), (1, 1), (1, 1))?;
        let steer_out = Conv2d::new(
            store,
            rng,
            &format!("{name}.steer_out"),
            width,
            STEER_FEATURE_CHANNELS,
            (1, 1),
            (1, 1),
            (0, 0),
            true,
        )?;
        Ok(Self { scale_index, expects_propagated, seg_trunk, seg_out, steer_trunk, steer_out })
    }

    fn forward(
        &self,
        b: &Binding<'_>,
        backbone_feature: &Tensor,
        propagated: Option<(&Tensor, &Tensor)>,
    ) -> Result<InitialPrediction> {
        if self.expects_propagated != propagated.is_some() {
            return Err(Error::contract(
                "initial_task_prediction",
                format!(
                    "scale {} {} propagated features",
                    self.scale_index,
                    if self.expects_propagated { "requires" } else { "must not receive" }
                ),
            ));
        }
        let input = match propagated {
            Some((seg_prop, steer_prop)) => {
                let (bs, ss, ts) =
                    (backbone_feature.shape(), seg_prop.shape(), steer_prop.shape());
                if bs[2..] != ss[2..] || bs[2..] != ts[2..] {
                    return Err(Error::shape(
                        "initial_task_prediction",
                        format!(
                            "propagated sizes {:?}/{:?} do not match backbone {:?}",
                            &ss[2..],
                            &ts[2..],
                            &bs[2..]
                        ),
                    ));
                }
                Tensor::concat_channels(&[backbone_feature, seg_prop, steer_prop])?
            }
            None => backbone_feature.clone(),
        };
        let seg_logits = self.seg_out.forward(b, &self.seg_trunk.forward(b, &input)?)?;
        let steer_feature = self.steer_out.forward(b, &self.steer_trunk.forward(b, &input)?)?;
        Ok(InitialPrediction { scale_index: self.scale_index, seg_logits, steer_feature })
    }
}

/// Converts one scale's initial predictions into task features at the next
/// finer scale (per-task convolution, then ×2 upsampling).
struct PropagationBlock {
    seg: ConvBnRelu,
    steer: ConvBnRelu,
}

impl PropagationBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize) -> Result<Self> {
        let seg =
            ConvBnRelu::new(store, rng, &format!("{name}.seg"), SEG_CHANNELS, width, (3, 3), (1, 1), (1, 1))?;
        let steer = ConvBnRelu::new(
            store,
            rng,
            &format!("{name}.steer"),
            STEER_FEATURE_CHANNELS,
            width,
            (3, 3),
            (1, 1),
            (1, 1),
        )?;
        Ok(Self { seg, steer })
    }

    fn forward(&self, b: &Binding<'_>, pred: &InitialPrediction) -> Result<(Tensor, Tensor)> {
        if pred.scale_index == 0 {
            return Err(Error::contract(
                "feature_propagation",
                "scale 0 is the finest scale; nothing to propagate to",
            ));
        }
        let (h, w) = (pred.seg_logits.shape()[2], pred.seg_logits.shape()[3]);
        let seg = self.seg.forward(b, &pred.seg_logits)?.bilinear_resize(h * 2, w * 2)?;
        let steer = self.steer.forward(b, &pred.steer_feature)?.bilinear_resize(h * 2, w * 2)?;
        Ok((seg, steer))
    }
}

/// Cross-task distillation at one scale: each task's feature is refined by
/// the other task's feature under a sigmoid spatial attention gate computed
/// from both initial predictions.
struct DistillationBlock {
    embed_seg: ConvBnRelu,
    embed_steer: ConvBnRelu,
    gate_seg: Conv2d,
    gate_steer: Conv2d,
}

impl DistillationBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize) -> Result<Self> {
        let both = SEG_CHANNELS + STEER_FEATURE_CHANNELS;
        let embed_seg =
            ConvBnRelu::new(store, rng, &format!("{name}.embed_seg"), SEG_CHANNELS, width, (3, 3), (1, 1), (1, 1))?;
        let embed_steer = ConvBnRelu::new(
            store,
            rng,
            &format!("{name}.embed_steer"),
            STEER_FEATURE_CHANNELS,
            width,
            (3, 3),
            (1, 1),
            (1, 1),
        )?;
        let gate_seg =
            Conv2d::new(store, rng, &format!("{name}.gate_seg"), both, 1, (1, 1), (1, 1), (0, 0), true)?;
        let gate_steer =
            Conv2d::new(store, rng, &format!("{name}.gate_steer"), both, 1, (1, 1), (1, 1), (0, 0), true)?;
        Ok(Self { embed_seg, embed_steer, gate_seg, gate_steer })
    }

    /// Returns `(distilled_seg, distilled_steer)`, both `width`-channel maps
    /// at the prediction's scale.
    fn forward(&self, b: &Binding<'_>, pred: &InitialPrediction) -> Result<(Tensor, Tensor)> {
        let e_seg = self.embed_seg.forward(b, &pred.seg_logits)?;
        let e_steer = self.embed_steer.forward(b, &pred.steer_feature)?;
        let joint = Tensor::concat_channels(&[&pred.seg_logits, &pred.steer_feature])?;
        let a_seg = self.gate_seg.forward(b, &joint)?.sigmoid();
        let a_steer = self.gate_steer.forward(b, &joint)?.sigmoid();
        let d_seg = e_seg.add(&e_steer.mul_gate(&a_seg)?)?;
        let d_steer = e_steer.add(&e_seg.mul_gate(&a_steer)?)?;
        Ok((d_seg, d_steer))
    }
}

/// Fuses the four distilled per-scale features of one task into the final
/// full-resolution output map.
struct AggregationBlock {
    fuse: ConvBnRelu,
    project: Conv2d,
}

impl AggregationBlock {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        out_ch: usize,
    ) -> Result<Self> {
        let fuse =
            ConvBnRelu::new(store, rng, &format!("{name}.fuse"), 4 * width, width, (3, 3), (1, 1), (1, 1))?;
        let project =
            Conv2d::new(store, rng, &format!("{name}.project"), width, out_ch, (1, 1), (1, 1), (0, 0), true)?;
        Ok(Self { fuse, project })
    }

    fn forward(&self, b: &Binding<'_>, features: &[Tensor], out_size: (usize, usize)) -> Result<Tensor> {
        if features.len() != 4 {
            return Err(Error::contract(
                "feature_aggregation",
                format!("need 4 per-scale features, got {}", features.len()),
            ));
        }
        let (h0, w0) = (features[0].shape()[2], features[0].shape()[3]);
        let mut up = vec![features[0].clone()];
        for f in &features[1..] {
            up.push(f.bilinear_resize(h0, w0)?);
        }
        let refs: Vec<&Tensor> = up.iter().collect();
        let fused = self.fuse.forward(b, &Tensor::concat_channels(&refs)?)?;
        let projected = self.project.forward(b, &fused)?;
        projected.bilinear_resize(out_size.0, out_size.1)
    }
}

pub struct Model {
    cfg: ModelConfig,
    backbone: Backbone,
    initial: Vec<InitialBlock>,
    propagation: Vec<PropagationBlock>, // index i propagates scale i+1 -> i
    distill: Vec<DistillationBlock>,
    agg_seg: AggregationBlock,
    agg_steer: AggregationBlock,
    aux_head: AuxSegHead,
    sfseg_scale: Vec<SteeringFeatureSegHead>,
    sfseg_final: SteeringFeatureSegHead,
    steer_full: SteeringHead,
    steer_deep: Vec<SteeringHead>,
}

impl Model {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        backbone_cfg: BackboneConfig,
        cfg: ModelConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(store, rng, backbone_cfg)?;
        let ch = backbone.config().channels;
        let w = cfg.width;

        let mut initial = Vec::new();
        for i in 0..4 {
            initial.push(InitialBlock::new(store, rng, &format!("initial{i}"), i, ch[i], w)?);
        }
        let mut propagation = Vec::new();
        for i in 0..3 {
            propagation.push(PropagationBlock::new(store, rng, &format!("prop{}to{}", i + 1, i), w)?);
        }
        let mut distill = Vec::new();
        for i in 0..4 {
            distill.push(DistillationBlock::new(store, rng, &format!("distill{i}"), w)?);
        }
        let agg_seg = AggregationBlock::new(store, rng, "agg_seg", w, SEG_CHANNELS)?;
        let agg_steer = AggregationBlock::new(store, rng, "agg_steer", w, STEER_FEATURE_CHANNELS)?;
        let aux_head = AuxSegHead::new(store, rng, "aux_head", &ch, w)?;

        let mut sfseg_scale = Vec::new();
        for i in 0..4 {
            sfseg_scale.push(SteeringFeatureSegHead::new(store, rng, &format!("sfseg{i}"))?);
        }
        let sfseg_final = SteeringFeatureSegHead::new(store, rng, "sfseg_final")?;

        let res = cfg.target_resolution;
        let spec_for = |tag: ScaleTag| -> Result<SteeringHeadSpec> {
            let (h, w) = tag.feature_size(res);
            SteeringHeadSpec::for_feature(tag, h, w)
        };
        let steer_full = SteeringHead::new(
            store,
            rng,
            "steer_full",
            spec_for(ScaleTag::Full)?,
            cfg.steer_conv_width,
        )?;
        let mut steer_deep = Vec::new();
        for (i, tag) in [ScaleTag::S4, ScaleTag::S8, ScaleTag::S16, ScaleTag::S32]
            .into_iter()
            .enumerate()
        {
            steer_deep.push(SteeringHead::new(
                store,
                rng,
                &format!("steer_deep{i}"),
                spec_for(tag)?,
                cfg.steer_conv_width,
            )?);
        }

        Ok(Self {
            cfg,
            backbone,
            initial,
            propagation,
            distill,
            agg_seg,
            agg_steer,
            aux_head,
            sfseg_scale,
            sfseg_final,
            steer_full,
            steer_deep,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Per-channel input normalization: `(x - mean) / std`.
    pub fn normalize_image(&self, image: &ArrayDyn) -> Result<ArrayDyn> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("normalize_image", format!("want [N,3,H,W], got {s:?}")));
        }
        let mut out = image.clone();
        let mut view = out.view_mut().into_dimensionality::<ndarray::Ix4>().expect("4d");
        for c in 0..3 {
            let (m, sd) = (self.cfg.norm_mean[c], self.cfg.norm_std[c]);
            view.index_axis_mut(ndarray::Axis(1), c).mapv_inplace(|v| (v - m) / sd);
        }
        Ok(out)
    }

    /// Full forward pass. `image` is a raw `[N,3,H,W]` array in `[0,1]`;
    /// normalization happens inside. Steering angles are produced only for
    /// `DatasetKind::Target`, whose inputs must match the configured target
    /// resolution.
    pub fn forward(&self, b: &Binding<'_>, image: &ArrayD<f64>, kind: DatasetKind) -> Result<ModelOutputs> {
        let s = image.shape().to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("model_forward", format!("want [N,3,H,W], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        if kind == DatasetKind::Target && (h, w) != self.cfg.target_resolution {
            return Err(Error::contract(
                "model_forward",
                format!(
                    "target inputs must be {}x{}, got {h}x{w}",
                    self.cfg.target_resolution.0, self.cfg.target_resolution.1
                ),
            ));
        }
        let ximg = b.tape().constant(self.normalize_image(image)?);
        let pyramid = self.backbone.extract_pyramid(b, &ximg)?;

        // coarse-to-fine initial predictions with propagated task features
        let mut initial: Vec<Option<InitialPrediction>> = (0..4).map(|_| None).collect();
        let coarsest = self.initial[3].forward(b, &pyramid.levels[3], None)?;
        initial[3] = Some(coarsest);
        for i in (0..3).rev() {
            let (seg_prop, steer_prop) = self.propagation[i]
                .forward(b, initial[i + 1].as_ref().expect("computed"))?;
            let pred =
                self.initial[i].forward(b, &pyramid.levels[i], Some((&seg_prop, &steer_prop)))?;
            initial[i] = Some(pred);
        }
        let initial: Vec<InitialPrediction> =
            initial.into_iter().map(|p| p.expect("all scales computed")).collect();

        let mut dist_seg = Vec::new();
        let mut dist_steer = Vec::new();
        for (i, pred) in initial.iter().enumerate() {
            let (ds, dt) = self.distill[i].forward(b, pred)?;
            dist_seg.push(ds);
            dist_steer.push(dt);
        }

        let primary_seg_logits = self.agg_seg.forward(b, &dist_seg, (h, w))?;
        let final_steer_feature = self.agg_steer.forward(b, &dist_steer, (h, w))?;
        let aux_seg_logits = self.aux_head.forward(b, &pyramid.levels, (h, w))?;

        let mut sfseg_logits = Vec::new();
        for (i, pred) in initial.iter().enumerate() {
            sfseg_logits.push(self.sfseg_scale[i].forward(b, &pred.steer_feature)?);
        }
        let final_sfseg_logits = self.sfseg_final.forward(b, &final_steer_feature)?;

        let steer = if kind == DatasetKind::Target {
            let final_angle = self.steer_full.forward(b, &final_steer_feature)?;
            let mut deep_angles = Vec::new();
            for (i, head) in self.steer_deep.iter().enumerate() {
                deep_angles.push(head.forward(b, &initial[i].steer_feature)?);
            }
            Some(SteerOutputs { final_angle, deep_angles })
        } else {
            None
        };

        Ok(ModelOutputs {
            primary_seg_logits,
            aux_seg_logits,
            final_steer_feature,
            initial,
            sfseg_logits,
            final_sfseg_logits,
            steer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::rng;
    use crate::tensor::Tape;
    use ndarray::IxDyn;
    use rand::Rng;

    fn tiny_setup(target: (usize, usize)) -> (ParamStore, Model) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(11, "init", 0);
        let cfg = ModelConfig {
            width: 4,
            steer_conv_width: 4,
            target_resolution: target,
            ..ModelConfig::default()
        };
        let model =
            Model::new(&mut store, &mut r, BackboneConfig::reference_tiny(4), cfg).unwrap();
        (store, model)
    }

    fn rand_image(shape: &[usize], seed: u64) -> ArrayDyn {
        let mut r = rng::stream(seed, "image", 0);
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| r.gen_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn source_forward_shapes_close() {
        let (store, model) = tiny_setup((64, 96));
        let tape = Tape::new();
        let b = Binding::new(&store, &tape, Mode::Eval);
        let img = rand_image(&[2, 3, 64, 64], 1);
        let out = model.forward(&b, &img, DatasetKind::Source).unwrap();

        assert_eq!(out.primary_seg_logits.shape(), &[2, 1, 64, 64]);
        assert_eq!(out.aux_seg_logits.shape(), &[2, 1, 64, 64]);
        assert_eq!(out.final_steer_feature.shape(), &[2, 4, 64, 64]);
        assert_eq!(out.final_sfseg_logits.shape(), &[2, 1, 64, 64]);
        assert!(out.steer.is_none());

        let expect = [(16, 16), (8, 8), (4, 4), (2, 2)];
        for (i, pred) in out.initial.iter().enumerate() {
            assert_eq!(pred.scale_index, i);
            let (h, w) = expect[i];
            assert_eq!(pred.seg_logits.shape(), &[2, 1, h, w]);
            assert_eq!(pred.steer_feature.shape(), &[2, 4, h, w]);
            assert_eq!(out.sfseg_logits[i].shape(), &[2, 1, h, w]);
        }
    }

    #[test]
    fn target_forward_produces_steering_angles() {
        let (store, model) = tiny_setup((64, 96));
        let tape = Tape::new();
        let b = Binding::new(&store, &tape, Mode::Eval);
        let img = rand_image(&[1, 3, 64, 96], 2);
        let out = model.forward(&b, &img, DatasetKind::Target).unwrap();
        let steer = out.steer.expect("target pass populates steering");
        assert_eq!(steer.final_angle.shape(), &[1]);
        assert_eq!(steer.deep_angles.len(), 4);
        for a in &steer.deep_angles {
            assert_eq!(a.shape(), &[1]);
            assert!(a.value()[[0]].is_finite());
        }
    }

    #[test]
    fn target_kind_rejects_wrong_resolution() {
        let (store, model) = tiny_setup((64, 96));
        let tape = Tape::new();
        let b = Binding::new(&store, &tape, Mode::Eval);
        let img = rand_image(&[1, 3, 64, 64], 3);
        let err = model.forward(&b, &img, DatasetKind::Target).unwrap_err();
        assert!(err.to_string().contains("64x96"));
    }

    #[test]
    fn forward_is_deterministic() {
        let (store, model) = tiny_setup((64, 96));
        let img = rand_image(&[1, 3, 64, 64], 4);
        let run = || {
            let tape = Tape::new();
            let b = Binding::new(&store, &tape, Mode::Eval);
            model.forward(&b, &img, DatasetKind::Source).unwrap().primary_seg_logits.value()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn steering_branch_feeds_segmentation_output() {
        // cross-task flow: perturbing a steering-side parameter changes the
        // primary segmentation output (through the distillation gates).
        let (mut store, model) = tiny_setup((64, 96));
        let img = rand_image(&[1, 3, 64, 64], 5);
        let run = |store: &ParamStore| {
            let tape = Tape::new();
            let b = Binding::new(store, &tape, Mode::Eval);
            model.forward(&b, &img, DatasetKind::Source).unwrap().primary_seg_logits.value()
        };
        let before = run(&store);
        let mut wt = store.param("initial1.steer_out.bias").unwrap().clone();
        wt.mapv_inplace(|v| v + 0.5);
        store.set_param("initial1.steer_out.bias", wt).unwrap();
        let after = run(&store);
        assert_ne!(before, after);
    }

    #[test]
    fn distillation_depends_on_both_tasks() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(12, "init", 0);
        let block = DistillationBlock::new(&mut store, &mut r, "d", 4).unwrap();
        let tape = Tape::new();
        let b = Binding::new(&store, &tape, Mode::Eval);
        let seg = tape.var(rand_image(&[1, 1, 6, 6], 6));
        let steer = tape.var(rand_image(&[1, 4, 6, 6], 7));
        let zero_steer = tape.var(ArrayD::zeros(IxDyn(&[1, 4, 6, 6])));
        let pred = InitialPrediction { scale_index: 1, seg_logits: seg.clone(), steer_feature: steer };
        let pred_zeroed =
            InitialPrediction { scale_index: 1, seg_logits: seg, steer_feature: zero_steer };
        let (d_seg, _) = block.forward(&b, &pred).unwrap();
        let (d_seg_zeroed, _) = block.forward(&b, &pred_zeroed).unwrap();
        assert_ne!(d_seg.value(), d_seg_zeroed.value());
    }

    #[test]
    fn propagation_rejects_finest_scale() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(13, "init", 0);
        let block = PropagationBlock::new(&mut store, &mut r, "p", 4).unwrap();
        let tape = Tape::new();
        let b = Binding::new(&store, &tape, Mode::Eval);
        let pred = InitialPrediction {
            scale_index: 0,
            seg_logits: tape.var(ArrayD::zeros(IxDyn(&[1, 1, 4, 4]))),
            steer_feature: tape.var(ArrayD::zeros(IxDyn(&[1, 4, 4, 4]))),
        };
        assert!(block.forward(&b, &pred).is_err());
    }

    #[test]
    fn propagation_doubles_spatial_size() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(14, "init", 0);
        let block = PropagationBlock::new(&mut store, &mut r, "p", 4).unwrap();
        let tape = Tape::new();
        let b = Binding::new(&store, &tape, Mode::Eval);
        let pred = InitialPrediction {
            scale_index: 2,
            seg_logits: tape.var(ArrayD::zeros(IxDyn(&[1, 1, 10, 38]))),
            steer_feature: tape.var(ArrayD::zeros(IxDyn(&[1, 4, 10, 38]))),
        };
        let (seg, steer) = block.forward(&b, &pred).unwrap();
        assert_eq!(&seg.shape()[2..], &[20, 76]);
        assert_eq!(&steer.shape()[2..], &[20, 76]);
        assert_eq!(seg.shape()[1], 4);
        assert_eq!(steer.shape()[1], 4);
    }

    #[test]
    fn steering_angle_reacts_to_input() {
        // finite-difference sanity check: the steering output must depend
        // on the image content.
        let (store, model) = tiny_setup((64, 96));
        let img = rand_image(&[1, 3, 64, 96], 8);
        let angle = |im: &ArrayDyn| {
            let tape = Tape::new();
            let b = Binding::new(&store, &tape, Mode::Eval);
            let out = model.forward(&b, im, DatasetKind::Target).unwrap();
            out.steer.unwrap().final_angle.value()[[0]]
        };
        let base = angle(&img);
        let mut bumped = img.clone();
        // perturb a small patch; a single pixel can fall in a dead ReLU region
        for dy in 0..8 {
            for dx in 0..8 {
                bumped[[0, 0, 16 + dy, 40 + dx]] += 0.25;
            }
        }
        assert_ne!(base, angle(&bumped));
    }
}
