//! Training objectives: weighted road-segmentation cross entropy, steering
//! regression, least-squares adversarial generator loss, the primary/auxiliary
//! consistency ("memory") regulariser, deep-supervision sums, and the two
//! composite per-domain objectives.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelOutputs;
use crate::tensor::{ArrayDyn, Tensor};

/// Clamp applied to probabilities before logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Auxiliary segmentation head weight.
    pub lambda_aux: f64,
    /// Deep-supervision weight (applies to per-scale loss sums).
    pub lambda_deep: f64,
    /// Steering-feature segmentation weight.
    pub lambda_sfseg: f64,
    /// Steering-angle regression weight.
    pub lambda_steer: f64,
    /// Adversarial weight on the primary segmentation stream.
    pub lambda_adv_p: f64,
    /// Adversarial weight on the auxiliary segmentation stream.
    pub lambda_adv_a: f64,
    /// Memory-regularisation weight.
    pub lambda_mr: f64,
    /// Positive-class (road) weight inside the segmentation cross entropy.
    pub road_class_weight: f64,
    /// Memory regularisation activates strictly after this step.
    pub mr_start_step: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_aux: 0.5,
            lambda_deep: 1.0,
            lambda_sfseg: 0.3,
            lambda_steer: 0.5,
            lambda_adv_p: 0.001,
            lambda_adv_a: 0.0002,
            lambda_mr: 0.1,
            road_class_weight: 2.287,
            mr_start_step: 15000,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_aux", self.lambda_aux),
            ("lambda_deep", self.lambda_deep),
            ("lambda_sfseg", self.lambda_sfseg),
            ("lambda_steer", self.lambda_steer),
            ("lambda_adv_p", self.lambda_adv_p),
            ("lambda_adv_a", self.lambda_adv_a),
            ("lambda_mr", self.lambda_mr),
            ("road_class_weight", self.road_class_weight),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Whether the memory regulariser contributes at `step`.
    pub fn mr_active(&self, step: u64) -> bool {
        step > self.mr_start_step
    }
}

/// Source-domain loss components (all segmentation terms), plus the weighted
/// total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceLossBreakdown {
    pub seg_p: f64,
    pub seg_a: f64,
    pub deep_seg: f64,
    pub sfseg: f64,
    pub deep_sfseg: f64,
    pub total: f64,
}

impl SourceLossBreakdown {
    /// Weighted total from raw components.
    pub fn compose(
        seg_p: f64,
        seg_a: f64,
        deep_seg: f64,
        sfseg: f64,
        deep_sfseg: f64,
        w: &LossWeights,
    ) -> Self {
        let total = seg_p
            + w.lambda_aux * seg_a
            + w.lambda_deep * deep_seg
            + w.lambda_sfseg * (sfseg + w.lambda_deep * deep_sfseg);
        Self { seg_p, seg_a, deep_seg, sfseg, deep_sfseg, total }
    }
}

/// Target-domain loss components and the weighted total. `mr` is `None`
/// while the memory regulariser is gated off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetLossBreakdown {
    pub steer: f64,
    pub deep_steer: f64,
    pub adv_p: f64,
    pub adv_a: f64,
    pub mr: Option<f64>,
    pub total: f64,
}

impl TargetLossBreakdown {
    /// Weighted total from raw components; the `mr` term enters only when
    /// active at `step`.
    pub fn compose(
        steer: f64,
        deep_steer: f64,
        adv_p: f64,
        adv_a: f64,
        mr: f64,
        w: &LossWeights,
        step: u64,
    ) -> Self {
        let mut total = w.lambda_steer * (steer + w.lambda_deep * deep_steer)
            + w.lambda_adv_p * adv_p
            + w.lambda_adv_a * adv_a;
        let mr = if w.mr_active(step) {
            total += w.lambda_mr * mr;
            Some(mr)
        } else {
            None
        };
        Self { steer, deep_steer, adv_p, adv_a, mr, total }
    }
}

/// Mean binary cross entropy on logits with the road class up-weighted.
///
/// Per pixel: `−[w·t·ln σ(x) + (1−t)·ln(1−σ(x))]`, averaged over all pixels.
pub fn weighted_bce(seg_logits: &Tensor, target_mask: &ArrayDyn, road_weight: f64) -> Result<Tensor> {
    if target_mask.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Data("segmentation mask values must be 0 or 1".into()));
    }
    seg_logits.bce_with_logits(target_mask, road_weight)
}

/// Mean squared error of predicted vs ground-truth normalized angles.
pub fn steering_mse(pred_angles: &Tensor, gt_angles: &[f64]) -> Result<Tensor> {
    if pred_angles.shape() != [gt_angles.len()] {
        return Err(Error::shape(
            "steering_mse",
            format!("predictions {:?} vs {} ground-truth angles", pred_angles.shape(), gt_angles.len()),
        ));
    }
    let gt = ArrayD::from_shape_vec(IxDyn(&[gt_angles.len()]), gt_angles.to_vec())
        .expect("shape matches length");
    pred_angles.mse(&gt)
}

/// Least-squares generator loss `2 · mean((d − 1)²)` on a discriminator's
/// score map over target-domain segmentation.
pub fn adversarial_gen_loss(d_output: &Tensor) -> Tensor {
    d_output.add_scalar(-1.0).square().mean_all().scale(2.0)
}

/// Symmetric cross entropy between the per-pixel two-class distributions
/// `(p, 1−p)` of the primary and auxiliary road probabilities, averaged over
/// pixels. Minimised (up to the entropy floor) when the two heads agree.
pub fn memory_reg_loss(p_primary: &Tensor, p_aux: &Tensor) -> Result<Tensor> {
    if p_primary.shape() != p_aux.shape() {
        return Err(Error::shape(
            "memory_reg_loss",
            format!("primary {:?} vs auxiliary {:?}", p_primary.shape(), p_aux.shape()),
        ));
    }
    let qp = p_primary.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let qa = p_aux.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let one_minus = |t: &Tensor| t.scale(-1.0).add_scalar(1.0);
    // −[qa·ln qp + (1−qa)·ln(1−qp)]  +  the same with the roles swapped
    let ce = |from: &Tensor, to: &Tensor| -> Result<Tensor> {
        let pos = from.mul(&to.ln())?;
        let neg = one_minus(from).mul(&one_minus(to).ln())?;
        Ok(pos.add(&neg)?)
    };
    Ok(ce(&qa, &qp)?.add(&ce(&qp, &qa)?)?.mean_all().scale(-1.0))
}

/// Deep-supervision total: plain sum of the per-scale losses.
pub fn deep_supervision_sum(per_scale: &[Tensor]) -> Result<Tensor> {
    let mut iter = per_scale.iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::contract("deep_supervision_sum", "no per-scale losses"))?;
    let mut acc = first.clone();
    for t in iter {
        acc = acc.add(t)?;
    }
    Ok(acc)
}

/// Composite source-domain objective: primary + auxiliary + deep-supervised
/// segmentation, plus the steering-feature segmentation terms, all against
/// the same road mask. Returns the differentiable total and the logged
/// breakdown.
pub fn source_loss(
    outputs: &ModelOutputs,
    mask: &ArrayDyn,
    weights: &LossWeights,
) -> Result<(Tensor, SourceLossBreakdown)> {
    if mask.ndim() != 4 {
        return Err(Error::shape("source_loss", format!("mask must be [N,1,H,W], got {:?}", mask.shape())));
    }
    let (mh, mw) = (mask.shape()[2], mask.shape()[3]);
    let w = weights.road_class_weight;

    let seg_p = weighted_bce(&outputs.primary_seg_logits, mask, w)?;
    let seg_a = weighted_bce(&outputs.aux_seg_logits, mask, w)?;

    let mut deep_seg_terms = Vec::new();
    for pred in &outputs.initial {
        deep_seg_terms.push(weighted_bce(&pred.seg_logits.bilinear_resize(mh, mw)?, mask, w)?);
    }
    let deep_seg = deep_supervision_sum(&deep_seg_terms)?;

    let sfseg = weighted_bce(&outputs.final_sfseg_logits, mask, w)?;
    let mut deep_sfseg_terms = Vec::new();
    for logits in &outputs.sfseg_logits {
        deep_sfseg_terms.push(weighted_bce(&logits.bilinear_resize(mh, mw)?, mask, w)?);
    }
    let deep_sfseg = deep_supervision_sum(&deep_sfseg_terms)?;

    let breakdown = SourceLossBreakdown::compose(
        seg_p.scalar_value(),
        seg_a.scalar_value(),
        deep_seg.scalar_value(),
        sfseg.scalar_value(),
        deep_sfseg.scalar_value(),
        weights,
    );
    let total = seg_p
        .add(&seg_a.scale(weights.lambda_aux))?
        .add(&deep_seg.scale(weights.lambda_deep))?
        .add(&sfseg.add(&deep_sfseg.scale(weights.lambda_deep))?.scale(weights.lambda_sfseg))?;
    Ok((total, breakdown))
}

/// Composite target-domain objective: steering regression (final + deep),
/// the two adversarial generator terms, and the gated memory regulariser.
/// `steer_enabled=false` drops the steering terms (the transfer-learning
/// variant trains without them).
#[allow(clippy::too_many_arguments)]
pub fn target_loss(
    outputs: &ModelOutputs,
    gt_angles: &[f64],
    d_primary: &Tensor,
    d_aux: &Tensor,
    weights: &LossWeights,
    step: u64,
    steer_enabled: bool,
) -> Result<(Tensor, TargetLossBreakdown)> {
    let zero = d_primary.tape_scalar(0.0);
    let (steer, deep_steer) = if steer_enabled {
        let s = outputs
            .steer
            .as_ref()
            .ok_or_else(|| Error::contract("target_loss", "steering outputs missing on target batch"))?;
        if gt_angles.is_empty() {
            return Err(Error::contract("target_loss", "target batch has no ground-truth angles"));
        }
        let steer = steering_mse(&s.final_angle, gt_angles)?;
        let mut deep_terms = Vec::new();
        for a in &s.deep_angles {
            deep_terms.push(steering_mse(a, gt_angles)?);
        }
        (steer, deep_supervision_sum(&deep_terms)?)
    } else {
        (zero.clone(), zero.clone())
    };

    let adv_p = adversarial_gen_loss(d_primary);
    let adv_a = adversarial_gen_loss(d_aux);

    let p_p = outputs.primary_seg_logits.sigmoid();
    let p_a = outputs.aux_seg_logits.sigmoid();
    let mr = memory_reg_loss(&p_p, &p_a)?;

    let breakdown = TargetLossBreakdown::compose(
        steer.scalar_value(),
        deep_steer.scalar_value(),
        adv_p.scalar_value(),
        adv_a.scalar_value(),
        mr.scalar_value(),
        weights,
        step,
    );
    let mut total = steer
        .add(&deep_steer.scale(weights.lambda_deep))?
        .scale(weights.lambda_steer)
        .add(&adv_p.scale(weights.lambda_adv_p))?
        .add(&adv_a.scale(weights.lambda_adv_a))?;
    if weights.mr_active(step) {
        total = total.add(&mr.scale(weights.lambda_mr))?;
    }
    Ok((total, breakdown))
}
