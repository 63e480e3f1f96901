//! Figure-style rendering: signed maps composited over an image in red
//! (positive) and blue (negative), and simple horizontal panels.

use ndarray::{ArrayD, Axis, IxDyn};

use crate::data::imgproc::resize_bilinear;
use crate::error::{Error, Result};
use crate::tensor::ArrayDyn;

/// Composite a signed map over an `[3,H,W]` image. The map is normalized by
/// its own max |v|; red alpha follows the positive part, blue the negative,
/// both at 50% strength. An all-zero map leaves the image untouched.
pub fn overlay_signed_map(image: &ArrayDyn, map: &ArrayDyn) -> Result<ArrayDyn> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("overlay", format!("image must be [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let m = squeeze_map(map)?;
    let m = if m.shape() == [h, w] {
        m
    } else {
        let lifted = m.insert_axis(Axis(0));
        resize_bilinear(&lifted, h, w)?.index_axis(Axis(0), 0).to_owned().into_dyn()
    };

    let norm = m.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    if norm == 0.0 {
        return Ok(image.clone());
    }
    let mut out = ArrayD::zeros(IxDyn(&[3, h, w]));
    for y in 0..h {
        for x in 0..w {
            let v = m[[y, x]] / norm;
            let (a_r, a_b) = (0.5 * v.max(0.0), 0.5 * (-v).max(0.0));
            let keep = 1.0 - a_r - a_b;
            out[[0, y, x]] = (image[[0, y, x]] * keep + a_r).clamp(0.0, 1.0);
            out[[1, y, x]] = (image[[1, y, x]] * keep).clamp(0.0, 1.0);
            out[[2, y, x]] = (image[[2, y, x]] * keep + a_b).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

fn squeeze_map(map: &ArrayDyn) -> Result<ArrayD<f64>> {
    match map.ndim() {
        2 => Ok(map.clone()),
        3 if map.shape()[0] == 1 => Ok(map.index_axis(Axis(0), 0).to_owned().into_dyn()),
        4 if map.shape()[0] == 1 && map.shape()[1] == 1 => {
            Ok(map.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned().into_dyn())
        }
        _ => Err(Error::shape("overlay", format!("map must be [H,W]-like, got {:?}", map.shape()))),
    }
}

/// Concatenate `[3,H,W]` images left to right; heights must agree.
pub fn hconcat(panels: &[ArrayDyn]) -> Result<ArrayDyn> {
    if panels.is_empty() {
        return Err(Error::contract("hconcat", "no panels"));
    }
    let h = panels[0].shape()[1];
    for p in panels {
        let s = p.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != h {
            return Err(Error::shape("hconcat", format!("panel {s:?} does not match height {h}")));
        }
    }
    let views: Vec<_> = panels.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(2), &views)
        .map(|a| a.into_dyn())
        .map_err(|_| Error::shape("hconcat", "concatenation failed"))
}

/// `[original | channel 0 .. channel C-1]`, each channel overlaid with its
/// own normalization.
pub fn steer_feature_panel(image: &ArrayDyn, feature: &ArrayDyn) -> Result<ArrayDyn> {
    let f = match feature.ndim() {
        3 => feature.clone(),
        4 if feature.shape()[0] == 1 => feature.index_axis(Axis(0), 0).to_owned().into_dyn(),
        _ => {
            return Err(Error::shape(
                "steer_feature_panel",
                format!("feature must be [C,H,W], got {:?}", feature.shape()),
            ))
        }
    };
    let mut panels = vec![image.clone()];
    for c in 0..f.shape()[0] {
        let map = f.index_axis(Axis(0), c).to_owned().into_dyn();
        panels.push(overlay_signed_map(image, &map)?);
    }
    hconcat(&panels)
}

/// `[original | ground truth | prediction]`. Masks and probabilities are
/// recentered to [-1,1] so road shows red and background blue; a missing
/// ground truth renders as the plain image.
pub fn segmentation_panel(
    image: &ArrayDyn,
    gt_mask: Option<&ArrayDyn>,
    road_probs: &ArrayDyn,
) -> Result<ArrayDyn> {
    let gt_panel = match gt_mask {
        Some(m) => overlay_signed_map(image, &m.mapv(|v| 2.0 * v - 1.0))?,
        None => image.clone(),
    };
    let pred_panel = overlay_signed_map(image, &road_probs.mapv(|v| 2.0 * v - 1.0))?;
    hconcat(&[image.clone(), gt_panel, pred_panel])
}
