//! Source-dataset preprocessing (drivable-class merge, road-fraction filter,
//! top crop, resize with jitter) and train-time augmentations.

use ndarray::{Array2, ArrayD, IxDyn, Slice};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::imgproc::{gaussian_blur, hflip, resize_bilinear, resize_nearest};
use crate::error::{Error, Result};
use crate::tensor::ArrayDyn;

/// Fraction of road pixels below which a source sample is dropped.
pub const MIN_ROAD_FRACTION: f64 = 0.05;

/// Labels whose union forms the binary road class. The id values follow the
/// dataset's own label map and are carried in the run configuration.
pub fn merge_road_classes(multiclass: &Array2<i32>, drivable_ids: &[i32]) -> Result<ArrayDyn> {
    if let Some(&bad) = multiclass.iter().find(|&&l| l < 0) {
        return Err(Error::Data(format!("unknown negative label {bad} in multiclass mask")));
    }
    let (h, w) = multiclass.dim();
    let mut out = ArrayD::zeros(IxDyn(&[1, h, w]));
    for y in 0..h {
        for x in 0..w {
            if drivable_ids.contains(&multiclass[[y, x]]) {
                out[[0, y, x]] = 1.0;
            }
        }
    }
    Ok(out)
}

pub fn road_fraction(mask: &ArrayDyn) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.iter().filter(|&&v| v != 0.0).count() as f64 / mask.len() as f64
}

/// Keep iff the road fraction is at least the 5% threshold ("less than" is
/// a strict drop).
pub fn keep_by_road_fraction(mask: &ArrayDyn) -> bool {
    road_fraction(mask) >= MIN_ROAD_FRACTION
}

/// Drop the top quarter of rows from an image/mask pair: rows
/// `floor(0.25·H)..H` are retained in both.
pub fn crop_top_quarter(image: &ArrayDyn, mask: &ArrayDyn) -> Result<(ArrayDyn, ArrayDyn)> {
    let (is_, ms) = (image.shape(), mask.shape());
    if is_.len() != 3 || ms.len() != 3 || is_[1] != ms[1] || is_[2] != ms[2] {
        return Err(Error::shape(
            "crop_top_quarter",
            format!("image {is_:?} and mask {ms:?} must be [C,H,W] with equal H,W"),
        ));
    }
    let h = is_[1];
    if h < 4 {
        return Err(Error::contract("crop_top_quarter", format!("height {h} < 4")));
    }
    let start = h / 4;
    let crop = |a: &ArrayDyn| {
        a.slice_axis(ndarray::Axis(1), Slice::from(start..h)).to_owned().into_dyn()
    };
    Ok((crop(image), crop(mask)))
}

/// Scale to the target size with multiplicative jitter, then randomly crop
/// back to exactly the target. `jitter = None` disables the randomness
/// (plain resize). Image is interpolated bilinearly, the mask by nearest
/// neighbour, so masks stay binary.
pub fn resize_and_random_crop(
    image: &ArrayDyn,
    mask: &ArrayDyn,
    target: (usize, usize),
    jitter: Option<(f64, f64)>,
    rng: &mut ChaCha8Rng,
) -> Result<(ArrayDyn, ArrayDyn)> {
    let (th, tw) = target;
    let scale = match jitter {
        Some((lo, hi)) => {
            if !(0.0 < lo && lo <= hi) {
                return Err(Error::contract("resize_and_random_crop", "jitter bounds must satisfy 0 < lo <= hi"));
            }
            rng.gen_range(lo..=hi)
        }
        None => 1.0,
    };
    // never let the scaled size drop below the crop target
    let sh = ((th as f64 * scale).round() as usize).max(th);
    let sw = ((tw as f64 * scale).round() as usize).max(tw);
    let img = resize_bilinear(image, sh, sw)?;
    let msk = resize_nearest(mask, sh, sw)?;
    let oy = if sh > th { rng.gen_range(0..=(sh - th)) } else { 0 };
    let ox = if sw > tw { rng.gen_range(0..=(sw - tw)) } else { 0 };
    let crop = |a: &ArrayDyn| {
        a.slice_axis(ndarray::Axis(1), Slice::from(oy..oy + th))
            .slice_axis(ndarray::Axis(2), Slice::from(ox..ox + tw))
            .to_owned()
            .into_dyn()
    };
    Ok((crop(&img), crop(&msk)))
}

/// Horizontal flip with probability `p`; flipping a target sample also
/// negates its steering angle.
pub fn flip_augment(
    image: &ArrayDyn,
    angle: f64,
    rng: &mut ChaCha8Rng,
    p: f64,
) -> (ArrayDyn, f64) {
    if rng.gen_bool(p) {
        (hflip(image), -angle)
    } else {
        (image.clone(), angle)
    }
}

/// Mask-preserving flip for source pairs.
pub fn flip_augment_pair(
    image: &ArrayDyn,
    mask: &ArrayDyn,
    rng: &mut ChaCha8Rng,
    p: f64,
) -> (ArrayDyn, ArrayDyn) {
    if rng.gen_bool(p) {
        (hflip(image), hflip(mask))
    } else {
        (image.clone(), mask.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhotometricConfig {
    /// Brightness/contrast/saturation jitter half-range.
    pub jitter: f64,
    /// Gaussian blur sigma is drawn from `[0, max_blur_sigma]`.
    pub max_blur_sigma: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self { jitter: 0.2, max_blur_sigma: 1.0 }
    }
}

impl PhotometricConfig {
    pub fn disabled() -> Self {
        Self { jitter: 0.0, max_blur_sigma: 0.0 }
    }

    pub fn is_disabled(&self) -> bool {
        self.jitter == 0.0 && self.max_blur_sigma == 0.0
    }
}

/// Brightness/contrast/saturation jitter plus a small Gaussian blur; the
/// output is clamped back to `[0,1]`. A zero-strength config is an exact
/// identity.
pub fn photometric_augment(
    image: &ArrayDyn,
    cfg: &PhotometricConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ArrayDyn> {
    if cfg.is_disabled() {
        return Ok(image.clone());
    }
    let j = cfg.jitter;
    let brightness = rng.gen_range(-j..=j);
    let contrast = 1.0 + rng.gen_range(-j..=j);
    let saturation = 1.0 + rng.gen_range(-j..=j);
    let sigma = rng.gen_range(0.0..=cfg.max_blur_sigma);

    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("photometric_augment", format!("want [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = (out[[0, y, x]], out[[1, y, x]], out[[2, y, x]]);
            let gray = 0.299 * r + 0.587 * g + 0.114 * b;
            for (c, v) in [r, g, b].into_iter().enumerate() {
                let saturated = gray + (v - gray) * saturation;
                out[[c, y, x]] = ((saturated - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
            }
        }
    }
    let blurred = gaussian_blur(&out, sigma)?;
    Ok(blurred.mapv(|v| v.clamp(0.0, 1.0)))
}
