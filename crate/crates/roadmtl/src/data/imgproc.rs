//! Image array I/O and pixel-level operations. Images are `[3,H,W]` f64
//! arrays in `[0,1]`; masks are `[1,H,W]` arrays holding exactly 0 or 1.
//! On disk both are PNG: RGB for images, 8-bit grayscale (0 = non-road,
//! 255 = road) for masks.

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{ArrayD, Axis, IxDyn};

use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize_plane, ArrayDyn};

fn io_err(ctx: &str, path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Data(format!("{ctx} {}: {e}", path.display()))
}

/// PNG → `[3,H,W]` in `[0,1]`.
pub fn load_image_rgb(path: &Path) -> Result<ArrayDyn> {
    let img = image::open(path).map_err(|e| io_err("cannot read image", path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ArrayD::zeros(IxDyn(&[3, h, w]));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// `[3,H,W]` in `[0,1]` → PNG (values clamped and rounded).
pub fn save_image_rgb(path: &Path, image: &ArrayDyn) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("save_image_rgb", format!("want [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = buf.get_pixel_mut(x as u32, y as u32);
            for c in 0..3 {
                px.0[c] = (image[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    buf.save(path).map_err(|e| io_err("cannot write image", path, e))
}

/// Grayscale PNG → `[1,H,W]` binary mask (pixel > 127 is road).
pub fn load_mask(path: &Path) -> Result<ArrayDyn> {
    let img = image::open(path).map_err(|e| io_err("cannot read mask", path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ArrayD::zeros(IxDyn(&[1, h, w]));
    for (x, y, px) in img.enumerate_pixels() {
        out[[0, y as usize, x as usize]] = if px.0[0] > 127 { 1.0 } else { 0.0 };
    }
    Ok(out)
}

/// `[1,H,W]` binary mask → grayscale PNG with values 0/255.
pub fn save_mask(path: &Path, mask: &ArrayDyn) -> Result<()> {
    let s = mask.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::shape("save_mask", format!("want [1,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.get_pixel_mut(x as u32, y as u32).0[0] =
                if mask[[0, y, x]] > 0.5 { 255 } else { 0 };
        }
    }
    buf.save(path).map_err(|e| io_err("cannot write mask", path, e))
}

/// Grayscale PNG of per-pixel class ids → `Array2<i32>`.
pub fn load_label_map(path: &Path) -> Result<ndarray::Array2<i32>> {
    let img = image::open(path).map_err(|e| io_err("cannot read label map", path, e))?;
    let img = match img {
        image::DynamicImage::ImageLuma8(l) => l,
        other => {
            return Err(Error::Data(format!(
                "label map {} must be 8-bit grayscale, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ndarray::Array2::zeros((h, w));
    for (x, y, px) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = px.0[0] as i32;
    }
    Ok(out)
}

/// Channel-wise bilinear resize of a `[C,H,W]` array.
pub fn resize_bilinear(image: &ArrayDyn, out_h: usize, out_w: usize) -> Result<ArrayDyn> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("resize_bilinear", format!("want [C,H,W], got {s:?}")));
    }
    let mut out = ArrayD::zeros(IxDyn(&[s[0], out_h, out_w]));
    for c in 0..s[0] {
        let plane = image
            .index_axis(Axis(0), c)
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2d plane");
        out.index_axis_mut(Axis(0), c).assign(&bilinear_resize_plane(plane, out_h, out_w));
    }
    Ok(out)
}

/// Nearest-neighbour resize of a `[C,H,W]` array; keeps masks binary.
pub fn resize_nearest(image: &ArrayDyn, out_h: usize, out_w: usize) -> Result<ArrayDyn> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("resize_nearest", format!("want [C,H,W], got {s:?}")));
    }
    let (in_h, in_w) = (s[1], s[2]);
    let mut out = ArrayD::zeros(IxDyn(&[s[0], out_h, out_w]));
    let scale_y = in_h as f64 / out_h as f64;
    let scale_x = in_w as f64 / out_w as f64;
    for c in 0..s[0] {
        for y in 0..out_h {
            let sy = (((y as f64 + 0.5) * scale_y - 0.5).round().max(0.0) as usize).min(in_h - 1);
            for x in 0..out_w {
                let sx =
                    (((x as f64 + 0.5) * scale_x - 0.5).round().max(0.0) as usize).min(in_w - 1);
                out[[c, y, x]] = image[[c, sy, sx]];
            }
        }
    }
    Ok(out)
}

/// Mirror a `[C,H,W]` array along its width axis.
pub fn hflip(image: &ArrayDyn) -> ArrayDyn {
    let mut out = image.clone();
    out.invert_axis(Axis(2));
    out
}

/// Separable Gaussian blur with radius `⌈3σ⌉`; `sigma <= 0` is the identity.
pub fn gaussian_blur(image: &ArrayDyn, sigma: f64) -> Result<ArrayDyn> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("gaussian_blur", format!("want [C,H,W], got {s:?}")));
    }
    if sigma <= 0.0 {
        return Ok(image.clone());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let (c_n, h, w) = (s[0], s[1], s[2]);
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = ArrayD::zeros(IxDyn(s));
    for c in 0..c_n {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    acc += kv * image[[c, y, clamp(x as isize + ki as isize - radius, w)]];
                }
                tmp[[c, y, x]] = acc;
            }
        }
    }
    let mut out = ArrayD::zeros(IxDyn(s));
    for c in 0..c_n {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    acc += kv * tmp[[c, clamp(y as isize + ki as isize - radius, h), x]];
                }
                out[[c, y, x]] = acc;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn label_maps_roundtrip_ids_and_reject_color() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("labels.png");
        let mut buf = GrayImage::new(3, 2);
        for (i, px) in buf.pixels_mut().enumerate() {
            px.0[0] = (i * 7 % 256) as u8;
        }
        buf.save(&path).unwrap();
        let ids = load_label_map(&path).unwrap();
        assert_eq!(ids.dim(), (2, 3));
        assert_eq!(ids[[0, 0]], 0);
        assert_eq!(ids[[0, 1]], 7);
        assert_eq!(ids[[1, 2]], 35);

        let rgb_path = dir.path().join("color.png");
        RgbImage::new(3, 2).save(&rgb_path).unwrap();
        let err = load_label_map(&rgb_path).unwrap_err();
        assert_eq!(err.code(), "E_DATA");
    }

    fn checker(h: usize, w: usize) -> ArrayDyn {
        let mut a = ArrayD::zeros(IxDyn(&[3, h, w]));
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    a[[c, y, x]] = (((x + y + c) % 2) as f64 + 0.2) / 1.4;
                }
            }
        }
        a
    }

    #[test]
    fn image_roundtrip_is_exact_on_8bit_grid() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.png");
        // values on the exact 8-bit grid survive the roundtrip bit-for-bit
        let mut img = ArrayD::zeros(IxDyn(&[3, 5, 7]));
        img.iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 13) % 256) as f64 / 255.0);
        save_image_rgb(&path, &img).unwrap();
        let back = load_image_rgb(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_roundtrip_and_binarization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mut mask = ArrayD::zeros(IxDyn(&[1, 4, 4]));
        mask[[0, 1, 2]] = 1.0;
        mask[[0, 3, 0]] = 1.0;
        save_mask(&path, &mask).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);

        // grays binarize at >127
        let gray = GrayImage::from_fn(2, 1, |x, _| image::Luma([if x == 0 { 127 } else { 128 }]));
        let gpath = dir.path().join("gray.png");
        gray.save(&gpath).unwrap();
        let loaded = load_mask(&gpath).unwrap();
        assert_eq!(loaded[[0, 0, 0]], 0.0);
        assert_eq!(loaded[[0, 0, 1]], 1.0);
    }

    #[test]
    fn nearest_resize_keeps_masks_binary() {
        let mut mask = ArrayD::zeros(IxDyn(&[1, 6, 6]));
        for y in 0..6 {
            for x in 0..3 {
                mask[[0, y, x]] = 1.0;
            }
        }
        let up = resize_nearest(&mask, 9, 15).unwrap();
        assert!(up.iter().all(|&v| v == 0.0 || v == 1.0));
        let down = resize_nearest(&mask, 3, 2).unwrap();
        assert!(down.iter().all(|&v| v == 0.0 || v == 1.0));
        // left half stays road after resize
        assert_eq!(down[[0, 0, 0]], 1.0);
        assert_eq!(down[[0, 0, 1]], 0.0);
    }

    #[test]
    fn hflip_is_involutive_and_mirrors() {
        let img = checker(3, 4);
        let flipped = hflip(&img);
        assert_eq!(flipped[[0, 0, 0]], img[[0, 0, 3]]);
        assert_eq!(hflip(&flipped), img);
    }

    #[test]
    fn blur_preserves_mean_and_zero_sigma_is_identity() {
        let img = checker(12, 12);
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
        let blurred = gaussian_blur(&img, 0.8).unwrap();
        let mean = |a: &ArrayDyn| a.sum() / a.len() as f64;
        assert!((mean(&blurred) - mean(&img)).abs() < 1e-2);
        // blur reduces variance on a checkerboard
        let var = |a: &ArrayDyn| {
            let m = mean(a);
            a.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / a.len() as f64
        };
        assert!(var(&blurred) < var(&img));
    }

    #[test]
    fn bilinear_resize_identity() {
        let img = checker(8, 8);
        assert_eq!(resize_bilinear(&img, 8, 8).unwrap(), img);
    }
}
