//! Image decode, bilinear resize, normalization, and rotation
//! augmentation.
//!
//! Preprocessing maps any decodable image to a `[H, W, 3]` tensor with
//! channel values in `[−1, 1]`. Rotation operates on that normalized
//! tensor about the image center with bilinear sampling, filling
//! out-of-bounds samples with the normalized black value −1. Angles that
//! are exact multiples of 90° (180° for non-square images) take an
//! index-permutation path so the spec'd exact identities hold bit for bit.

use std::path::Path;

use super::DataError;
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_MAX_ROTATION_DEG: f64 = 15.0;

/// Decode an image file (PNG, JPEG, PPM, …) to RGB; grayscale inputs are
/// replicated across channels.
pub fn load_image(path: &Path) -> Result<image::RgbImage, DataError> {
    let img = image::open(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

/// Bilinear-resize to `height × width` and normalize `[0, 255]` bytes to
/// `[−1, 1]` via `v/255` then `(v − 0.5)/0.5`.
pub fn preprocess_image(img: &image::RgbImage, height: usize, width: usize) -> Tensor<f32> {
    let (w0, h0) = img.dimensions();
    let (w0, h0) = (w0 as usize, h0 as usize);
    let raw = img.as_raw();

    // source in [0,1]
    let to_unit = |v: u8| v as f32 / 255.0;

    let mut out = vec![0.0f32; height * width * 3];
    let scale_y = h0 as f32 / height as f32;
    let scale_x = w0 as f32 / width as f32;
    for r in 0..height {
        // half-pixel-center convention: identity when sizes match
        let sy = (r as f32 + 0.5) * scale_y - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        let y0i = (y0 as isize).clamp(0, h0 as isize - 1) as usize;
        let y1i = (y0 as isize + 1).clamp(0, h0 as isize - 1) as usize;
        for c in 0..width {
            let sx = (c as f32 + 0.5) * scale_x - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let x0i = (x0 as isize).clamp(0, w0 as isize - 1) as usize;
            let x1i = (x0 as isize + 1).clamp(0, w0 as isize - 1) as usize;
            for ch in 0..3 {
                let v00 = to_unit(raw[(y0i * w0 + x0i) * 3 + ch]);
                let v01 = to_unit(raw[(y0i * w0 + x1i) * 3 + ch]);
                let v10 = to_unit(raw[(y1i * w0 + x0i) * 3 + ch]);
                let v11 = to_unit(raw[(y1i * w0 + x1i) * 3 + ch]);
                let top = lerp(v00, v01, fx);
                let bottom = lerp(v10, v11, fx);
                let v = lerp(top, bottom, fy);
                out[(r * width + c) * 3 + ch] = (v - 0.5) / 0.5;
            }
        }
    }
    Tensor::new(vec![height, width, 3], out).expect("normalized values are finite")
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Rotate a normalized `[H, W, 3]` tensor about its center. Exact
/// index-permutation paths cover 0°/180° (and 90°/270° for square
/// images); everything else is bilinear with −1 fill.
pub fn rotate<S: Scalar>(image: &Tensor<S>, angle_deg: f64) -> Result<Tensor<S>, DataError> {
    let sh = image.shape();
    if sh.len() != 3 || sh[2] != 3 {
        return Err(DataError::Invalid(format!(
            "rotate expects [H, W, 3], got {sh:?}"
        )));
    }
    if !angle_deg.is_finite() {
        return Err(DataError::Invalid("rotation angle must be finite".into()));
    }
    let (h, w) = (sh[0], sh[1]);
    let norm = angle_deg.rem_euclid(360.0);

    if norm == 0.0 {
        return Ok(image.clone());
    }
    if norm == 180.0 {
        let iv = image.values();
        let mut out = vec![S::zero(); iv.len()];
        for r in 0..h {
            for c in 0..w {
                let src = ((h - 1 - r) * w + (w - 1 - c)) * 3;
                let dst = (r * w + c) * 3;
                out[dst..dst + 3].copy_from_slice(&iv[src..src + 3]);
            }
        }
        return Tensor::new(sh.to_vec(), out)
            .map_err(|e| DataError::Invalid(e.to_string()));
    }
    if (norm == 90.0 || norm == 270.0) && h == w {
        let iv = image.values();
        let mut out = vec![S::zero(); iv.len()];
        for r in 0..h {
            for c in 0..w {
                // counterclockwise 90°: out[r][c] = in[c][w-1-r]
                let (sr, sc) = if norm == 90.0 {
                    (c, w - 1 - r)
                } else {
                    (h - 1 - c, r)
                };
                let src = (sr * w + sc) * 3;
                let dst = (r * w + c) * 3;
                out[dst..dst + 3].copy_from_slice(&iv[src..src + 3]);
            }
        }
        return Tensor::new(sh.to_vec(), out)
            .map_err(|e| DataError::Invalid(e.to_string()));
    }

    let theta = norm.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let fill = S::from_f64(-1.0);
    let iv = image.values();
    let mut out = vec![S::zero(); iv.len()];

    let sample = |y: isize, x: isize, ch: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            -1.0
        } else {
            iv[((y as usize) * w + x as usize) * 3 + ch].as_f64()
        }
    };

    for r in 0..h {
        let dy = r as f64 - cy;
        for c in 0..w {
            let dx = c as f64 - cx;
            // inverse rotation of the output grid into source coordinates
            let sx = cx + dx * cos + dy * sin;
            let sy = cy - dx * sin + dy * cos;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            let dst = (r * w + c) * 3;
            if sx < -1.0 || sy < -1.0 || sx > w as f64 || sy > h as f64 {
                out[dst..dst + 3].iter_mut().for_each(|v| *v = fill);
                continue;
            }
            for ch in 0..3 {
                let v00 = sample(y0, x0, ch);
                let v01 = sample(y0, x0 + 1, ch);
                let v10 = sample(y0 + 1, x0, ch);
                let v11 = sample(y0 + 1, x0 + 1, ch);
                let top = v00 + (v01 - v00) * fx;
                let bottom = v10 + (v11 - v10) * fx;
                out[dst + ch] = S::from_f64(top + (bottom - top) * fy);
            }
        }
    }
    Tensor::new(sh.to_vec(), out).map_err(|e| DataError::Invalid(e.to_string()))
}

/// Draw an angle uniformly from `±max_deg` and rotate. Training-split
/// only; the caller keys the stream per sample and epoch so results are
/// independent of processing order.
pub fn augment_rotation<S: Scalar>(
    image: &Tensor<S>,
    rng: &mut RngStream,
    max_deg: f64,
) -> Result<Tensor<S>, DataError> {
    let angle = rng.uniform(-max_deg, max_deg);
    rotate(image, angle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_image(w: u32, h: u32, value: u8) -> image::RgbImage {
        image::RgbImage::from_pixel(w, h, image::Rgb([value, value, value]))
    }

    #[test]
    fn constant_gray_maps_to_the_normalized_value() {
        let img = gray_image(10, 7, 128);
        let t = preprocess_image(&img, 4, 4);
        let expected = (128.0 / 255.0 - 0.5) / 0.5;
        for &v in t.values() {
            assert!((v - expected).abs() < 1e-6, "{v} vs {expected}");
        }
    }

    #[test]
    fn normalization_endpoints() {
        let t = preprocess_image(&gray_image(2, 2, 0), 2, 2);
        assert!(t.values().iter().all(|&v| v == -1.0));
        let t = preprocess_image(&gray_image(2, 2, 255), 2, 2);
        assert!(t.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn same_size_resize_only_normalizes() {
        let mut img = image::RgbImage::new(3, 3);
        for (i, p) in img.pixels_mut().enumerate() {
            *p = image::Rgb([(i * 20) as u8, 0, 255 - (i * 20) as u8]);
        }
        let t = preprocess_image(&img, 3, 3);
        for (i, p) in img.pixels().enumerate() {
            for ch in 0..3 {
                let expected = (p[ch] as f32 / 255.0 - 0.5) / 0.5;
                assert!((t.values()[i * 3 + ch] - expected).abs() < 1e-7);
            }
        }
    }

    fn ramp_tensor(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(vec![h, w, 3], |i| ((i % 101) as f32 / 50.5) - 1.0)
    }

    #[test]
    fn rotate_zero_is_identity_bit_for_bit() {
        let t = ramp_tensor(5, 7);
        let r = rotate(&t, 0.0).unwrap();
        assert_eq!(r.values(), t.values());
    }

    #[test]
    fn rotate_180_is_the_exact_double_flip() {
        let t = ramp_tensor(4, 6);
        let r = rotate(&t, 180.0).unwrap();
        let (h, w) = (4, 6);
        for row in 0..h {
            for col in 0..w {
                for ch in 0..3 {
                    assert_eq!(
                        r.values()[(row * w + col) * 3 + ch],
                        t.values()[((h - 1 - row) * w + (w - 1 - col)) * 3 + ch]
                    );
                }
            }
        }
        // involution
        let back = rotate(&r, 180.0).unwrap();
        assert_eq!(back.values(), t.values());
    }

    #[test]
    fn rotate_90_round_trips_on_square_images() {
        let t = ramp_tensor(6, 6);
        let r = rotate(&t, 90.0).unwrap();
        let back = rotate(&r, 270.0).unwrap();
        assert_eq!(back.values(), t.values());
    }

    #[test]
    fn small_angle_rotation_fills_corners_with_black() {
        let t = Tensor::<f32>::full(vec![16, 16, 3], 1.0);
        let r = rotate(&t, 45.0).unwrap();
        // corner pixel rotates out of bounds
        assert_eq!(r.values()[0], -1.0);
        // center stays bright
        let mid = (8 * 16 + 8) * 3;
        assert!(r.values()[mid] > 0.9);
    }

    #[test]
    fn augment_rotation_is_deterministic_per_stream() {
        let t = ramp_tensor(8, 8);
        let mut a = RngStream::new(3, 1);
        let mut b = RngStream::new(3, 1);
        let ra = augment_rotation(&t, &mut a, 15.0).unwrap();
        let rb = augment_rotation(&t, &mut b, 15.0).unwrap();
        assert_eq!(ra.values(), rb.values());
    }

    #[test]
    fn load_image_reports_undecodable_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_an_image.png");
        std::fs::write(&path, b"garbage").unwrap();
        match load_image(&path) {
            Err(DataError::Image { path: p, .. }) => assert_eq!(p, path),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn grayscale_files_are_replicated_to_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let gray = image::GrayImage::from_pixel(4, 4, image::Luma([200]));
        gray.save(&path).unwrap();
        let rgb = load_image(&path).unwrap();
        let p = rgb.get_pixel(0, 0);
        assert_eq!((p[0], p[1], p[2]), (200, 200, 200));
    }
}
