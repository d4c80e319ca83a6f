//! Camera-frame → network-input pipeline.
//!
//! The chain is fixed: drop the top third of the 480×640 frame (sky and
//! far-field clutter), bilinearly resize the remaining 320×640 band down to
//! 32×64, convert to YUV, and scale into `[0, 1]` floats. Every step is a
//! pure function, and the whole chain is bit-deterministic.

use crate::render::RgbImage;
use thiserror::Error;

/// Channels of the network input (Y, U, V planes).
pub const INPUT_CHANNELS: usize = 3;
/// Height of the network input in pixels.
pub const INPUT_HEIGHT: usize = 32;
/// Width of the network input in pixels.
pub const INPUT_WIDTH: usize = 64;
/// Total element count of one input tensor.
pub const INPUT_LEN: usize = INPUT_CHANNELS * INPUT_HEIGHT * INPUT_WIDTH;

/// Source frame shape expected by the pipeline.
const FRAME_SHAPE: (usize, usize) = (480, 640);
/// Shape after the crop, before the resize.
const CROPPED_SHAPE: (usize, usize) = (320, 640);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PreprocessError {
    #[error("expected a {expected_h}x{expected_w} image, got {got_h}x{got_w}")]
    WrongShape { expected_h: usize, expected_w: usize, got_h: usize, got_w: usize },
}

fn check_shape(img: &RgbImage, (h, w): (usize, usize)) -> Result<(), PreprocessError> {
    if img.height != h || img.width != w {
        return Err(PreprocessError::WrongShape {
            expected_h: h,
            expected_w: w,
            got_h: img.height,
            got_w: img.width,
        });
    }
    Ok(())
}

/// Network input: planar Y, U, V channels of a 32×64 image, each value in
/// `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct InputTensor {
    /// `INPUT_LEN` floats, plane-major: all of Y, then U, then V, each plane
    /// row-major 32×64.
    pub data: Vec<f32>,
}

impl InputTensor {
    pub fn zeros() -> InputTensor {
        InputTensor { data: vec![0.0; INPUT_LEN] }
    }

    pub fn from_data(data: Vec<f32>) -> InputTensor {
        assert_eq!(data.len(), INPUT_LEN, "input tensor must hold {INPUT_LEN} values");
        InputTensor { data }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * INPUT_HEIGHT + y) * INPUT_WIDTH + x]
    }
}

impl std::fmt::Debug for InputTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "InputTensor({INPUT_CHANNELS}x{INPUT_HEIGHT}x{INPUT_WIDTH}, first={:?})",
            &self.data[..4.min(self.data.len())]
        )
    }
}

/// Remove the top third of a 480×640 frame, keeping rows `160..480`.
pub fn crop_top_third(frame: &RgbImage) -> Result<RgbImage, PreprocessError> {
    check_shape(frame, FRAME_SHAPE)?;
    let (h, w) = CROPPED_SHAPE;
    let skip = FRAME_SHAPE.0 - h;
    let start = skip * w * 3;
    Ok(RgbImage { width: w, height: h, data: frame.data[start..].to_vec() })
}

/// Bilinear sample of an image at continuous pixel coordinates `(x, y)`
/// (integer coordinates address pixel centers). Coordinates are clamped to
/// the valid range; returns unrounded per-channel values.
pub fn bilinear_at(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let xc = x.clamp(0.0, (img.width - 1) as f64);
    let yc = y.clamp(0.0, (img.height - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let p00 = f64::from(img.pixel(x0, y0)[c]);
        let p10 = f64::from(img.pixel(x1, y0)[c]);
        let p01 = f64::from(img.pixel(x0, y1)[c]);
        let p11 = f64::from(img.pixel(x1, y1)[c]);
        let top = p00 + fx * (p10 - p00);
        let bot = p01 + fx * (p11 - p01);
        *o = top + fy * (bot - top);
    }
    out
}

/// Shrink the cropped 320×640 band to 32×64 with half-pixel-centered
/// bilinear sampling (`src = (dst + 0.5)·scale − 0.5`), rounding each
/// channel back to 8 bits.
pub fn resize_bilinear(img: &RgbImage) -> Result<RgbImage, PreprocessError> {
    check_shape(img, CROPPED_SHAPE)?;
    let scale_x = img.width as f64 / INPUT_WIDTH as f64;
    let scale_y = img.height as f64 / INPUT_HEIGHT as f64;
    let mut out = RgbImage::new(INPUT_WIDTH, INPUT_HEIGHT);
    for dy in 0..INPUT_HEIGHT {
        let sy = (dy as f64 + 0.5) * scale_y - 0.5;
        for dx in 0..INPUT_WIDTH {
            let sx = (dx as f64 + 0.5) * scale_x - 0.5;
            let v = bilinear_at(img, sx, sy);
            out.set_pixel(
                dx,
                dy,
                [
                    v[0].round().clamp(0.0, 255.0) as u8,
                    v[1].round().clamp(0.0, 255.0) as u8,
                    v[2].round().clamp(0.0, 255.0) as u8,
                ],
            );
        }
    }
    Ok(out)
}

/// Convert a 32×64 8-bit RGB image to planar YUV in `[0, 1]`.
///
/// Full-range conversion with the chroma planes offset by 128 before the
/// division by 255; the coefficient rows each sum to 1, 0, 0 exactly, so
/// gray inputs map to `(g/255, 128/255, 128/255)`.
pub fn rgb_to_yuv(img: &RgbImage) -> Result<InputTensor, PreprocessError> {
    check_shape(img, (INPUT_HEIGHT, INPUT_WIDTH))?;
    let mut t = InputTensor::zeros();
    let plane = INPUT_HEIGHT * INPUT_WIDTH;
    for y in 0..INPUT_HEIGHT {
        for x in 0..INPUT_WIDTH {
            let [r8, g8, b8] = img.pixel(x, y);
            let (r, g, b) = (f64::from(r8), f64::from(g8), f64::from(b8));
            let yv = 0.299 * r + 0.587 * g + 0.114 * b;
            let uv = -0.169 * r - 0.331 * g + 0.5 * b + 128.0;
            let vv = 0.5 * r - 0.419 * g - 0.081 * b + 128.0;
            let i = y * INPUT_WIDTH + x;
            t.data[i] = ((yv / 255.0).clamp(0.0, 1.0)) as f32;
            t.data[plane + i] = ((uv / 255.0).clamp(0.0, 1.0)) as f32;
            t.data[2 * plane + i] = ((vv / 255.0).clamp(0.0, 1.0)) as f32;
        }
    }
    Ok(t)
}

/// Full chain: crop, resize, color-convert, normalize.
pub fn preprocess(frame: &RgbImage) -> Result<InputTensor, PreprocessError> {
    rgb_to_yuv(&resize_bilinear(&crop_top_third(frame)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn uniform(width: usize, height: usize, rgb: [u8; 3]) -> RgbImage {
        let mut img = RgbImage::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set_pixel(x, y, rgb);
            }
        }
        img
    }

    #[test]
    fn crop_keeps_rows_160_onward_in_order() {
        let mut img = RgbImage::new(640, 480);
        for y in 0..480 {
            for x in 0..640 {
                img.set_pixel(x, y, [(y % 256) as u8, 0, 0]);
            }
        }
        let out = crop_top_third(&img).unwrap();
        assert_eq!(out.height, 320);
        assert_eq!(out.width, 640);
        assert_eq!(out.pixel(0, 0)[0], 160);
        assert_eq!(out.pixel(5, 95)[0], 255u8);
        assert_eq!(out.pixel(5, 96)[0], 0); // source row 256 wrapped
        assert_eq!(out.pixel(639, 319)[0], (479 % 256) as u8);
    }

    #[test]
    fn crop_rejects_wrong_shapes() {
        let img = RgbImage::new(640, 479);
        assert_eq!(
            crop_top_third(&img),
            Err(PreprocessError::WrongShape {
                expected_h: 480,
                expected_w: 640,
                got_h: 479,
                got_w: 640
            })
        );
        assert!(crop_top_third(&RgbImage::new(639, 480)).is_err());
    }

    #[test]
    fn crop_of_uniform_is_uniform() {
        let out = crop_top_third(&uniform(640, 480, [7, 8, 9])).unwrap();
        assert!(out.data.chunks(3).all(|p| p == [7, 8, 9]));
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let out = resize_bilinear(&uniform(640, 320, [42, 100, 200])).unwrap();
        assert_eq!(out.width, 64);
        assert_eq!(out.height, 32);
        assert!(out.data.chunks(3).all(|p| p == [42, 100, 200]));
    }

    #[test]
    fn resize_preserves_ramp_monotonicity() {
        let mut img = RgbImage::new(640, 320);
        for y in 0..320 {
            for x in 0..640 {
                let v = ((x as f64 / 639.0) * 255.0).round() as u8;
                img.set_pixel(x, y, [v, v, v]);
            }
        }
        let out = resize_bilinear(&img).unwrap();
        for y in 0..out.height {
            for x in 1..out.width {
                assert!(out.pixel(x, y)[0] >= out.pixel(x - 1, y)[0]);
            }
        }
        assert!(out.pixel(63, 0)[0] > out.pixel(0, 0)[0]);
    }

    #[test]
    fn bilinear_center_of_2x2_block_is_exact() {
        let mut img = RgbImage::new(2, 2);
        img.set_pixel(0, 0, [0, 0, 0]);
        img.set_pixel(1, 0, [100, 100, 100]);
        img.set_pixel(0, 1, [200, 200, 200]);
        img.set_pixel(1, 1, [255, 255, 255]);
        // Equal 1/4 weights at the block center.
        let v = bilinear_at(&img, 0.5, 0.5);
        assert_eq!(v, [138.75, 138.75, 138.75]);
    }

    #[test]
    fn yuv_of_primary_colors_matches_formula() {
        let white = rgb_to_yuv(&uniform(64, 32, [255, 255, 255])).unwrap();
        assert_abs_diff_eq!(white.at(0, 0, 0), 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(white.at(1, 0, 0), 0.502, epsilon = 5e-4);
        assert_abs_diff_eq!(white.at(2, 0, 0), 0.502, epsilon = 5e-4);

        let black = rgb_to_yuv(&uniform(64, 32, [0, 0, 0])).unwrap();
        assert_eq!(black.at(0, 0, 0), 0.0);
        assert_abs_diff_eq!(black.at(1, 0, 0), 0.502, epsilon = 5e-4);
        assert_abs_diff_eq!(black.at(2, 0, 0), 0.502, epsilon = 5e-4);

        let gray = rgb_to_yuv(&uniform(64, 32, [128, 128, 128])).unwrap();
        assert_abs_diff_eq!(gray.at(0, 0, 0), 0.502, epsilon = 5e-4);
        assert_abs_diff_eq!(gray.at(1, 0, 0), 0.502, epsilon = 5e-4);
        assert_abs_diff_eq!(gray.at(2, 0, 0), 0.502, epsilon = 5e-4);
    }

    #[test]
    fn chroma_extremes_stay_inside_unit_range() {
        // Pure blue pushes U past 255 before normalization; the tensor
        // contract clamps it back into [0, 1].
        let blue = rgb_to_yuv(&uniform(64, 32, [0, 0, 255])).unwrap();
        assert_eq!(blue.at(1, 0, 0), 1.0);
        assert!(blue.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn full_chain_shape_range_and_determinism() {
        let mut frame = RgbImage::new(640, 480);
        for y in 0..480 {
            for x in 0..640 {
                frame.set_pixel(x, y, [(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        let a = preprocess(&frame).unwrap();
        let b = preprocess(&frame).unwrap();
        assert_eq!(a.data.len(), INPUT_LEN);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, b, "same frame must preprocess bit-identically");

        let c = preprocess(&uniform(640, 480, [50, 50, 50])).unwrap();
        let y0 = c.at(0, 0, 0);
        assert!(c.data[..INPUT_HEIGHT * INPUT_WIDTH].iter().all(|v| *v == y0));
    }

    #[test]
    fn crop_resize_commutes_with_constant_scaling() {
        let mut frame = RgbImage::new(640, 480);
        for y in 0..480 {
            for x in 0..640 {
                let v = ((x * 7 + y * 13) % 200) as u8 + 30;
                frame.set_pixel(x, y, [v, v.wrapping_add(20), v.wrapping_sub(10)]);
            }
        }
        let mut halved = frame.clone();
        for b in halved.data.iter_mut() {
            *b = (f64::from(*b) * 0.5).round() as u8;
        }
        let full = resize_bilinear(&crop_top_third(&frame).unwrap()).unwrap();
        let half = resize_bilinear(&crop_top_third(&halved).unwrap()).unwrap();
        for (a, b) in full.data.iter().zip(half.data.iter()) {
            let rescaled = f64::from(*a) * 0.5;
            assert!(
                (rescaled - f64::from(*b)).abs() <= 1.0,
                "scaling did not commute: {a} vs {b}"
            );
        }
    }
}
