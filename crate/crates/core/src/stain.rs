//! Reinhard colour transfer in the lαβ space.
//!
//! RGB → LMS (linear), log10, then a decorrelating rotation into lαβ. Each lαβ
//! channel of the source is shifted and scaled to the target mean and standard
//! deviation, and the inverse chain maps back to 8-bit RGB.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ppm::RgbImage;

pub const RGB_TO_LMS: [[f64; 3]; 3] = [
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
];

/// Exact inverse of [`RGB_TO_LMS`] (the four-digit rounded inverse drifts by
/// more than one 8-bit level on saturated blues).
pub const LMS_TO_RGB: [[f64; 3]; 3] = [
    [4.468669863496255, -3.5886759034721267, 0.11960436657860116],
    [-1.2197166276177631, 2.3830879129554567, -0.16263011175140055],
    [0.058508476938545856, -0.2610784390276937, 1.205665908525623],
];

const FRAC_1_SQRT_3: f64 = 0.577_350_269_189_625_8;
const FRAC_1_SQRT_6: f64 = 0.408_248_290_463_863;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// diag(1/√3, 1/√6, 1/√2) · [[1,1,1],[1,1,−2],[1,−1,0]]
pub const LOG_LMS_TO_LAB: [[f64; 3]; 3] = [
    [FRAC_1_SQRT_3, FRAC_1_SQRT_3, FRAC_1_SQRT_3],
    [FRAC_1_SQRT_6, FRAC_1_SQRT_6, -2.0 * FRAC_1_SQRT_6],
    [FRAC_1_SQRT_2, -FRAC_1_SQRT_2, 0.0],
];

/// [[1,1,1],[1,1,−1],[1,−2,0]] · diag(√3/3, √6/6, √2/2)
pub const LAB_TO_LOG_LMS: [[f64; 3]; 3] = [
    [FRAC_1_SQRT_3, FRAC_1_SQRT_6, FRAC_1_SQRT_2],
    [FRAC_1_SQRT_3, FRAC_1_SQRT_6, -FRAC_1_SQRT_2],
    [FRAC_1_SQRT_3, -2.0 * FRAC_1_SQRT_6, 0.0],
];

/// LMS values are floored here before the logarithm so black stays finite.
pub const LMS_FLOOR: f64 = 1e-6;

fn mul(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn rgb_to_lab(p: [u8; 3]) -> [f64; 3] {
    let lms = mul(&RGB_TO_LMS, p.map(f64::from));
    mul(&LOG_LMS_TO_LAB, lms.map(|v| v.max(LMS_FLOOR).log10()))
}

/// Inverse transform, rounded and clamped to 8 bits.
pub fn lab_to_rgb(lab: [f64; 3]) -> [u8; 3] {
    let lms = mul(&LAB_TO_LOG_LMS, lab).map(|v| 10f64.powf(v));
    mul(&LMS_TO_RGB, lms).map(|v| v.round().clamp(0.0, 255.0) as u8)
}

/// Unrounded inverse transform, for clamping checks.
pub fn lab_to_rgb_f64(lab: [f64; 3]) -> [f64; 3] {
    let lms = mul(&LAB_TO_LOG_LMS, lab).map(|v| 10f64.powf(v));
    mul(&LMS_TO_RGB, lms)
}

/// Per-channel lαβ mean and (population) standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn validate(&self) -> Result<()> {
        if self.mean.iter().chain(&self.std).any(|v| !v.is_finite()) || self.std.iter().any(|&s| s < 0.0) {
            return Err(Error::InvalidInput(format!(
                "channel stats must be finite with std >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn compute_stats(image: &RgbImage) -> Result<ChannelStats> {
    if image.pixels.is_empty() {
        return Err(Error::InvalidInput("cannot compute stats of a zero-pixel image".into()));
    }
    let labs: Vec<[f64; 3]> = image.pixels.iter().map(|&p| rgb_to_lab(p)).collect();
    Ok(stats_of(&labs))
}

pub(crate) fn stats_of(labs: &[[f64; 3]]) -> ChannelStats {
    // accumulate around the first pixel so a flat channel has exactly zero spread
    let n = labs.len() as f64;
    let origin = labs[0];
    let mut shift = [0.0; 3];
    for l in labs {
        for c in 0..3 {
            shift[c] += l[c] - origin[c];
        }
    }
    shift.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 3];
    for l in labs {
        for c in 0..3 {
            var[c] += (l[c] - origin[c] - shift[c]).powi(2);
        }
    }
    ChannelStats {
        mean: std::array::from_fn(|c| origin[c] + shift[c]),
        std: var.map(|v| (v / n).sqrt()),
    }
}

/// Matches the image's lαβ statistics to `target`.
///
/// A channel with zero source spread is only shifted.
pub fn normalize(image: &RgbImage, target: &ChannelStats) -> Result<RgbImage> {
    target.validate()?;
    let source = compute_stats(image)?;
    let scale: [f64; 3] = std::array::from_fn(|c| {
        if source.std[c] == 0.0 {
            1.0
        } else {
            target.std[c] / source.std[c]
        }
    });
    let pixels = image
        .pixels
        .iter()
        .map(|&p| {
            let lab = rgb_to_lab(p);
            lab_to_rgb(std::array::from_fn(|c| {
                (lab[c] - source.mean[c]) * scale[c] + target.mean[c]
            }))
        })
        .collect();
    RgbImage::new(image.width, image.height, pixels)
}

pub fn read_stats(path: impl AsRef<Path>) -> Result<ChannelStats> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stats: ChannelStats = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    stats.validate()?;
    Ok(stats)
}

pub fn write_stats(stats: &ChannelStats, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(stats)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_zero_spread() {
        let img = RgbImage::filled(4, 3, [200, 120, 180]);
        let s = compute_stats(&img).unwrap();
        assert_eq!(s.std, [0.0; 3]);
    }

    #[test]
    fn mid_gray_lies_near_the_achromatic_axis() {
        // frozen from an independent numpy evaluation of the same matrices
        let s = compute_stats(&RgbImage::filled(2, 2, [128, 128, 128])).unwrap();
        assert!((s.mean[0] - 3.64884092e+00).abs() < 1e-8);
        assert!((s.mean[1] - 7.63627115e-04).abs() < 1e-11);
        assert!((s.mean[2] - 9.21784708e-05).abs() < 1e-12);
    }

    #[test]
    fn doubled_image_has_the_same_stats() {
        let px: Vec<[u8; 3]> = (0..30u8).map(|i| [i * 7, 255 - i * 3, 40 + i]).collect();
        let img = RgbImage::new(6, 5, px.clone()).unwrap();
        let doubled = RgbImage::new(6, 10, [px.clone(), px].concat()).unwrap();
        let a = compute_stats(&img).unwrap();
        let b = compute_stats(&doubled).unwrap();
        for c in 0..3 {
            assert!((a.mean[c] - b.mean[c]).abs() < 1e-12);
            assert!((a.std[c] - b.std[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn black_pixels_stay_finite() {
        let lab = rgb_to_lab([0, 0, 0]);
        assert!(lab.iter().all(|v| v.is_finite()));
        assert_eq!(lab_to_rgb(lab), [0, 0, 0]);
    }

    #[test]
    fn zero_pixel_image_is_rejected() {
        assert!(compute_stats(&RgbImage::filled(0, 0, [0, 0, 0])).is_err());
    }

    #[test]
    fn flat_channel_is_only_shifted() {
        let img = RgbImage::filled(2, 2, [90, 90, 90]);
        let target = ChannelStats {
            mean: rgb_to_lab([100, 100, 100]),
            std: [1.0, 1.0, 1.0],
        };
        let out = normalize(&img, &target).unwrap();
        assert!(out.pixels.iter().all(|&p| p == [100, 100, 100]));
    }
}
