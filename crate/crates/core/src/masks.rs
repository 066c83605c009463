//! Flare/haze soft masks.
//!
//! A pixel whose brightest channel exceeds `tau` is treated as (partially)
//! saturated by flare; the flare weight ramps linearly from 0 at `tau` to 1 at
//! full scale, and the haze weight is its complement.

use ndarray::{Array2, ArrayView3};

use crate::config::MaskConfig;
use crate::error::{CoreError, Result};
use crate::resample;

const RANGE_TOL: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub flare: Array2<f32>,
    pub haze: Array2<f32>,
}

impl MaskPair {
    /// Both maps constant 1, used when mask gating is disabled.
    pub fn ungated(h: usize, w: usize) -> Self {
        MaskPair {
            flare: Array2::ones((h, w)),
            haze: Array2::ones((h, w)),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.flare.dim()
    }
}

/// Flare weight of a single pixel given its brightest channel.
#[inline]
pub fn flare_weight(max_channel: f32, tau: f32) -> f32 {
    ((max_channel - tau).max(0.0) / (1.0 - tau)).clamp(0.0, 1.0)
}

/// Splits a display-range frame (`3 x H x W`, values in `[0, 1]`) into
/// complementary flare and haze maps.
pub fn soft_mask(frame: ArrayView3<'_, f32>, cfg: &MaskConfig) -> Result<MaskPair> {
    cfg.validate()?;
    let (c, h, w) = frame.dim();
    if c == 0 {
        return Err(CoreError::Shape("frame has no channels".into()));
    }
    let tau = cfg.tau as f32;
    let mut flare = Array2::zeros((h, w));
    let mut haze = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut m = f32::NEG_INFINITY;
            for ch in 0..c {
                let v = frame[[ch, y, x]];
                if !(v >= -RANGE_TOL && v <= 1.0 + RANGE_TOL) {
                    return Err(CoreError::Invalid(format!(
                        "mask input {v} at ({x}, {y}) outside [0, 1]; clamp first"
                    )));
                }
                m = m.max(v.clamp(0.0, 1.0));
            }
            let f = flare_weight(m, tau);
            flare[[y, x]] = f;
            haze[[y, x]] = 1.0 - f;
        }
    }
    Ok(MaskPair { flare, haze })
}

/// Bilinearly downsamples the frame by `scale`, then applies [`soft_mask`].
pub fn mask_at_scale(frame: ArrayView3<'_, f32>, cfg: &MaskConfig, scale: usize) -> Result<MaskPair> {
    let (_, h, w) = frame.dim();
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(CoreError::Shape(format!(
            "frame {h}x{w} not divisible by scale {scale}"
        )));
    }
    if scale == 1 {
        return soft_mask(frame, cfg);
    }
    let small = resample::resize3(&frame.to_owned(), h / scale, w / scale);
    soft_mask(small.view(), cfg)
}
