//! The clip container shared by every stage of the pipeline.

use ndarray::{Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Whether a stack may exceed the display range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Colorspace {
    /// Linear light, unbounded above (HDR sources and clean references).
    LinearHdr,
    /// Values already saturated into `[0, 1]` (degraded and restored frames).
    DisplayClamped,
}

/// A `T x 3 x H x W` clip of nonnegative linear-light intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    data: Array4<f32>,
    colorspace: Colorspace,
}

impl FrameStack {
    pub fn new(data: Array4<f32>, colorspace: Colorspace) -> Result<Self> {
        let (t, c, h, w) = data.dim();
        if t == 0 {
            return Err(CoreError::Shape("clip has no frames".into()));
        }
        if c != 3 {
            return Err(CoreError::Shape(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(CoreError::Shape("empty frame".into()));
        }
        for &v in data.iter() {
            if !v.is_finite() {
                return Err(CoreError::Invalid("non-finite sample in clip".into()));
            }
            if v < 0.0 {
                return Err(CoreError::Invalid(format!("negative sample {v} in clip")));
            }
            if colorspace == Colorspace::DisplayClamped && v > 1.0 {
                return Err(CoreError::Invalid(format!(
                    "display-clamped clip holds {v} > 1"
                )));
            }
        }
        Ok(FrameStack { data, colorspace })
    }

    pub fn from_frames(frames: &[Array3<f32>], colorspace: Colorspace) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| CoreError::Shape("clip has no frames".into()))?;
        let (c, h, w) = first.dim();
        let mut data = Array4::zeros((frames.len(), c, h, w));
        for (t, f) in frames.iter().enumerate() {
            if f.dim() != (c, h, w) {
                return Err(CoreError::Shape(format!(
                    "frame {t} is {:?}, frame 0 is {:?}",
                    f.dim(),
                    (c, h, w)
                )));
            }
            data.index_axis_mut(Axis(0), t).assign(f);
        }
        Self::new(data, colorspace)
    }

    /// Constant-valued clip, handy for tests and padding.
    pub fn filled(t: usize, h: usize, w: usize, value: f32, colorspace: Colorspace) -> Result<Self> {
        Self::new(Array4::from_elem((t, 3, h, w), value), colorspace)
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    pub fn colorspace(&self) -> Colorspace {
        self.colorspace
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(height, width)`
    pub fn frame_dims(&self) -> (usize, usize) {
        let (_, _, h, w) = self.data.dim();
        (h, w)
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), t)
    }

    pub fn frames(&self) -> impl Iterator<Item = ArrayView3<'_, f32>> {
        self.data.axis_iter(Axis(0))
    }

    /// Frames `start..end` as a new stack.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(CoreError::Shape(format!(
                "frame range {start}..{end} outside clip of {}",
                self.len()
            )));
        }
        let data = self
            .data
            .slice(ndarray::s![start..end, .., .., ..])
            .to_owned();
        Ok(FrameStack {
            data,
            colorspace: self.colorspace,
        })
    }

    /// Saturate into `[0, hi]` and rescale so that `hi` maps to 1.
    pub fn to_display(&self, hi: f32) -> FrameStack {
        let data = self.data.mapv(|v| v.clamp(0.0, hi) / hi);
        FrameStack {
            data,
            colorspace: Colorspace::DisplayClamped,
        }
    }
}
