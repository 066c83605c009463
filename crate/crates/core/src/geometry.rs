//! Projective transforms, flow fields and bilinear warping.
//!
//! Pixel centers sit at integer coordinates, `x` along columns and `y` along
//! rows. A flow field stores per-pixel displacements `(u, v)`; warping by a
//! flow samples the source at `(x + u, y + v)` with zero fill outside the grid.

use ndarray::{Array2, Array3, ArrayView3};
use num_complex::Complex64;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

const DET_EPS: f64 = 1e-12;
const W_EPS: f64 = 1e-12;

/// A 3x3 invertible projective transform, normalized so `m[2][2] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::Invalid("homography has non-finite entries".into()));
        }
        if m[2][2].abs() < W_EPS {
            return Err(CoreError::Invalid(
                "homography with m[2][2] = 0 cannot be normalized".into(),
            ));
        }
        let s = m[2][2];
        let m = m.map(|row| row.map(|v| v / s));
        let h = Homography { m };
        let det = h.det();
        if det.abs() < DET_EPS {
            return Err(CoreError::Singular(det));
        }
        Ok(h)
    }

    pub fn identity() -> Self {
        Homography {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation by `angle` radians about `(cx, cy)`.
    pub fn rotation_about(angle: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let r = Homography {
            m: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        };
        Homography::translation(cx, cy)
            .compose(&r)
            .compose(&Homography::translation(-cx, -cy))
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Homography {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        let s = m[2][2];
        if s.abs() >= W_EPS {
            m = m.map(|row| row.map(|v| v / s));
        }
        Homography { m }
    }

    pub fn inverse(&self) -> Result<Homography> {
        let det = self.det();
        if det.abs() < DET_EPS {
            return Err(CoreError::Singular(det));
        }
        let m = &self.m;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| {
            m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
        };
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        Homography::new(adj.map(|row| row.map(|v| v / det)))
    }

    /// Conjugates the transform so that `from` maps onto `to`: the result acts
    /// on a grid centered at `to` exactly as `self` acts about `from`.
    pub fn recentered(&self, from: (f64, f64), to: (f64, f64)) -> Homography {
        let dx = to.0 - from.0;
        let dy = to.1 - from.1;
        Homography::translation(dx, dy)
            .compose(self)
            .compose(&Homography::translation(-dx, -dy))
    }

    pub fn apply_point(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.m;
        let xp = m[0][0] * x + m[0][1] * y + m[0][2];
        let yp = m[1][0] * x + m[1][1] * y + m[1][2];
        let wp = m[2][0] * x + m[2][1] * y + m[2][2];
        if wp.abs() < W_EPS {
            None
        } else {
            Some((xp / wp, yp / wp))
        }
    }

    pub fn apply(&self, pts: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
        if pts.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(CoreError::Invalid("non-finite input point".into()));
        }
        let mut out = Vec::with_capacity(pts.len());
        let mut bad = Vec::new();
        for &(x, y) in pts {
            match self.apply_point(x, y) {
                Some(p) => out.push(p),
                None => bad.push((x, y)),
            }
        }
        if bad.is_empty() {
            Ok(out)
        } else {
            Err(CoreError::PointAtInfinity(bad))
        }
    }
}

/// Per-pixel displacements, `2 x H x W` with `u` (x) first.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    uv: Array3<f32>,
}

impl FlowField {
    pub fn new(uv: Array3<f32>) -> Result<Self> {
        if uv.dim().0 != 2 {
            return Err(CoreError::Shape(format!(
                "flow needs 2 channels, got {}",
                uv.dim().0
            )));
        }
        if uv.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Invalid("non-finite flow".into()));
        }
        Ok(FlowField {
            uv: uv.as_standard_layout().into_owned(),
        })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            uv: Array3::zeros((2, h, w)),
        }
    }

    pub fn uv(&self) -> &Array3<f32> {
        &self.uv
    }

    pub fn into_uv(self) -> Array3<f32> {
        self.uv
    }

    /// `(height, width)`
    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.uv.dim();
        (h, w)
    }

    pub fn mean_magnitude(&self) -> f64 {
        let (h, w) = self.dims();
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                let u = self.uv[[0, y, x]] as f64;
                let v = self.uv[[1, y, x]] as f64;
                acc += (u * u + v * v).sqrt();
            }
        }
        acc / (h * w) as f64
    }

    /// Flow for a grid `factor` times smaller: resampled, then divided by `factor`.
    pub fn downscale(&self, factor: usize) -> Result<FlowField> {
        let (h, w) = self.dims();
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(CoreError::Shape(format!(
                "flow {h}x{w} not divisible by {factor}"
            )));
        }
        let small = crate::resample::resize3(&self.uv, h / factor, w / factor);
        let inv = 1.0 / factor as f32;
        Ok(FlowField {
            uv: small.mapv(|v| v * inv),
        })
    }
}

/// Displacement of every pixel under `h`: `uv[:, y, x] = h(x, y) - (x, y)`.
pub fn homography_to_flow(h: &Homography, shape: (usize, usize)) -> Result<FlowField> {
    let (rows, cols) = shape;
    let mut uv = Array3::zeros((2, rows, cols));
    let mut bad = Vec::new();
    for y in 0..rows {
        for x in 0..cols {
            match h.apply_point(x as f64, y as f64) {
                Some((xp, yp)) => {
                    uv[[0, y, x]] = (xp - x as f64) as f32;
                    uv[[1, y, x]] = (yp - y as f64) as f32;
                }
                None => bad.push((x as f64, y as f64)),
            }
        }
    }
    if !bad.is_empty() {
        return Err(CoreError::PointAtInfinity(bad));
    }
    FlowField::new(uv)
}

#[derive(Clone, Copy)]
struct Taps<T> {
    x0: isize,
    y0: isize,
    fx: T,
    fy: T,
}

#[inline]
fn taps<T: Float>(px: T, py: T) -> Taps<T> {
    let x0 = px.floor();
    let y0 = py.floor();
    Taps {
        x0: x0.to_isize().unwrap_or(isize::MIN / 2),
        y0: y0.to_isize().unwrap_or(isize::MIN / 2),
        fx: px - x0,
        fy: py - y0,
    }
}

#[inline]
fn at<T: Float>(plane: &[T], h: usize, w: usize, x: isize, y: isize) -> T {
    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
        T::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Bilinear warp on raw `c x h x w` planes. `flow` is `2 x h x w`.
pub fn warp_bilinear_into<T: Float>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    flow: &[T],
    out: &mut [T],
) {
    let hw = h * w;
    assert_eq!(src.len(), c * hw);
    assert_eq!(flow.len(), 2 * hw);
    assert_eq!(out.len(), c * hw);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let px = T::from(x).unwrap() + flow[p];
            let py = T::from(y).unwrap() + flow[hw + p];
            if !px.is_finite() || !py.is_finite() {
                for ch in 0..c {
                    out[ch * hw + p] = T::zero();
                }
                continue;
            }
            let t = taps(px, py);
            let one = T::one();
            let w00 = (one - t.fx) * (one - t.fy);
            let w10 = t.fx * (one - t.fy);
            let w01 = (one - t.fx) * t.fy;
            let w11 = t.fx * t.fy;
            for ch in 0..c {
                let plane = &src[ch * hw..(ch + 1) * hw];
                out[ch * hw + p] = w00 * at(plane, h, w, t.x0, t.y0)
                    + w10 * at(plane, h, w, t.x0 + 1, t.y0)
                    + w01 * at(plane, h, w, t.x0, t.y0 + 1)
                    + w11 * at(plane, h, w, t.x0 + 1, t.y0 + 1);
            }
        }
    }
}

/// Reverse-mode derivative of [`warp_bilinear_into`]; accumulates into
/// `grad_src` and `grad_flow` when they are given.
#[allow(clippy::too_many_arguments)]
pub fn warp_bilinear_backward<T: Float>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    flow: &[T],
    grad_out: &[T],
    mut grad_src: Option<&mut [T]>,
    mut grad_flow: Option<&mut [T]>,
) {
    let hw = h * w;
    let inside = |x: isize, y: isize| x >= 0 && y >= 0 && x < w as isize && y < h as isize;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let px = T::from(x).unwrap() + flow[p];
            let py = T::from(y).unwrap() + flow[hw + p];
            if !px.is_finite() || !py.is_finite() {
                continue;
            }
            let t = taps(px, py);
            let one = T::one();
            let corners = [
                (t.x0, t.y0, (one - t.fx) * (one - t.fy), -(one - t.fy), -(one - t.fx)),
                (t.x0 + 1, t.y0, t.fx * (one - t.fy), one - t.fy, -t.fx),
                (t.x0, t.y0 + 1, (one - t.fx) * t.fy, -t.fy, one - t.fx),
                (t.x0 + 1, t.y0 + 1, t.fx * t.fy, t.fy, t.fx),
            ];
            let mut du = T::zero();
            let mut dv = T::zero();
            for ch in 0..c {
                let g = grad_out[ch * hw + p];
                if g == T::zero() {
                    continue;
                }
                for &(cx, cy, wt, dwx, dwy) in &corners {
                    if !inside(cx, cy) {
                        continue;
                    }
                    let idx = ch * hw + cy as usize * w + cx as usize;
                    if let Some(gs) = grad_src.as_deref_mut() {
                        gs[idx] = gs[idx] + wt * g;
                    }
                    let s = src[idx];
                    du = du + dwx * s * g;
                    dv = dv + dwy * s * g;
                }
            }
            if let Some(gf) = grad_flow.as_deref_mut() {
                gf[p] = gf[p] + du;
                gf[hw + p] = gf[hw + p] + dv;
            }
        }
    }
}

/// Samples `src` at `(x + u, y + v)` for every pixel; out-of-grid taps read 0.
pub fn warp_bilinear<T: Float>(src: ArrayView3<'_, T>, flow: ArrayView3<'_, T>) -> Result<Array3<T>> {
    let (c, h, w) = src.dim();
    if flow.dim() != (2, h, w) {
        return Err(CoreError::Shape(format!(
            "flow {:?} does not match source {:?}",
            flow.dim(),
            (c, h, w)
        )));
    }
    let src = src.as_standard_layout();
    let flow = flow.as_standard_layout();
    let mut out = vec![T::zero(); c * h * w];
    warp_bilinear_into(
        src.as_slice().unwrap(),
        c,
        h,
        w,
        flow.as_slice().unwrap(),
        &mut out,
    );
    Ok(Array3::from_shape_vec((c, h, w), out).unwrap())
}

/// Warps a complex field by `h` with inverse mapping:
/// `out(p) = field(h^-1(p))`, real and imaginary parts interpolated
/// independently, zero outside the grid.
pub fn warp_complex(field: &Array2<Complex64>, h: &Homography) -> Result<Array2<Complex64>> {
    let (rows, cols) = field.dim();
    let inv = h.inverse()?;
    let flow = homography_to_flow_f64(&inv, rows, cols);
    let mut planes = vec![0.0f64; 2 * rows * cols];
    for (i, v) in field.iter().enumerate() {
        planes[i] = v.re;
        planes[rows * cols + i] = v.im;
    }
    let mut out = vec![0.0f64; 2 * rows * cols];
    warp_bilinear_into(&planes, 2, rows, cols, &flow, &mut out);
    let n = rows * cols;
    Ok(Array2::from_shape_fn((rows, cols), |(y, x)| {
        let i = y * cols + x;
        Complex64::new(out[i], out[n + i])
    }))
}

fn homography_to_flow_f64(h: &Homography, rows: usize, cols: usize) -> Vec<f64> {
    let n = rows * cols;
    let mut flow = vec![0.0; 2 * n];
    for y in 0..rows {
        for x in 0..cols {
            let i = y * cols + x;
            match h.apply_point(x as f64, y as f64) {
                Some((xp, yp)) => {
                    flow[i] = xp - x as f64;
                    flow[n + i] = yp - y as f64;
                }
                None => {
                    flow[i] = f64::INFINITY;
                    flow[n + i] = f64::INFINITY;
                }
            }
        }
    }
    flow
}

/// A frame together with its position in the clip.
#[derive(Debug, Clone, Copy)]
pub struct FrameRef<'a> {
    pub index: usize,
    pub data: ArrayView3<'a, f32>,
}

/// Source of the motion used to align frame features.
pub trait FlowEstimator {
    /// Flow on the reference grid pointing into the target frame, so that
    /// `warp_bilinear(target, flow)` lands in reference coordinates.
    fn estimate(&self, reference: FrameRef<'_>, target: FrameRef<'_>) -> Result<FlowField>;
}

pub struct ZeroFlow;

impl FlowEstimator for ZeroFlow {
    fn estimate(&self, reference: FrameRef<'_>, _target: FrameRef<'_>) -> Result<FlowField> {
        let (_, h, w) = reference.data.dim();
        Ok(FlowField::zeros(h, w))
    }
}

/// Exact motion from the per-frame homographies recorded at synthesis time.
///
/// Entry `t` is `H_{t-1 -> t}`; entry 0 is the identity.
#[derive(Debug, Clone)]
pub struct KnownMotion {
    homographies: Vec<Homography>,
}

impl KnownMotion {
    pub fn new(homographies: Vec<Homography>) -> Self {
        KnownMotion { homographies }
    }

    /// Fails when no motion record is available.
    pub fn from_record(homographies: Option<&[Homography]>) -> Result<Self> {
        homographies
            .map(|h| KnownMotion::new(h.to_vec()))
            .ok_or_else(|| {
                CoreError::Manifest("known-motion flow requested without a manifest".into())
            })
    }

    pub fn len(&self) -> usize {
        self.homographies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.homographies.is_empty()
    }

    pub fn homographies(&self) -> &[Homography] {
        &self.homographies
    }

    /// The transform taking frame `from` coordinates to frame `to` coordinates.
    pub fn between(&self, from: usize, to: usize) -> Result<Homography> {
        let n = self.homographies.len();
        if from >= n || to >= n {
            return Err(CoreError::Shape(format!(
                "frame pair ({from}, {to}) outside motion record of {n}"
            )));
        }
        if to >= from {
            Ok(self.homographies[from + 1..=to]
                .iter()
                .fold(Homography::identity(), |acc, h| h.compose(&acc)))
        } else {
            self.between(to, from)?.inverse()
        }
    }

    pub fn flow(&self, reference: usize, target: usize, shape: (usize, usize)) -> Result<FlowField> {
        homography_to_flow(&self.between(reference, target)?, shape)
    }
}

impl FlowEstimator for KnownMotion {
    fn estimate(&self, reference: FrameRef<'_>, target: FrameRef<'_>) -> Result<FlowField> {
        let (_, h, w) = reference.data.dim();
        self.flow(reference.index, target.index, (h, w))
    }
}

pub fn estimate_flow(
    reference: FrameRef<'_>,
    target: FrameRef<'_>,
    estimator: &dyn FlowEstimator,
) -> Result<FlowField> {
    if reference.data.dim() != target.data.dim() {
        return Err(CoreError::Shape(format!(
            "frames differ: {:?} vs {:?}",
            reference.data.dim(),
            target.data.dim()
        )));
    }
    estimator.estimate(reference, target)
}
