//! Procedural linear-HDR scenes: smooth textured backgrounds with a few
//! small, very bright light sources. Rendering goes through the exact
//! inverse of the cumulative camera motion, so recorded flows are exact.

use ndarray::Array3;
use rand::Rng;
use udcvr_core::geometry::{homography_to_flow, warp_bilinear, Homography};
use udcvr_core::{Colorspace, FrameStack};

use crate::error::Result;

#[derive(Debug, Clone)]
struct Blob {
    x: f64,
    y: f64,
    radius: f64,
    colour: [f64; 3],
}

#[derive(Debug, Clone)]
struct Grating {
    kx: f64,
    ky: f64,
    phase: f64,
    amplitude: f64,
    colour: [f64; 3],
}

#[derive(Debug, Clone)]
struct Light {
    x: f64,
    y: f64,
    sigma: f64,
    intensity: f64,
    tint: [f64; 3],
}

#[derive(Debug, Clone)]
struct Panel {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    colour: [f64; 3],
}

/// A continuous scene in frame-0 pixel coordinates.
#[derive(Debug, Clone)]
pub struct Scene {
    base: [f64; 3],
    slope: [f64; 2],
    blobs: Vec<Blob>,
    gratings: Vec<Grating>,
    panels: Vec<Panel>,
    lights: Vec<Light>,
}

fn colour(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn smoothstep(e: f64) -> f64 {
    let t = e.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl Scene {
    /// Random scene sized for `height x width` frames.
    pub fn random(height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let (h, w) = (height as f64, width as f64);
        let pos = |rng: &mut dyn rand::RngCore| {
            (
                rng.random_range(-0.2 * w..1.2 * w),
                rng.random_range(-0.2 * h..1.2 * h),
            )
        };
        let scale = w.min(h);
        let blobs = (0..rng.random_range(4..9))
            .map(|_| {
                let (x, y) = pos(rng);
                Blob {
                    x,
                    y,
                    radius: rng.random_range(0.06..0.25) * scale,
                    colour: colour(rng, 0.0, 0.35),
                }
            })
            .collect();
        let gratings = (0..rng.random_range(1..3))
            .map(|_| {
                let period = rng.random_range(3.0..12.0);
                let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let k = 2.0 * std::f64::consts::PI / period;
                Grating {
                    kx: k * angle.cos(),
                    ky: k * angle.sin(),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    amplitude: rng.random_range(0.02..0.08),
                    colour: colour(rng, 0.3, 1.0),
                }
            })
            .collect();
        let panels = (0..rng.random_range(1..4))
            .map(|_| {
                let (x, y) = pos(rng);
                Panel {
                    x0: x,
                    y0: y,
                    x1: x + rng.random_range(0.1..0.3) * scale,
                    y1: y + rng.random_range(0.1..0.3) * scale,
                    colour: colour(rng, 0.0, 0.3),
                }
            })
            .collect();
        let lights = (0..rng.random_range(1..4))
            .map(|_| {
                let x = rng.random_range(0.1 * w..0.9 * w);
                let y = rng.random_range(0.1 * h..0.9 * h);
                let warm = rng.random_range(0.7..1.0);
                Light {
                    x,
                    y,
                    sigma: rng.random_range(0.8..2.5),
                    intensity: rng.random_range(1.5..6.0),
                    tint: [1.0, warm, warm * warm],
                }
            })
            .collect();
        Scene {
            base: colour(rng, 0.02, 0.12),
            slope: [rng.random_range(-0.1..0.1) / w, rng.random_range(-0.1..0.1) / h],
            blobs,
            gratings,
            panels,
            lights,
        }
    }

    /// Linear radiance at a scene point.
    pub fn radiance(&self, x: f64, y: f64) -> [f64; 3] {
        let ramp = self.slope[0] * x + self.slope[1] * y;
        let mut v = self.base.map(|b| b + ramp);
        for b in &self.blobs {
            let d2 = ((x - b.x).powi(2) + (y - b.y).powi(2)) / (b.radius * b.radius);
            let a = (-0.5 * d2).exp();
            for c in 0..3 {
                v[c] += a * b.colour[c];
            }
        }
        for g in &self.gratings {
            let a = g.amplitude * (g.kx * x + g.ky * y + g.phase).sin();
            for c in 0..3 {
                v[c] += a * g.colour[c];
            }
        }
        for p in &self.panels {
            let inside = smoothstep(x - p.x0) * smoothstep(p.x1 - x) * smoothstep(y - p.y0) * smoothstep(p.y1 - y);
            for c in 0..3 {
                v[c] += inside * p.colour[c];
            }
        }
        for l in &self.lights {
            let d2 = (x - l.x).powi(2) + (y - l.y).powi(2);
            let a = l.intensity * (-d2 / (2.0 * l.sigma * l.sigma)).exp();
            for c in 0..3 {
                v[c] += a * l.tint[c];
            }
        }
        v.map(|c| c.max(0.0))
    }
}

/// Renders frame `t` as `scene(G_t^-1 p)`, 2x2 supersampled.
pub fn render_clip(scene: &Scene, height: usize, width: usize, cumulative: &[Homography]) -> Result<FrameStack> {
    const OFFS: [f64; 2] = [-0.25, 0.25];
    let frames = cumulative
        .iter()
        .map(|g| {
            let inv = g.inverse()?;
            let mut f = Array3::zeros((3, height, width));
            for y in 0..height {
                for x in 0..width {
                    let mut acc = [0.0; 3];
                    for dy in OFFS {
                        for dx in OFFS {
                            let (sx, sy) = inv
                                .apply_point(x as f64 + dx, y as f64 + dy)
                                .unwrap_or((f64::INFINITY, f64::INFINITY));
                            let r = if sx.is_finite() && sy.is_finite() {
                                scene.radiance(sx, sy)
                            } else {
                                [0.0; 3]
                            };
                            for c in 0..3 {
                                acc[c] += r[c] / 4.0;
                            }
                        }
                    }
                    for c in 0..3 {
                        f[(c, y, x)] = acc[c] as f32;
                    }
                }
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameStack::from_frames(&frames, Colorspace::LinearHdr)?)
}

/// Imposes scripted camera motion on recorded frames: frame `t` is resampled
/// through `G_t^-1` (zero outside the source).
pub fn apply_motion(clip: &FrameStack, cumulative: &[Homography]) -> Result<FrameStack> {
    let (h, w) = clip.frame_dims();
    let frames = clip
        .frames()
        .zip(cumulative)
        .map(|(f, g)| {
            let flow = homography_to_flow(&g.inverse()?, (h, w))?;
            Ok(warp_bilinear(f, flow.uv().view())?.mapv(|v: f32| v.max(0.0)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameStack::from_frames(&frames, clip.colorspace())?)
}
