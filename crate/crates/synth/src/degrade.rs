use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use udcvr_core::config::{SynthConfig, ToneMap};
use udcvr_core::geometry::{homography_to_flow, FlowField};
use udcvr_core::{Colorspace, FrameStack};

use crate::error::{Result, SynthError};
use crate::fft::fft2;
use crate::motion::MotionScript;
use crate::psf::{psf_transform, Psf};

/// Photometric parameters of one clip's degradation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradeParams {
    pub gamma: f64,
    pub noise_sigma: f64,
    pub clamp_hi: f64,
    pub tone_map: ToneMap,
    /// Brightness gain multiplying the whole clip before anything else.
    pub gain: f64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        DegradeParams {
            gamma: 1.0,
            noise_sigma: 0.0,
            clamp_hi: 1.0,
            tone_map: ToneMap::Linear,
            gain: 1.0,
        }
    }
}

impl DegradeParams {
    /// Draws per-clip values from the configured ranges: gamma and noise
    /// uniformly, gain log-uniformly.
    pub fn sample(cfg: &SynthConfig, rng: &mut impl Rng) -> Self {
        let uniform = |rng: &mut dyn rand::RngCore, [lo, hi]: [f64; 2]| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let gamma = uniform(rng, cfg.gamma_range);
        let noise_sigma = uniform(rng, cfg.noise_sigma_range);
        let [glo, ghi] = cfg.brightness_gain_range;
        let gain = uniform(rng, [glo.ln(), ghi.ln()]).exp();
        DegradeParams {
            gamma,
            noise_sigma,
            clamp_hi: cfg.clamp_hi,
            tone_map: cfg.tone_map,
            gain,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.gamma.is_finite()
            && self.gamma > 0.0
            && self.noise_sigma.is_finite()
            && self.noise_sigma >= 0.0
            && self.clamp_hi > 0.0
            && self.clamp_hi <= 1.0
            && self.gain.is_finite()
            && self.gain > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SynthError::Invalid(format!("invalid degradation parameters {self:?}")))
        }
    }
}

/// Circular convolution of channel `c` of `frame` with a centred kernel:
/// `out(y, x) = sum_{i,j} k(i, j) * frame((y - i + r) mod H, (x - j + r) mod W)`.
/// Sparse kernels are summed directly (exact for a delta), dense ones go
/// through the FFT.
pub(crate) fn circular_convolve(frame: ArrayView3<'_, f32>, c: usize, k: ArrayView2<'_, f64>) -> Array2<f64> {
    let (_, h, w) = frame.dim();
    let nnz = k.iter().filter(|v| **v != 0.0).count();
    let n = (h * w) as f64;
    let fft_cost = 12.0 * n * (n.log2() + 1.0);
    if (nnz as f64) * n <= fft_cost {
        convolve_direct(frame, c, k)
    } else {
        convolve_fft(frame, c, k)
    }
}

pub(crate) fn convolve_direct(frame: ArrayView3<'_, f32>, c: usize, k: ArrayView2<'_, f64>) -> Array2<f64> {
    let (_, h, w) = frame.dim();
    let r = k.nrows() as isize / 2;
    let mut out = Array2::zeros((h, w));
    for ((i, j), &v) in k.indexed_iter() {
        if v == 0.0 {
            continue;
        }
        let dy = (i as isize - r).rem_euclid(h as isize) as usize;
        let dx = (j as isize - r).rem_euclid(w as isize) as usize;
        for y in 0..h {
            let sy = (y + h - dy) % h;
            for x in 0..w {
                out[(y, x)] += v * frame[(c, sy, (x + w - dx) % w)] as f64;
            }
        }
    }
    out
}

pub(crate) fn convolve_fft(frame: ArrayView3<'_, f32>, c: usize, k: ArrayView2<'_, f64>) -> Array2<f64> {
    let (_, h, w) = frame.dim();
    let r = k.nrows() as isize / 2;
    let mut img = Array2::from_shape_fn((h, w), |(y, x)| Complex64::new(frame[(c, y, x)] as f64, 0.0));
    let mut ker = Array2::from_elem((h, w), Complex64::default());
    for ((i, j), &v) in k.indexed_iter() {
        let dy = (i as isize - r).rem_euclid(h as isize) as usize;
        let dx = (j as isize - r).rem_euclid(w as isize) as usize;
        ker[(dy, dx)].re += v;
    }
    fft2(&mut img, false);
    fft2(&mut ker, false);
    img.zip_mut_with(&ker, |a, b| *a *= b);
    fft2(&mut img, true);
    img.mapv(|v| v.re)
}

/// Applies `f(gamma * (gt conv k) + n)` to one linear frame. Noise is drawn
/// before saturation; the output is in display range `[0, clamp_hi]`.
pub fn degrade_frame(gt: ArrayView3<'_, f32>, k: &Psf, p: &DegradeParams, rng: &mut impl Rng) -> Result<Array3<f32>> {
    p.validate()?;
    let (c, h, w) = gt.dim();
    if k.channels() != 1 && k.channels() != c {
        return Err(SynthError::Invalid(format!(
            "{}-channel PSF cannot blur a {c}-channel frame",
            k.channels()
        )));
    }
    let noise = if p.noise_sigma > 0.0 {
        Some(Normal::new(0.0, p.noise_sigma).expect("sigma validated"))
    } else {
        None
    };
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let blurred = circular_convolve(gt, ch, k.for_channel(ch));
        for ((y, x), &v) in blurred.indexed_iter() {
            let mut v = p.gamma * v;
            if let Some(n) = &noise {
                v += n.sample(rng);
            }
            out[(ch, y, x)] = p.tone_map.apply(v.clamp(0.0, p.clamp_hi) as f32);
        }
    }
    Ok(out)
}

/// Display-space training target for a linear clip: clamp then tone map.
pub fn display_reference(clean: &FrameStack, clamp_hi: f64, tone_map: ToneMap) -> FrameStack {
    let data = clean
        .data()
        .mapv(|v| tone_map.apply(v.clamp(0.0, clamp_hi as f32)));
    FrameStack::new(data, Colorspace::DisplayClamped).expect("clamped frames are valid")
}

#[derive(Debug, Clone)]
pub struct SynthClip {
    /// Linear source after the brightness gain.
    pub clean: FrameStack,
    pub degraded: FrameStack,
    pub psfs: Vec<Psf>,
    /// `flows[t]` is `H_{t-1 -> t}` as a field on frame `t-1`; `flows[0]` is zero.
    pub flows: Vec<FlowField>,
}

/// Degrades a clip with a kernel that evolves frame to frame under the
/// scripted camera motion.
pub fn synthesize_clip(
    gt: &FrameStack,
    k0: &Psf,
    script: &MotionScript,
    p: &DegradeParams,
    rng: &mut impl Rng,
) -> Result<SynthClip> {
    p.validate()?;
    let t_len = gt.len();
    if script.homographies.len() + 1 != t_len {
        return Err(SynthError::Invalid(format!(
            "motion script has {} transforms for {t_len} frames",
            script.homographies.len()
        )));
    }
    let (h, w) = gt.frame_dims();
    let clean = FrameStack::new(gt.data().mapv(|v| v * p.gain as f32), Colorspace::LinearHdr)?;
    let frame_centre = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let r = (k0.size() / 2) as f64;

    let mut psfs = vec![k0.clone()];
    let mut flows = vec![FlowField::zeros(h, w)];
    for hom in &script.homographies {
        let local = hom.recentered(frame_centre, (r, r));
        psfs.push(psf_transform(psfs.last().unwrap(), &local)?);
        flows.push(homography_to_flow(hom, (h, w))?);
    }
    let frames = clean
        .frames()
        .zip(&psfs)
        .map(|(f, k)| degrade_frame(f, k, p, rng))
        .collect::<Result<Vec<_>>>()?;
    let degraded = FrameStack::from_frames(&frames, Colorspace::DisplayClamped)?;
    Ok(SynthClip {
        clean,
        degraded,
        psfs,
        flows,
    })
}
