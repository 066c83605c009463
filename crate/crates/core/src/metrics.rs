//! Full-reference quality metrics and evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{ArrayView, ArrayView2, ArrayView3, Dimension};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::frame::FrameStack;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// `10 log10(peak^2 / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr<D: Dimension>(x: ArrayView<'_, f32, D>, y: ArrayView<'_, f32, D>, peak: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(CoreError::Shape(format!(
            "psnr inputs differ: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if x.is_empty() {
        return Err(CoreError::Shape("psnr of empty arrays".into()));
    }
    let mut sse = 0.0f64;
    for (a, b) in x.iter().zip(y.iter()) {
        let d = *a as f64 - *b as f64;
        sse += d * d;
    }
    Ok(psnr_from_mse(sse / x.len() as f64, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable 'valid' filtering of an `h x w` plane with the SSIM window.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-channel SSIM over the valid region of an 11x11 Gaussian window.
pub fn ssim_plane(x: ArrayView2<'_, f32>, y: ArrayView2<'_, f32>) -> Result<f64> {
    let (h, w) = x.dim();
    if y.dim() != (h, w) {
        return Err(CoreError::Shape(format!("ssim planes differ: {:?} vs {:?}", x.dim(), y.dim())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::Shape(format!(
            "frame {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let g = gaussian_window();
    let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let ys: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
    let mx = filter_valid(&xs, h, w, &g);
    let my = filter_valid(&ys, h, w, &g);
    let sxx = filter_valid(&xx, h, w, &g);
    let syy = filter_valid(&yy, h, w, &g);
    let sxy = filter_valid(&xy, h, w, &g);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut acc = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
            / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(acc / mx.len() as f64)
}

/// SSIM of two `C x H x W` frames, averaged over channels.
pub fn ssim(x: ArrayView3<'_, f32>, y: ArrayView3<'_, f32>) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(CoreError::Shape(format!("ssim inputs differ: {:?} vs {:?}", x.dim(), y.dim())));
    }
    let c = x.dim().0;
    let mut acc = 0.0;
    for ch in 0..c {
        acc += ssim_plane(x.index_axis(ndarray::Axis(0), ch), y.index_axis(ndarray::Axis(0), ch))?;
    }
    Ok(acc / c as f64)
}

/// Mean SSIM over the frames of two clips.
pub fn ssim_clip(x: &FrameStack, y: &FrameStack) -> Result<f64> {
    if x.data().dim() != y.data().dim() {
        return Err(CoreError::Shape("clips differ in shape".into()));
    }
    let mut acc = 0.0;
    for t in 0..x.len() {
        acc += ssim(x.frame(t), y.frame(t))?;
    }
    Ok(acc / x.len() as f64)
}

mod db {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Num {
            F(f64),
            S(String),
        }
        match Num::deserialize(d)? {
            Num::F(v) => Ok(v),
            Num::S(s) if s == "inf" => Ok(f64::INFINITY),
            Num::S(s) => Err(serde::de::Error::custom(format!("bad dB value {s:?}"))),
        }
    }
}

pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub id: String,
    pub frames: usize,
    #[serde(with = "db")]
    pub psnr: f64,
    pub ssim: f64,
    /// Reserved column; perceptual metrics are not computed.
    pub lpips: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<ClipScore>,
    #[serde(with = "db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip,frames,psnr_db,ssim,lpips\n");
        for c in &self.clips {
            let _ = writeln!(s, "{},{},{},{:.6},", c.id, c.frames, format_db(c.psnr), c.ssim);
        }
        let _ = writeln!(s, "mean,,{},{:.6},", format_db(self.mean_psnr), self.mean_ssim);
        s
    }

    /// SHA-256 of the JSON form.
    pub fn digest(&self) -> String {
        hex_digest(self.to_json().as_bytes())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json() + "\n").map_err(|e| CoreError::io(&json, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| CoreError::io(&csv, e))
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

fn crop_stack(s: &FrameStack, crop: usize) -> Result<FrameStack> {
    if crop == 0 {
        return Ok(s.clone());
    }
    let (h, w) = s.frame_dims();
    if 2 * crop >= h || 2 * crop >= w {
        return Err(CoreError::Shape(format!("crop {crop} empties a {h}x{w} frame")));
    }
    let data = s
        .data()
        .slice(ndarray::s![.., .., crop..h - crop, crop..w - crop])
        .to_owned();
    FrameStack::new(data, s.colorspace())
}

/// Scores each restored clip against the reference clip with the same id.
pub fn evaluate(
    restored: &[(String, FrameStack)],
    reference: &[(String, FrameStack)],
    crop: usize,
    config_hash: &str,
) -> Result<EvalReport> {
    if reference.is_empty() {
        return Err(CoreError::Invalid("nothing to evaluate: empty clip set".into()));
    }
    let missing: Vec<&str> = reference
        .iter()
        .filter(|(id, _)| !restored.iter().any(|(r, _)| r == id))
        .map(|(id, _)| id.as_str())
        .collect();
    let extra: Vec<&str> = restored
        .iter()
        .filter(|(id, _)| !reference.iter().any(|(r, _)| r == id))
        .map(|(id, _)| id.as_str())
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(CoreError::Invalid(format!(
            "clip sets differ; missing {missing:?}, extra {extra:?}"
        )));
    }
    let mut clips = Vec::with_capacity(reference.len());
    for (id, gt) in reference {
        let out = &restored.iter().find(|(r, _)| r == id).expect("checked above").1;
        if out.data().dim() != gt.data().dim() {
            return Err(CoreError::Shape(format!(
                "clip {id}: restored {:?} vs reference {:?}",
                out.data().dim(),
                gt.data().dim()
            )));
        }
        let (out, gt) = (crop_stack(out, crop)?, crop_stack(gt, crop)?);
        clips.push(ClipScore {
            id: id.clone(),
            frames: gt.len(),
            psnr: psnr(out.data().view(), gt.data().view(), 1.0)?,
            ssim: ssim_clip(&out, &gt)?,
            lpips: None,
        });
    }
    let n = clips.len() as f64;
    let mean_psnr = clips.iter().map(|c| c.psnr).sum::<f64>() / n;
    let mean_ssim = clips.iter().map(|c| c.ssim).sum::<f64>() / n;
    Ok(EvalReport {
        clips,
        mean_psnr,
        mean_ssim,
        config_hash: config_hash.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    use crate::frame::Colorspace;

    #[test]
    fn psnr_examples() {
        let x = Array3::from_elem((3, 8, 8), 0.3f32);
        assert_eq!(psnr(x.view(), x.view(), 1.0).unwrap(), f64::INFINITY);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        let y = Array3::from_elem((3, 8, 8), 0.4f32);
        // the 0.1 offset is not exact in f32
        assert!((psnr(x.view(), y.view(), 1.0).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(x.view(), Array3::zeros((3, 8, 7)).view(), 1.0).is_err());
    }

    #[test]
    fn ssim_examples() {
        let x = Array2::from_shape_fn((16, 16), |(y, x)| ((x * y) % 7) as f32 / 7.0);
        assert!((ssim_plane(x.view(), x.view()).unwrap() - 1.0).abs() < 1e-12);
        let a = Array2::from_elem((12, 12), 0.25f32);
        let b = Array2::from_elem((12, 12), 0.75f32);
        let c1 = 0.01f64 * 0.01;
        let expected = (2.0 * 0.25 * 0.75 + c1) / (0.25f64 * 0.25 + 0.75 * 0.75 + c1);
        assert!((ssim_plane(a.view(), b.view()).unwrap() - expected).abs() < 1e-12);
        assert!(ssim_plane(Array2::zeros((10, 20)).view(), Array2::zeros((10, 20)).view()).is_err());
    }

    #[test]
    fn evaluate_checks_clip_sets() {
        let clip = FrameStack::filled(2, 12, 12, 0.5, Colorspace::DisplayClamped).unwrap();
        let set = vec![("a".to_string(), clip.clone())];
        let r = evaluate(&set, &set, 0, "h").unwrap();
        assert_eq!(r.mean_psnr, f64::INFINITY);
        assert!((r.mean_ssim - 1.0).abs() < 1e-12);
        assert!(r.to_json().contains("\"inf\""));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);

        let other = vec![("b".to_string(), clip)];
        let err = evaluate(&other, &set, 0, "h").unwrap_err().to_string();
        assert!(err.contains("\"a\"") && err.contains("\"b\""), "{err}");
        assert!(evaluate(&[], &[], 0, "h").is_err());
    }
}
