use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use udcvr_core::config::{PsfConfig, PsfKind};
use udcvr_core::geometry::{warp_complex, Homography};
use udcvr_core::CoreError;

use crate::error::{Result, SynthError};
use crate::fft::centered_fft;

const MAGIC: &str = "udcvr-psf 1";

/// Nonnegative `C x K x K` blur kernel (C is 1 or 3, K odd), each channel
/// summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Psf {
    k: Array3<f64>,
}

impl Psf {
    /// Validates and normalises each channel to unit sum.
    pub fn new(k: Array3<f64>) -> Result<Self> {
        let mut p = Self::checked(k)?;
        p.normalize();
        Ok(p)
    }

    fn checked(k: Array3<f64>) -> Result<Self> {
        let (c, h, w) = k.dim();
        if c != 1 && c != 3 {
            return Err(SynthError::Psf(format!("expected 1 or 3 channels, got {c}")));
        }
        if h != w {
            return Err(SynthError::Psf(format!("kernel must be square, got {h}x{w}")));
        }
        if h % 2 == 0 {
            return Err(SynthError::Psf(format!("kernel size must be odd, got {h}")));
        }
        if let Some(v) = k.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(SynthError::Psf(format!("taps must be finite and nonnegative, found {v}")));
        }
        for (ch, plane) in k.outer_iter().enumerate() {
            if plane.sum() <= 0.0 {
                return Err(SynthError::Psf(format!("channel {ch} has zero energy")));
            }
        }
        Ok(Psf { k })
    }

    fn normalize(&mut self) {
        for mut plane in self.k.outer_iter_mut() {
            let s = plane.sum();
            plane.mapv_inplace(|v| v / s);
        }
    }

    /// All mass on the centre tap.
    pub fn delta(channels: usize, size: usize) -> Result<Self> {
        let mut k = Array3::zeros((channels, size, size));
        for ch in 0..channels {
            k[(ch, size / 2, size / 2)] = 1.0;
        }
        Psf::new(k)
    }

    pub fn kernel(&self) -> &Array3<f64> {
        &self.k
    }

    pub fn channels(&self) -> usize {
        self.k.len_of(Axis(0))
    }

    pub fn size(&self) -> usize {
        self.k.len_of(Axis(1))
    }

    /// Kernel applied to image channel `c` (single-channel kernels broadcast).
    pub fn for_channel(&self, c: usize) -> ArrayView2<'_, f64> {
        let idx = if self.channels() == 1 { 0 } else { c };
        self.k.index_axis(Axis(0), idx)
    }
}

/// Reads the text kernel format: a magic line, `channels`, `size` and
/// `normalized` header lines, then `size` rows per channel of
/// whitespace-separated values.
pub fn load_psf(path: &Path) -> Result<Psf> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let bad = |msg: String| SynthError::Psf(format!("{}: {msg}", path.display()));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    if lines.next().map(str::trim) != Some(MAGIC) {
        return Err(bad(format!("missing '{MAGIC}' header")));
    }
    let mut header = |key: &str| -> Result<usize> {
        let line = lines.next().ok_or_else(|| bad(format!("missing '{key}' line")))?;
        let mut it = line.split_whitespace();
        match (it.next(), it.next().and_then(|v| v.parse().ok())) {
            (Some(k), Some(v)) if k == key => Ok(v),
            _ => Err(bad(format!("expected '{key} <int>', got '{line}'"))),
        }
    };
    let channels = header("channels")?;
    let size = header("size")?;
    let normalized = header("normalized")? != 0;
    let values: Vec<f64> = lines
        .flat_map(str::split_whitespace)
        .map(|tok| tok.parse::<f64>().map_err(|_| bad(format!("bad value '{tok}'"))))
        .collect::<Result<_>>()?;
    if values.len() != channels * size * size {
        return Err(bad(format!(
            "expected {} values for {channels}x{size}x{size}, found {}",
            channels * size * size,
            values.len()
        )));
    }
    let k = Array3::from_shape_vec((channels, size, size), values).expect("length checked");
    let mut psf = Psf::checked(k).map_err(|e| bad(e.to_string()))?;
    // Kernels we wrote ourselves are already unit-sum; renormalising them
    // would perturb the last bits and break lossless round trips.
    let unit = psf.k.outer_iter().all(|p| (p.sum() - 1.0).abs() < 1e-9);
    if !(normalized && unit) {
        psf.normalize();
    }
    Ok(psf)
}

pub fn save_psf(psf: &Psf, path: &Path) -> Result<()> {
    let (c, k, _) = psf.k.dim();
    let mut out = format!("{MAGIC}\nchannels {c}\nsize {k}\nnormalized 1\n");
    for plane in psf.k.outer_iter() {
        for row in plane.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| CoreError::io(path, e).into())
}

/// Evolves a kernel under camera motion: the intensity kernel's square root
/// is taken as an aperture spectrum, brought to the aperture plane, warped by
/// `h^-1`, propagated back and squared. `h` must be expressed about the
/// kernel centre.
pub fn psf_transform(prev: &Psf, h: &Homography) -> Result<Psf> {
    let h_inv = h.inverse()?;
    let (c, k, _) = prev.k.dim();
    let mut out = Array3::zeros((c, k, k));
    for ch in 0..c {
        let amp = prev.k.index_axis(Axis(0), ch).mapv(|v| Complex64::new(v.sqrt(), 0.0));
        let aperture = centered_fft(&amp, true);
        let warped = warp_complex(&aperture, &h_inv)?;
        let spectrum = centered_fft(&warped, false);
        out.index_axis_mut(Axis(0), ch).assign(&spectrum.mapv(|v| v.norm_sqr()));
    }
    Psf::new(out)
}

fn gaussian_plane(size: usize, sigma: f64) -> Array2<f64> {
    let r = (size / 2) as f64;
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (dx, dy) = (x as f64 - r, y as f64 - r);
        (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
    })
}

fn sinc2(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let a = std::f64::consts::PI * x;
        (a.sin() / a).powi(2)
    }
}

/// Normalised `|sum_{n<order} e^{i 2 pi n x / period}|^2`: unit peaks at
/// multiples of `period`.
fn comb(x: f64, period: f64, order: usize) -> f64 {
    let a = std::f64::consts::PI * x / period;
    let s = a.sin();
    if s.abs() < 1e-12 {
        1.0
    } else {
        ((order as f64 * a).sin() / (order as f64 * s)).powi(2)
    }
}

/// Separable sinc-envelope times periodic comb, the 1-D profile of a grating
/// of `order` coherent apertures.
fn diffraction_profile(x: f64, p: &PsfConfig, spread: f64) -> f64 {
    let x = x / spread;
    sinc2(x / p.envelope) * comb(x, p.period, p.order)
}

/// Builds a synthetic kernel from configuration.
pub fn make_synthetic_psf(p: &PsfConfig) -> Result<Psf> {
    let size = p.size;
    if size == 0 || size % 2 == 0 {
        return Err(SynthError::Psf(format!("kernel size must be odd, got {size}")));
    }
    if p.channels != 1 && p.channels != 3 {
        return Err(SynthError::Psf(format!("expected 1 or 3 channels, got {}", p.channels)));
    }
    let mut k = Array3::zeros((p.channels, size, size));
    match p.kind {
        PsfKind::Gaussian => {
            if !(p.sigma.is_finite() && p.sigma > 0.0) {
                return Err(SynthError::Psf(format!("gaussian sigma must be > 0, got {}", p.sigma)));
            }
            let g = gaussian_plane(size, p.sigma);
            for mut plane in k.outer_iter_mut() {
                plane.assign(&g);
            }
        }
        PsfKind::DiffractionLike => {
            let valid = p.period > 0.0
                && p.envelope > 0.0
                && p.order >= 1
                && (0.0..1.0).contains(&p.halo)
                && p.channel_spread.iter().all(|s| s.is_finite() && *s > 0.0);
            if !valid {
                return Err(SynthError::Psf(format!("invalid diffraction parameters {p:?}")));
            }
            let r = (size / 2) as f64;
            let halo = gaussian_plane(size, size as f64 / 6.0);
            let halo = &halo / halo.sum();
            for ch in 0..p.channels {
                let spread = if p.channels == 1 { 1.0 } else { p.channel_spread[ch] };
                let prof: Vec<f64> = (0..size).map(|i| diffraction_profile(i as f64 - r, p, spread)).collect();
                let core = Array2::from_shape_fn((size, size), |(y, x)| prof[y] * prof[x]);
                let core = &core / core.sum();
                k.index_axis_mut(Axis(0), ch)
                    .assign(&(core * (1.0 - p.halo) + &halo * p.halo));
            }
        }
        PsfKind::File => return load_psf(Path::new(&p.path)),
    }
    Psf::new(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(sigma: f64, size: usize) -> PsfConfig {
        PsfConfig {
            kind: PsfKind::Gaussian,
            sigma,
            size,
            channels: 1,
            ..PsfConfig::default()
        }
    }

    #[test]
    fn uniform_grid_normalises() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.psf");
        let body = "0.04 ".repeat(5).trim().to_string() + "\n";
        fs::write(&path, format!("{MAGIC}\nchannels 1\nsize 5\nnormalized 0\n{}", body.repeat(5))).unwrap();
        let p = load_psf(&path).unwrap();
        for v in p.kernel() {
            assert!((v - 1.0 / 25.0).abs() < 1e-15);
        }
    }

    #[test]
    fn negative_tap_and_even_size_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.psf");
        fs::write(&path, format!("{MAGIC}\nchannels 1\nsize 3\nnormalized 0\n1 1 1\n1 -1 1\n1 1 1\n")).unwrap();
        assert!(matches!(load_psf(&path), Err(SynthError::Psf(_))));
        fs::write(&path, format!("{MAGIC}\nchannels 1\nsize 2\nnormalized 0\n1 1\n1 1\n")).unwrap();
        let err = load_psf(&path).unwrap_err().to_string();
        assert!(err.contains("odd"), "{err}");
        assert!(Psf::new(Array3::ones((2, 3, 3))).is_err());
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.psf");
        let p = make_synthetic_psf(&PsfConfig::default()).unwrap();
        save_psf(&p, &path).unwrap();
        let q = load_psf(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn tiny_gaussian_is_a_delta() {
        let p = make_synthetic_psf(&gauss(1e-3, 7)).unwrap();
        let d = Psf::delta(1, 7).unwrap();
        for (a, b) in p.kernel().iter().zip(d.kernel()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gaussian_is_flip_symmetric() {
        let p = make_synthetic_psf(&gauss(1.0, 11)).unwrap();
        let k = p.kernel().index_axis(Axis(0), 0);
        for y in 0..11 {
            for x in 0..11 {
                assert_eq!(k[(y, x)], k[(y, 10 - x)]);
                assert_eq!(k[(y, x)], k[(10 - y, x)]);
            }
        }
    }

    #[test]
    fn diffraction_kernel_has_central_peak_and_sidelobes() {
        let p = make_synthetic_psf(&PsfConfig::default()).unwrap();
        assert_eq!(p.size(), 31);
        for plane in p.kernel().outer_iter() {
            let c = plane[(15, 15)];
            assert!(plane.iter().all(|&v| v <= c));
            let row = plane.row(15);
            let col = plane.column(15);
            for line in [row, col] {
                let maxima = (1..30).filter(|&i| line[i] > line[i - 1] && line[i] > line[i + 1]).count();
                assert!(maxima >= 2, "{maxima} local maxima");
            }
        }
    }

    #[test]
    fn identity_transform_preserves_kernel() {
        for cfg in [PsfConfig::default(), gauss(1.5, 9), gauss(1e-3, 5)] {
            let p = make_synthetic_psf(&cfg).unwrap();
            let q = psf_transform(&p, &Homography::identity()).unwrap();
            for (a, b) in p.kernel().iter().zip(q.kernel()) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn transform_output_is_a_valid_kernel() {
        let p = make_synthetic_psf(&PsfConfig::default()).unwrap();
        let h = Homography::rotation_about(0.2, 15.0, 15.0)
            .compose(&Homography::new([[1.03, 0.01, 0.2], [0.0, 0.98, -0.3], [1e-4, 0.0, 1.0]]).unwrap());
        let q = psf_transform(&p, &h).unwrap();
        for plane in q.kernel().outer_iter() {
            assert!((plane.sum() - 1.0).abs() < 1e-6);
            assert!(plane.iter().all(|&v| v >= 0.0));
        }
        assert_ne!(p, q);
    }

    #[test]
    fn small_translations_compose() {
        // A compact kernel: bilinear resampling of the aperture acts as a
        // low-pass on the kernel, so broad kernels drift more per step.
        let p = make_synthetic_psf(&gauss(1.5, 15)).unwrap();
        let h1 = Homography::translation(0.1, 0.1);
        let h2 = Homography::translation(0.1, -0.1);
        let seq = psf_transform(&psf_transform(&p, &h1).unwrap(), &h2).unwrap();
        let once = psf_transform(&p, &h2.compose(&h1)).unwrap();
        let diff = seq
            .kernel()
            .iter()
            .zip(once.kernel())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-2, "{diff}");
    }

    #[test]
    fn whole_pixel_translations_compose_closely() {
        let p = make_synthetic_psf(&PsfConfig::default()).unwrap();
        let h1 = Homography::translation(1.0, 0.0);
        let h2 = Homography::translation(0.0, -2.0);
        let seq = psf_transform(&psf_transform(&p, &h1).unwrap(), &h2).unwrap();
        let once = psf_transform(&p, &h2.compose(&h1)).unwrap();
        for (a, b) in seq.kernel().iter().zip(once.kernel()) {
            assert!((a - b).abs() < 1e-5, "{a} {b}");
        }
    }

    #[test]
    fn singular_homography_is_an_error() {
        let p = Psf::delta(1, 5).unwrap();
        assert!(Homography::new([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]).is_err()
            || psf_transform(&p, &Homography::new([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]).unwrap()).is_err());
    }
}
