//! 2-D FFTs on `ndarray` planes, plus the centred (zero frequency in the
//! middle) variants used for aperture fields.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;

fn fft_axis(a: &mut Array2<Complex64>, axis: usize, inverse: bool, planner: &mut FftPlanner<f64>) {
    let n = a.len_of(ndarray::Axis(axis));
    let plan = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let mut buf = vec![Complex64::default(); n];
    for mut lane in a.lanes_mut(ndarray::Axis(axis)) {
        for (b, v) in buf.iter_mut().zip(lane.iter()) {
            *b = *v;
        }
        plan.process(&mut buf);
        for (v, b) in lane.iter_mut().zip(&buf) {
            *v = *b;
        }
    }
}

/// Unnormalised forward DFT, or the inverse scaled by `1/N`.
pub(crate) fn fft2(a: &mut Array2<Complex64>, inverse: bool) {
    let mut planner = FftPlanner::new();
    fft_axis(a, 1, inverse, &mut planner);
    fft_axis(a, 0, inverse, &mut planner);
    if inverse {
        let n = a.len() as f64;
        a.mapv_inplace(|v| v / n);
    }
}

/// Circularly shifts so index `(r, c)` moves to `(r + dr, c + dc)`.
fn roll(a: &Array2<Complex64>, dr: usize, dc: usize) -> Array2<Complex64> {
    let (rows, cols) = a.dim();
    Array2::from_shape_fn((rows, cols), |(r, c)| a[((r + rows - dr % rows) % rows, (c + cols - dc % cols) % cols)])
}

pub(crate) fn fftshift(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (rows, cols) = a.dim();
    roll(a, rows / 2, cols / 2)
}

pub(crate) fn ifftshift(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (rows, cols) = a.dim();
    roll(a, rows - rows / 2, cols - cols / 2)
}

/// DFT of a centred signal with the zero frequency placed at the centre.
pub(crate) fn centered_fft(a: &Array2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let mut t = ifftshift(a);
    fft2(&mut t, inverse);
    fftshift(&t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shifts_are_inverse_for_odd_and_even_sizes() {
        for (r, c) in [(5, 5), (4, 6), (7, 4)] {
            let a = Array2::from_shape_fn((r, c), |(y, x)| Complex64::new((y * c + x) as f64, 0.0));
            assert_eq!(ifftshift(&fftshift(&a)), a);
        }
    }

    #[test]
    fn centered_delta_has_flat_magnitude() {
        let mut a = Array2::from_elem((7, 7), Complex64::default());
        a[(3, 3)] = Complex64::new(1.0, 0.0);
        let f = centered_fft(&a, false);
        for v in f.iter() {
            assert!((v.norm() - 1.0).abs() < 1e-12);
            // a centred delta has no phase ramp either
            assert!(v.im.abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip() {
        let a = Array2::from_shape_fn((6, 5), |(y, x)| Complex64::new((y as f64).sin() + x as f64, (x as f64).cos()));
        let back = centered_fft(&centered_fft(&a, true), false);
        for (p, q) in a.iter().zip(back.iter()) {
            assert!((p - q).norm() < 1e-12);
        }
    }
}
