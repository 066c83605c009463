//! Separable bilinear resampling with half-pixel centers.
//!
//! Output sample `i` reads input coordinate `(i + 0.5) * n_in / n_out - 0.5`,
//! clamped to the valid range. Downsampling by 2 is therefore an exact 2x2
//! box average and constants are preserved at every size.

use num_traits::Float;

/// Two interpolation taps per output index: `(i0, w0, i1, w1)`.
pub fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, f64, usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let frac = src - i0 as f64;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, 1.0 - frac, i1, frac)
        })
        .collect()
}

/// Resizes each of `c` planes from `h x w` to `oh x ow`, writing into `out`.
pub fn resize_into<T: Float>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    assert_eq!(src.len(), c * h * w);
    assert_eq!(out.len(), c * oh * ow);
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut rows = vec![T::zero(); oh * w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, wy0, y1, wy1)) in ty.iter().enumerate() {
            let (a, b) = (T::from(wy0).unwrap(), T::from(wy1).unwrap());
            for x in 0..w {
                rows[oy * w + x] = a * plane[y0 * w + x] + b * plane[y1 * w + x];
            }
        }
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            for (ox, &(x0, wx0, x1, wx1)) in tx.iter().enumerate() {
                let (a, b) = (T::from(wx0).unwrap(), T::from(wx1).unwrap());
                dst[oy * ow + ox] = a * rows[oy * w + x0] + b * rows[oy * w + x1];
            }
        }
    }
}

/// Adjoint of [`resize_into`]: accumulates `grad_out` (`c x oh x ow`) back
/// onto `grad_src` (`c x h x w`).
pub fn resize_adjoint_acc<T: Float>(
    grad_out: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    grad_src: &mut [T],
) {
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut rows = vec![T::zero(); oh * w];
    for ch in 0..c {
        rows.iter_mut().for_each(|r| *r = T::zero());
        let g = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            for (ox, &(x0, wx0, x1, wx1)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                rows[oy * w + x0] = rows[oy * w + x0] + T::from(wx0).unwrap() * v;
                rows[oy * w + x1] = rows[oy * w + x1] + T::from(wx1).unwrap() * v;
            }
        }
        let dst = &mut grad_src[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, wy0, y1, wy1)) in ty.iter().enumerate() {
            let (a, b) = (T::from(wy0).unwrap(), T::from(wy1).unwrap());
            for x in 0..w {
                let v = rows[oy * w + x];
                dst[y0 * w + x] = dst[y0 * w + x] + a * v;
                dst[y1 * w + x] = dst[y1 * w + x] + b * v;
            }
        }
    }
}

/// Convenience wrapper over an ndarray `C x H x W` array.
pub fn resize3<T: Float>(src: &ndarray::Array3<T>, oh: usize, ow: usize) -> ndarray::Array3<T> {
    let (c, h, w) = src.dim();
    let src = src.as_standard_layout();
    let mut out = vec![T::zero(); c * oh * ow];
    resize_into(src.as_slice().unwrap(), c, h, w, oh, ow, &mut out);
    ndarray::Array3::from_shape_vec((c, oh, ow), out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_is_box_average() {
        let src: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut out = vec![0.0; 4];
        resize_into(&src, 1, 4, 4, 2, 2, &mut out);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn constants_survive_any_size() {
        let src = vec![0.7f64; 2 * 5 * 7];
        for (oh, ow) in [(1, 1), (3, 2), (10, 14), (5, 7)] {
            let mut out = vec![0.0; 2 * oh * ow];
            resize_into(&src, 2, 5, 7, oh, ow, &mut out);
            assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn adjoint_identity() {
        // <R x, y> == <x, R^T y>
        let (c, h, w, oh, ow) = (2, 6, 5, 3, 10);
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..c * oh * ow).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let mut rx = vec![0.0; c * oh * ow];
        resize_into(&x, c, h, w, oh, ow, &mut rx);
        let mut rty = vec![0.0; c * h * w];
        resize_adjoint_acc(&y, c, h, w, oh, ow, &mut rty);
        let lhs: f64 = rx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&rty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
