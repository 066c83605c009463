//! 2-D convolution as im2col followed by a single sgemm.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        ConvGeom {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        }
    }

    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_identity(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    /// Output columns `[ox_lo, ox_hi)` whose input tap `ox*s + kx - pad` is in range.
    fn valid_x(&self, kx: usize) -> (usize, usize) {
        let off = kx as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest ox with ox*s + off <= w-1
        let hi_num = self.w as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = (hi + 1).min(self.ow as isize);
        (lo as usize, hi.max(lo) as usize)
    }
}

/// Unfolds `x` (`cin x h x w`) into `rows x cols`.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, out: &mut Vec<f32>) {
    out.clear();
    out.resize(g.rows() * g.cols(), 0.0);
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * g.cols()..(row + 1) * g.cols()];
                let (xlo, xhi) = g.valid_x(kx);
                for oy in 0..g.oh {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if s == 1 {
                        let ix0 = (xlo as isize + kx as isize - p) as usize;
                        drow[xlo..xhi].copy_from_slice(&src_row[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            drow[ox] = src_row[(ox * s + kx) - p as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Folds columns back onto the input grid, accumulating into `dx`.
pub(crate) fn col2im_acc(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * g.cols()..(row + 1) * g.cols()];
                let (xlo, xhi) = g.valid_x(kx);
                for oy in 0..g.oh {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.ow..(oy + 1) * g.ow];
                    for ox in xlo..xhi {
                        drow[(ox * s + kx) - p as usize] += srow[ox];
                    }
                }
            }
        }
    }
}

/// C (m x n) = alpha * A (m x k) * B (k x n) + beta * C with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: pointer extents are implied by the (m, k, n) dimensions and
    // strides, all of which the callers derive from the slice lengths.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward pass. `w` is `cout x cin x k x k`; returns `cout x oh x ow`.
pub(crate) fn conv_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, cout: usize, g: &ConvGeom) -> Vec<f32> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![0.0f32; cout * cols];
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            out[o * cols..(o + 1) * cols].iter_mut().for_each(|v| *v = bv);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.is_identity() {
        gemm(cout, rows, cols, w, rows as isize, 1, x, cols as isize, 1, beta, &mut out);
    } else {
        let mut buf = Vec::new();
        im2col(x, g, &mut buf);
        gemm(cout, rows, cols, w, rows as isize, 1, &buf, cols as isize, 1, beta, &mut out);
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

pub(crate) fn conv_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    cout: usize,
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let (rows, cols) = (g.rows(), g.cols());
    let mut buf = Vec::new();
    let colmat: &[f32] = if g.is_identity() {
        x
    } else if need.1 {
        im2col(x, g, &mut buf);
        &buf
    } else {
        &[]
    };
    let dw = need.1.then(|| {
        // dW (cout x rows) = dY (cout x cols) * cols^T (cols x rows)
        let mut dw = vec![0.0f32; cout * rows];
        gemm(cout, cols, rows, dy, cols as isize, 1, colmat, 1, cols as isize, 0.0, &mut dw);
        dw
    });
    let db = need.2.then(|| {
        (0..cout)
            .map(|o| dy[o * cols..(o + 1) * cols].iter().sum())
            .collect()
    });
    let dx = need.0.then(|| {
        // dCols (rows x cols) = W^T (rows x cout) * dY (cout x cols)
        let mut dcols = vec![0.0f32; rows * cols];
        gemm(rows, cout, cols, w, 1, rows as isize, dy, cols as isize, 1, 0.0, &mut dcols);
        if g.is_identity() {
            dcols
        } else {
            let mut dx = vec![0.0f32; g.cin * g.h * g.w];
            col2im_acc(&dcols, g, &mut dx);
            dx
        }
    });
    ConvGrads { dx, dw, db }
}
