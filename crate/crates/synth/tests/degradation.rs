use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use udcvr_synth::{degrade_frame, DegradeParams, Psf};

fn rng(seed: u64) -> rand::rngs::StdRng {
    rand::rngs::StdRng::seed_from_u64(seed)
}

/// Sliding-window circular convolution, evaluated tap by tap.
fn brute_force(gt: &Array3<f32>, k: &Array2<f64>) -> Array3<f64> {
    let (c, h, w) = gt.dim();
    let r = (k.nrows() / 2) as i64;
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let mut acc = 0.0;
        for i in 0..k.nrows() as i64 {
            for j in 0..k.ncols() as i64 {
                let sy = (y as i64 + r - i).rem_euclid(h as i64) as usize;
                let sx = (x as i64 + r - j).rem_euclid(w as i64) as usize;
                acc += k[(i as usize, j as usize)] * gt[(ch, sy, sx)] as f64;
            }
        }
        acc
    })
}

fn random_psf(size: usize, r: &mut impl Rng) -> Psf {
    Psf::new(Array3::from_shape_fn((1, size, size), |_| r.random::<f64>())).unwrap()
}

#[test]
fn matches_direct_circular_convolution() {
    let mut r = rng(11);
    for (h, w) in [(8, 8), (16, 16), (33, 31)] {
        for size in [3, 5, 11] {
            // stay below saturation so the clamp is inactive
            let gt = Array3::from_shape_fn((3, h, w), |_| r.random_range(0.0f32..0.9));
            let psf = random_psf(size, &mut r);
            let got = degrade_frame(gt.view(), &psf, &DegradeParams::default(), &mut r).unwrap();
            let want = brute_force(&gt, &psf.kernel().index_axis(ndarray::Axis(0), 0).to_owned());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((*a as f64 - b).abs() < 1e-5, "{h}x{w} k{size}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn per_channel_kernels_apply_to_their_channel() {
    let mut r = rng(12);
    let gt = Array3::from_shape_fn((3, 9, 10), |_| r.random_range(0.0f32..0.5));
    let psf = Psf::new(Array3::from_shape_fn((3, 5, 5), |_| r.random::<f64>())).unwrap();
    let got = degrade_frame(gt.view(), &psf, &DegradeParams::default(), &mut r).unwrap();
    for c in 0..3 {
        let single = gt.slice(ndarray::s![c..c + 1, .., ..]).to_owned();
        let want = brute_force(&single, &psf.kernel().index_axis(ndarray::Axis(0), c).to_owned());
        for (a, b) in got.index_axis(ndarray::Axis(0), c).iter().zip(want.iter()) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }
}

fn frame_strategy() -> impl Strategy<Value = Array3<f32>> {
    (2usize..9, 2usize..9).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0.0f32..0.2, 3 * h * w)
            .prop_map(move |v| Array3::from_shape_vec((3, h, w), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn linear_before_the_clamp(gt in frame_strategy(), a in 0.1f32..2.0, seed in 0u64..1000) {
        let psf = random_psf(3, &mut rng(seed));
        let p = DegradeParams::default();
        let y1 = degrade_frame(gt.view(), &psf, &p, &mut rng(0)).unwrap();
        let scaled = gt.mapv(|v| a * v);
        let y2 = degrade_frame(scaled.view(), &psf, &p, &mut rng(0)).unwrap();
        for (u, v) in y1.iter().zip(y2.iter()) {
            prop_assert!((a * u - v).abs() < 1e-5);
        }
    }

    #[test]
    fn circular_blur_preserves_the_mean(gt in frame_strategy(), gamma in 0.5f64..2.0, seed in 0u64..1000) {
        let psf = random_psf(5, &mut rng(seed));
        let p = DegradeParams { gamma, ..DegradeParams::default() };
        let y = degrade_frame(gt.view(), &psf, &p, &mut rng(0)).unwrap();
        for c in 0..3 {
            let m_in = gt.index_axis(ndarray::Axis(0), c).mean().unwrap() as f64;
            let m_out = y.index_axis(ndarray::Axis(0), c).mean().unwrap() as f64;
            prop_assert!((m_out - gamma * m_in).abs() < 1e-5);
        }
    }

    #[test]
    fn saturation_is_monotone(gt in frame_strategy(), g1 in 0.5f64..20.0, dg in 0.0f64..10.0, hi in 0.5f64..1.0) {
        let gt = gt.mapv(|v| v * 10.0);
        let psf = random_psf(3, &mut rng(1));
        let p1 = DegradeParams { gamma: g1, clamp_hi: hi, ..DegradeParams::default() };
        let p2 = DegradeParams { gamma: g1 + dg, ..p1 };
        let y1 = degrade_frame(gt.view(), &psf, &p1, &mut rng(0)).unwrap();
        let y2 = degrade_frame(gt.view(), &psf, &p2, &mut rng(0)).unwrap();
        for (a, b) in y1.iter().zip(y2.iter()) {
            prop_assert!(*a <= hi as f32 && *b <= hi as f32);
            prop_assert!(b + 1e-6 >= *a);
        }
    }
}
