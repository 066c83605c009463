use rand::Rng;
use rand_distr::{Distribution, Normal};
use udcvr_core::config::MotionParams;
use udcvr_core::geometry::Homography;

/// Per-frame camera motion parameters, expressed about the frame centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionStep {
    pub tx: f64,
    pub ty: f64,
    pub rotation: f64,
    pub px: f64,
    pub py: f64,
}

impl MotionStep {
    /// Pixel-coordinate homography for a frame centred at `centre`.
    pub fn homography(&self, centre: (f64, f64)) -> Homography {
        let (c, s) = (self.rotation.cos(), self.rotation.sin());
        let local = Homography::new([[c, -s, self.tx], [s, c, self.ty], [self.px, self.py, 1.0]])
            .expect("bounded steps are invertible");
        Homography::translation(centre.0, centre.1)
            .compose(&local)
            .compose(&Homography::translation(-centre.0, -centre.1))
    }
}

/// Scripted motion for a clip: `homographies[t-1]` maps frame `t-1` to `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionScript {
    pub params: MotionParams,
    pub steps: Vec<MotionStep>,
    pub homographies: Vec<Homography>,
}

impl MotionScript {
    /// No motion for a clip of `frames` frames.
    pub fn identity(frames: usize) -> Self {
        MotionScript {
            params: MotionParams::still(),
            steps: Vec::new(),
            homographies: vec![Homography::identity(); frames.saturating_sub(1)],
        }
    }

    /// `G_t = H_t ... H_1`, mapping frame 0 onto frame `t` (`G_0 = I`).
    pub fn cumulative(&self) -> Vec<Homography> {
        let mut out = vec![Homography::identity()];
        for h in &self.homographies {
            out.push(h.compose(out.last().unwrap()));
        }
        out
    }
}

/// Smooth random walk of the per-frame motion parameters, each kept within
/// its bound. Rotation and perspective act about the centre of a
/// `width x height` frame.
pub fn sample_motion(params: &MotionParams, frames: usize, size: (usize, usize), rng: &mut impl Rng) -> MotionScript {
    let (height, width) = size;
    let centre = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let bounds = [
        params.max_translation,
        params.max_translation,
        params.max_rotation,
        params.max_perspective,
        params.max_perspective,
    ];
    let mut state: [f64; 5] = bounds.map(|b| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 });
    let mut steps = Vec::with_capacity(frames.saturating_sub(1));
    for t in 1..frames {
        if t > 1 {
            for (v, &b) in state.iter_mut().zip(&bounds) {
                if b > 0.0 {
                    let kick = Normal::new(0.0, 0.25 * b).expect("positive std");
                    *v = (*v + kick.sample(rng)).clamp(-b, b);
                }
            }
        }
        steps.push(MotionStep {
            tx: state[0],
            ty: state[1],
            rotation: state[2],
            px: state[3],
            py: state[4],
        });
    }
    let homographies = steps.iter().map(|s| s.homography(centre)).collect();
    MotionScript {
        params: params.clone(),
        steps,
        homographies,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand::rngs::StdRng {
        rand::rngs::StdRng::seed_from_u64(seed)
    }

    #[test]
    fn zero_bounds_give_identity() {
        let s = sample_motion(&MotionParams::still(), 5, (32, 48), &mut rng(1));
        assert_eq!(s.homographies.len(), 4);
        for h in &s.homographies {
            assert_eq!(h.matrix(), Homography::identity().matrix());
        }
    }

    #[test]
    fn translation_bound_holds() {
        let p = MotionParams {
            max_translation: 2.0,
            ..MotionParams::default()
        };
        for seed in 0..20 {
            let s = sample_motion(&p, 12, (64, 64), &mut rng(seed));
            for st in &s.steps {
                assert!(st.tx.abs() <= 2.0 && st.ty.abs() <= 2.0);
                assert!(st.rotation.abs() <= p.max_rotation);
                assert!(st.px.abs() <= p.max_perspective && st.py.abs() <= p.max_perspective);
            }
            for h in &s.homographies {
                assert!(h.det().abs() > 0.5);
            }
        }
    }

    #[test]
    fn translation_moves_the_centre_by_t() {
        let step = MotionStep {
            tx: 1.5,
            ty: -0.5,
            rotation: 0.3,
            px: 0.0,
            py: 0.0,
        };
        let h = step.homography((10.0, 20.0));
        let (x, y) = h.apply_point(10.0, 20.0).unwrap();
        assert!((x - 11.5).abs() < 1e-12 && (y - 19.5).abs() < 1e-12);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let p = MotionParams::default();
        assert_eq!(sample_motion(&p, 8, (64, 64), &mut rng(7)), sample_motion(&p, 8, (64, 64), &mut rng(7)));
        assert!(sample_motion(&p, 1, (64, 64), &mut rng(7)).homographies.is_empty());
    }
}
