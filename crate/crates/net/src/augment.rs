use ndarray::{s, Array3, Axis};
use rand::Rng;
use udcvr_core::config::AugConfig;
use udcvr_core::geometry::FlowField;

/// A draw of the dihedral augmentations, applied in the order
/// horizontal flip, vertical flip, quarter turn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    /// Quarter turn: the pixel at `(x, y)` moves to `(y, W-1-x)`.
    pub rot90: bool,
}

impl Augmentation {
    /// Each enabled transform fires independently with probability 1/2.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugConfig, rng: &mut R) -> Self {
        let mut coin = |on: bool| {
            let c = rng.random_bool(0.5);
            on && c
        };
        Augmentation {
            hflip: coin(cfg.hflip),
            vflip: coin(cfg.vflip),
            rot90: coin(cfg.rot90),
        }
    }

    pub fn apply_frame(&self, a: &Array3<f32>) -> Array3<f32> {
        let mut v = a.view();
        if self.hflip {
            v.invert_axis(Axis(2));
        }
        if self.vflip {
            v.invert_axis(Axis(1));
        }
        if self.rot90 {
            // new[y'][x'] = old[x'][W-1-y']
            v.swap_axes(1, 2);
            v.invert_axis(Axis(1));
        }
        v.as_standard_layout().into_owned()
    }

    /// Moves the field like a frame and rotates/negates its vectors to match.
    pub fn apply_flow(&self, f: &FlowField) -> FlowField {
        let mut uv = self.apply_frame(f.uv());
        if self.hflip {
            uv.slice_mut(s![0, .., ..]).mapv_inplace(|u| -u);
        }
        if self.vflip {
            uv.slice_mut(s![1, .., ..]).mapv_inplace(|v| -v);
        }
        if self.rot90 {
            // (u, v) -> (v, -u)
            let u = uv.slice(s![0, .., ..]).to_owned();
            let v = uv.slice(s![1, .., ..]).to_owned();
            uv.slice_mut(s![0, .., ..]).assign(&v);
            uv.slice_mut(s![1, .., ..]).assign(&u.mapv(|x| -x));
        }
        FlowField::new(uv).expect("two-channel field")
    }
}

/// Draws one augmentation and applies it to every frame and flow field.
pub fn augment<R: Rng + ?Sized>(
    frames: &[Array3<f32>],
    flows: &[FlowField],
    rng: &mut R,
    cfg: &AugConfig,
) -> (Vec<Array3<f32>>, Vec<FlowField>, Augmentation) {
    let aug = Augmentation::sample(cfg, rng);
    (
        frames.iter().map(|f| aug.apply_frame(f)).collect(),
        flows.iter().map(|f| aug.apply_flow(f)).collect(),
        aug,
    )
}
